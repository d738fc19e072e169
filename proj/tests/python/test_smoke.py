"""Smoke tests for the Python bindings."""

import numpy as np
import pytest

import ksdd


def test_parameter_count():
    seg = ksdd.build_segmentation_net(1)
    dec = ksdd.build_decision_net(2)
    total = ksdd.count_parameters(seg, dec)
    assert 15_600_000 <= total <= 15_750_000
    assert seg.parameter_count() + dec.parameter_count() == total


def test_forward_shapes_and_score():
    ksdd.set_fast_gemm(True)
    seg = ksdd.build_segmentation_net(1)
    dec = ksdd.build_decision_net(2)
    image = np.random.default_rng(0).uniform(0.0, 1.0, size=(1, 64, 64))
    features, logits = ksdd.seg_forward(seg, image)
    assert features.shape == (1024, 8, 8)
    assert logits.shape == (1, 8, 8)
    score = ksdd.dec_forward(dec, features, logits)
    assert 0.0 < score < 1.0
    assert score == pytest.approx(ksdd.score_image(seg, dec, image))


def test_seed_determinism():
    a = ksdd.build_segmentation_net(7)
    b = ksdd.build_segmentation_net(7)
    c = ksdd.build_segmentation_net(8)
    assert a.parameter_hash() == b.parameter_hash()
    assert a.parameter_hash() != c.parameter_hash()


def test_receptive_field_and_macs():
    seg = ksdd.build_segmentation_net(1)
    assert 196 <= seg.receptive_field() <= 216
    assert ksdd.mac_count(256, 256) > ksdd.mac_count(128, 128)


def test_weight_round_trip(tmp_path):
    seg = ksdd.build_segmentation_net(3)
    dec = ksdd.build_decision_net(4)
    path = str(tmp_path / "w.bin")
    ksdd.save_weights(path, seg, dec)
    seg2 = ksdd.build_segmentation_net(5)
    dec2 = ksdd.build_decision_net(6)
    ksdd.load_weights(path, seg2, dec2)
    assert seg.parameter_hash() == seg2.parameter_hash()
    with pytest.raises(ksdd.WeightFileError):
        ksdd.load_weights(str(tmp_path / "missing.bin"), seg2, dec2)


def test_metrics():
    scores = [0.9, 0.8, 0.3, 0.1]
    labels = [True, True, False, False]
    assert ksdd.average_precision(scores, labels) == pytest.approx(1.0)
    threshold, fp, fn, f1 = ksdd.best_f_threshold(scores, labels)
    assert f1 == pytest.approx(1.0)
    assert (fp, fn) == (0, 0)
    assert threshold == pytest.approx(0.8)
    assert ksdd.fp_at_full_recall(scores, labels) == 0


def test_synth_corpus_round_trip(tmp_path):
    root = str(tmp_path / "corpus")
    ksdd.synth_generate(2, 3, 64, 11, root)
    samples = ksdd.load_dataset(root)
    assert len(samples) == 5
    assert sum(s["defective"] for s in samples) == 2
    for s in samples:
        assert s["image"].shape == (1, 64, 64)
        assert s["mask"].shape == (64, 64)
        assert s["defective"] == bool(s["mask"].any())
    with pytest.raises(ksdd.DataError):
        ksdd.load_dataset(str(tmp_path / "nope"))
