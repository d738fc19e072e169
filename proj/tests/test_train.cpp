#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <random>

#include "ksdd/eval.hpp"
#include "ksdd/train.hpp"

using namespace ksdd;

namespace {

Sample make_sample(int h, int w, bool defective, std::uint64_t seed,
                   const std::string& id) {
    Sample s;
    s.image = Tensor({1, h, w});
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.3, 0.7);
    for (double& v : s.image.data) v = u(rng);
    s.mask = Mask(h, w);
    if (defective) {
        // a dark horizontal streak at a seed-dependent position
        const int y = h / 4 + static_cast<int>(rng() % std::max(1, h / 2));
        const int x0 = static_cast<int>(rng() % std::max(1, w / 4));
        for (int x = x0; x < x0 + w / 2; ++x) {
            s.image.at(0, y, x) = 0.05;
            s.mask.at(y, x) = 1;
        }
    }
    s.defective = defective;
    s.product_id = id;
    s.image_id = id;
    return s;
}

std::vector<double> seg_weights_flat(const SegmentationNet& net) {
    std::vector<double> out;
    for (const auto& u : net.layers) {
        out.insert(out.end(), u.w.data.begin(), u.w.data.end());
        out.insert(out.end(), u.b.begin(), u.b.end());
        if (u.has_norm) {
            out.insert(out.end(), u.norm.gamma.begin(), u.norm.gamma.end());
            out.insert(out.end(), u.norm.beta.begin(), u.norm.beta.end());
        }
    }
    return out;
}

}  // namespace

TEST_CASE("epochs_for matches the alternating-sampler definition") {
    CHECK(epochs_for(6600, 33) == doctest::Approx(100.0));
    CHECK(epochs_for(100, 25) == doctest::Approx(2.0));
    CHECK_THROWS_AS(epochs_for(10, 0), std::invalid_argument);
}

TEST_CASE("sampler alternates classes with even steps positive") {
    std::vector<Sample> samples;
    for (int i = 0; i < 7; ++i)
        samples.push_back(make_sample(8, 8, i < 3, 100 + static_cast<std::uint64_t>(i),
                                      "s" + std::to_string(i)));
    BalancedSampler sampler = BalancedSampler::from_samples(samples, 42);
    for (int step = 0; step < 10000; ++step) {
        const bool expect_pos = step % 2 == 0;
        CHECK(sampler.next_is_positive() == expect_pos);
        const std::size_t idx = sampler.next();
        CHECK(samples[idx].defective == expect_pos);
    }
}

TEST_CASE("sampler cycles each class without replacement") {
    BalancedSampler sampler({0, 1, 2}, {3, 4, 5, 6}, 7);
    std::map<std::size_t, int> pos_counts, neg_counts;
    // 48 draws: 24 positive draws = 8 cycles of 3, 24 negative = 6 cycles of 4
    for (int step = 0; step < 48; ++step) {
        const std::size_t idx = sampler.next();
        (step % 2 == 0 ? pos_counts : neg_counts)[idx]++;
    }
    for (std::size_t i : {0u, 1u, 2u}) CHECK(pos_counts[i] == 8);
    for (std::size_t i : {3u, 4u, 5u, 6u}) CHECK(neg_counts[i] == 6);
    // within any aligned cycle each member appears exactly once
    BalancedSampler s2({0, 1, 2}, {3, 4}, 7);
    std::map<std::size_t, int> first_cycle;
    for (int step = 0; step < 6; ++step) {
        const std::size_t idx = s2.next();
        if (step % 2 == 0) first_cycle[idx]++;
    }
    for (std::size_t i : {0u, 1u, 2u}) CHECK(first_cycle[i] == 1);
}

TEST_CASE("sampler is deterministic in the seed and rejects empty classes") {
    BalancedSampler a({0, 1}, {2, 3}, 9), b({0, 1}, {2, 3}, 9), c({0, 1}, {2, 3}, 10);
    std::vector<std::size_t> da, db, dc;
    for (int i = 0; i < 40; ++i) {
        da.push_back(a.next());
        db.push_back(b.next());
        dc.push_back(c.next());
    }
    CHECK(da == db);
    CHECK(da != dc);
    CHECK_THROWS_AS(BalancedSampler({}, {1}, 0), std::invalid_argument);
    CHECK_THROWS_AS(BalancedSampler({0}, {}, 0), std::invalid_argument);
}

TEST_CASE("downscale_mask_block keeps a block positive when any pixel is") {
    Mask m(16, 16);
    m.at(9, 2) = 1;
    Mask d = downscale_mask_block(m, 8);
    CHECK(d.h == 2);
    CHECK(d.w == 2);
    CHECK(d.at(1, 0) == 1);
    CHECK(d.positive_count() == 1);
    Mask full(8, 8);
    for (auto& v : full.v) v = 1;
    CHECK(downscale_mask_block(full, 8).positive_count() == 1);
    CHECK_THROWS_AS(downscale_mask_block(Mask(10, 10), 8), std::invalid_argument);
}

TEST_CASE("pixel loss closed-form values") {
    Tensor zeros({1, 2, 2});
    Mask empty(2, 2);
    // cross-entropy at logit 0 is ln 2 for either target value
    CHECK(pixel_loss(zeros, empty, LossType::cross_entropy).loss ==
          doctest::Approx(std::log(2.0)));
    Mask ones(2, 2);
    for (auto& v : ones.v) v = 1;
    CHECK(pixel_loss(zeros, ones, LossType::cross_entropy).loss ==
          doctest::Approx(std::log(2.0)));
    CHECK(pixel_loss(zeros, empty, LossType::mse).loss == doctest::Approx(0.0));
    // MSE, one positive target among four, zero logits: mean of (0-1)^2 = 1/4
    Mask one(2, 2);
    one.at(0, 1) = 1;
    CHECK(pixel_loss(zeros, one, LossType::mse).loss == doctest::Approx(0.25));

    // large logits stay finite under cross-entropy
    Tensor big({1, 1, 1});
    big.data[0] = 500.0;
    Mask t1(1, 1);
    t1.at(0, 0) = 1;
    PixelLoss pl = pixel_loss(big, t1, LossType::cross_entropy);
    CHECK(std::isfinite(pl.loss));
    CHECK(pl.loss == doctest::Approx(0.0));
    big.data[0] = -500.0;
    pl = pixel_loss(big, t1, LossType::cross_entropy);
    CHECK(std::isfinite(pl.loss));
    CHECK(pl.loss == doctest::Approx(500.0));
}

TEST_CASE("pixel loss gradients match finite differences") {
    std::mt19937_64 rng(13);
    std::normal_distribution<double> g(0.0, 1.0);
    Tensor logits({1, 3, 4});
    for (double& v : logits.data) v = g(rng);
    Mask target(3, 4);
    for (auto& v : target.v) v = rng() % 2;

    for (LossType type : {LossType::mse, LossType::cross_entropy}) {
        PixelLoss pl = pixel_loss(logits, target, type);
        const double eps = 1e-6;
        for (std::size_t i = 0; i < logits.data.size(); ++i) {
            Tensor p = logits, m = logits;
            p.data[i] += eps;
            m.data[i] -= eps;
            const double fd = (pixel_loss(p, target, type).loss -
                               pixel_loss(m, target, type).loss) /
                              (2 * eps);
            CHECK(pl.d_logits.data[i] == doctest::Approx(fd).epsilon(1e-5));
        }
    }
}

TEST_CASE("pixel loss rejects mismatched target size") {
    Tensor logits({1, 2, 2});
    CHECK_THROWS_AS(pixel_loss(logits, Mask(3, 2), LossType::mse),
                    std::invalid_argument);
}

TEST_CASE("finite differences validate the full segmentation backward pass") {
    SegmentationNet net = build_segmentation_net(3);
    // 16x16 gives a 2x2 output map; an 8x8 image would reduce the deepest
    // feature map to 1x1 where the spatial normalization is degenerate
    Sample s = make_sample(16, 16, true, 5, "fd");
    Mask target = downscale_mask_block(apply_annotation(s.mask, AnnotationKind::dilate5), 8);

    auto loss_of = [&](SegmentationNet& n) {
        SegOutput out = seg_forward(n, s.image, Mode::train);
        return pixel_loss(out.logits, target, LossType::cross_entropy).loss;
    };

    zero_grads(net);
    SegContext ctx;
    SegOutput out = seg_forward(net, s.image, Mode::train, &ctx);
    PixelLoss pl = pixel_loss(out.logits, target, LossType::cross_entropy);
    seg_backward(net, ctx, Tensor(), pl.d_logits);

    // sample per layer so the 12.9M-parameter 15x15 conv does not dominate
    std::vector<std::vector<std::pair<double*, double*>>> by_layer;
    for (auto& u : net.layers) {
        std::vector<std::pair<double*, double*>> pl;
        for (std::size_t i = 0; i < u.w.data.size(); ++i)
            pl.emplace_back(&u.w.data[i], &u.dw.data[i]);
        for (std::size_t i = 0; i < u.b.size(); ++i)
            pl.emplace_back(&u.b[i], &u.db[i]);
        if (u.has_norm) {
            for (std::size_t i = 0; i < u.norm.gamma.size(); ++i)
                pl.emplace_back(&u.norm.gamma[i], &u.d_gamma[i]);
            for (std::size_t i = 0; i < u.norm.beta.size(); ++i)
                pl.emplace_back(&u.norm.beta[i], &u.d_beta[i]);
        }
        by_layer.push_back(std::move(pl));
    }
    std::mt19937_64 rng(77);
    const double eps = 1e-5;
    int checked = 0;
    auto central = [&](double* p, double h) {
        const double saved = *p;
        *p = saved + h;
        const double lp = loss_of(net);
        *p = saved - h;
        const double lm = loss_of(net);
        *p = saved;
        return (lp - lm) / (2 * h);
    };
    for (int trial = 0; trial < 40; ++trial) {
        auto& pairs = by_layer[rng() % by_layer.size()];
        auto [p, g] = pairs[rng() % pairs.size()];
        const double fd = central(p, eps);
        const double fd2 = central(p, 2 * eps);
        if (std::fabs(fd) < 1e-7 && std::fabs(*g) < 1e-7) continue;  // both ~0
        // two step sizes disagreeing flags a ReLU/argmax kink inside the
        // probe interval; the difference quotient is meaningless there
        if (std::fabs(fd - fd2) > 0.05 * std::max(std::fabs(fd), 1e-9)) continue;
        const double rel = std::fabs(*g - fd) /
                           std::max({std::fabs(*g), std::fabs(fd), 1e-6});
        CHECK(rel < 1e-3);
        ++checked;
    }
    CHECK(checked >= 10);
}

TEST_CASE("lr zero leaves all weights untouched") {
    std::vector<Sample> samples{make_sample(16, 16, true, 1, "p"),
                                make_sample(16, 16, false, 2, "n")};
    SegmentationNet net = build_segmentation_net(4);
    const auto before = seg_weights_flat(net);

    TrainConfig cfg;
    cfg.lr_segmentation = 0.0;
    cfg.steps_segmentation = 4;
    cfg.seed = 1;
    train_segmentation(net, samples, cfg);
    CHECK(seg_weights_flat(net) == before);
}

TEST_CASE("segmentation training drives the loss down on a small pair") {
    std::vector<Sample> samples{make_sample(32, 32, true, 11, "p"),
                                make_sample(32, 32, false, 12, "n")};
    SegmentationNet net = build_segmentation_net(6);
    TrainConfig cfg;
    cfg.loss = LossType::cross_entropy;
    cfg.set_default_lr();
    cfg.steps_segmentation = 60;
    cfg.seed = 3;
    auto trace = train_segmentation(net, samples, cfg);
    REQUIRE(trace.size() == 60);
    const double head = (trace[0] + trace[1]) / 2;
    const double tail = (trace[58] + trace[59]) / 2;
    CHECK(tail < head);
    CHECK(tail < 0.45);
    for (double l : trace) CHECK(std::isfinite(l));
}

TEST_CASE("decision training refuses an unfrozen segmentation net") {
    std::vector<Sample> samples{make_sample(16, 16, true, 1, "p"),
                                make_sample(16, 16, false, 2, "n")};
    SegmentationNet seg = build_segmentation_net(1);
    DecisionNet dec = build_decision_net(2);
    TrainConfig cfg;
    cfg.steps_decision = 1;
    CHECK_THROWS_AS(train_decision(seg, dec, samples, cfg), std::logic_error);
}

TEST_CASE("decision training leaves the frozen segmentation net bit-identical") {
    // decision input must be 64-divisible (its map is pooled three times)
    std::vector<Sample> samples{make_sample(64, 64, true, 21, "p"),
                                make_sample(64, 64, false, 22, "n")};
    SegmentationNet seg = build_segmentation_net(8);
    TrainConfig cfg;
    cfg.set_default_lr();
    cfg.steps_segmentation = 20;
    cfg.steps_decision = 30;
    cfg.seed = 9;
    train_segmentation(seg, samples, cfg);
    seg.frozen = true;

    const std::uint64_t before = parameter_hash(seg);
    DecisionNet dec = build_decision_net(10);
    auto trace = train_decision(seg, dec, samples, cfg);
    CHECK(parameter_hash(seg) == before);
    REQUIRE(trace.size() == 30);
    for (double l : trace) CHECK(std::isfinite(l));
}

TEST_CASE("two-stage training overfits a small corpus") {
    set_fast_gemm(true);
    std::vector<Sample> samples;
    for (int i = 0; i < 4; ++i)
        samples.push_back(
            make_sample(64, 64, true, 100 + static_cast<std::uint64_t>(i),
                        "p" + std::to_string(i)));
    for (int i = 0; i < 4; ++i)
        samples.push_back(
            make_sample(64, 64, false, 200 + static_cast<std::uint64_t>(i),
                        "n" + std::to_string(i)));
    SegmentationNet seg = build_segmentation_net(14);
    DecisionNet dec = build_decision_net(15);
    TrainConfig cfg;
    cfg.loss = LossType::cross_entropy;
    cfg.set_default_lr();
    cfg.steps_segmentation = 150;
    cfg.steps_decision = 150;
    cfg.seed = 4;
    train_segmentation(seg, samples, cfg);
    seg.frozen = true;
    train_decision(seg, dec, samples, cfg);

    auto score = [&](const Sample& s) {
        SegOutput out = seg_forward(seg, s.image, Mode::infer);
        return dec_forward(dec, out.features, out.logits, Mode::infer);
    };
    double min_pos = 1.0, max_neg = 0.0;
    for (const auto& s : samples) {
        const double sc = score(s);
        if (s.defective) min_pos = std::min(min_pos, sc);
        else max_neg = std::max(max_neg, sc);
    }
    CHECK(min_pos > 0.9);
    CHECK(max_neg < 0.1);
    set_fast_gemm(false);
}

TEST_CASE("rotation augmentation keeps training finite") {
    std::vector<Sample> samples{make_sample(64, 64, true, 41, "p"),
                                make_sample(64, 64, false, 42, "n")};
    SegmentationNet seg = build_segmentation_net(16);
    TrainConfig cfg;
    cfg.set_default_lr();
    cfg.rotate = true;
    cfg.steps_segmentation = 10;
    cfg.steps_decision = 10;
    cfg.seed = 5;
    auto trace = train_segmentation(seg, samples, cfg);
    for (double l : trace) CHECK(std::isfinite(l));
    seg.frozen = true;
    DecisionNet dec = build_decision_net(17);
    auto dtrace = train_decision(seg, dec, samples, cfg);
    for (double l : dtrace) CHECK(std::isfinite(l));
}

TEST_CASE("half-resolution training consumes full-resolution samples") {
    std::vector<Sample> samples{make_sample(32, 32, true, 51, "p"),
                                make_sample(32, 32, false, 52, "n")};
    SegmentationNet seg = build_segmentation_net(18);
    TrainConfig cfg;
    cfg.set_default_lr();
    cfg.half_resolution = true;
    cfg.steps_segmentation = 6;
    cfg.seed = 6;
    auto trace = train_segmentation(seg, samples, cfg);
    CHECK(trace.size() == 6);
    for (double l : trace) CHECK(std::isfinite(l));
}

TEST_CASE("logistic baseline separates separable descriptors") {
    std::vector<std::pair<double, double>> desc;
    std::vector<bool> labels;
    std::mt19937_64 rng(8);
    std::normal_distribution<double> g(0.0, 0.3);
    for (int i = 0; i < 40; ++i) {
        const bool pos = i % 2 == 0;
        desc.emplace_back((pos ? 3.0 : -3.0) + g(rng), (pos ? 1.0 : -1.0) + g(rng));
        labels.push_back(pos);
    }
    LogisticBaseline bl = fit_logistic_baseline(desc, labels);
    int correct = 0;
    for (std::size_t i = 0; i < desc.size(); ++i) {
        const double s = bl.score(desc[i].first, desc[i].second);
        CHECK(s > 0.0);
        CHECK(s < 1.0);
        if ((s >= 0.5) == labels[i]) ++correct;
    }
    CHECK(correct == 40);
}

TEST_CASE("logistic baseline rejects degenerate labels") {
    std::vector<std::pair<double, double>> desc{{1, 2}, {3, 4}};
    CHECK_THROWS_AS(fit_logistic_baseline(desc, {true, true}), std::invalid_argument);
    CHECK_THROWS_AS(fit_logistic_baseline(desc, {false, false}), std::invalid_argument);
    CHECK_THROWS_AS(fit_logistic_baseline(desc, {true}), std::invalid_argument);
}

TEST_CASE("seg_descriptor equals the global pooling of the logit map") {
    SegmentationNet net = build_segmentation_net(20);
    Sample s = make_sample(16, 16, true, 60, "d");
    auto [mx, avg] = seg_descriptor(net, s.image);
    SegOutput out = seg_forward(net, s.image, Mode::infer);
    double emax = out.logits.data[0], esum = 0.0;
    for (double v : out.logits.data) {
        emax = std::max(emax, v);
        esum += v;
    }
    CHECK(mx == doctest::Approx(emax));
    CHECK(avg == doctest::Approx(esum / static_cast<double>(out.logits.data.size())));
}

TEST_CASE("loss string round trip") {
    CHECK(loss_from_string("mse") == LossType::mse);
    CHECK(loss_from_string("cross_entropy") == LossType::cross_entropy);
    CHECK(loss_to_string(LossType::mse) == "mse");
    CHECK(loss_to_string(LossType::cross_entropy) == "cross_entropy");
    CHECK_THROWS_AS(loss_from_string("hinge"), std::invalid_argument);
}
