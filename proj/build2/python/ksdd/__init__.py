"""Two-stage surface-defect detection: segmentation + decision network.

Thin Python veneer over the C++ core. The heavy lifting (manual
backpropagation, training, evaluation) lives in the compiled extension;
see the `ksdd` command-line tool for full training runs.
"""

from ._core import (
    DataError,
    DecisionNet,
    SegmentationNet,
    WeightFileError,
    average_precision,
    best_f_threshold,
    build_decision_net,
    build_segmentation_net,
    count_parameters,
    dec_forward,
    fp_at_full_recall,
    load_dataset,
    load_weights,
    mac_count,
    save_weights,
    score_image,
    seg_forward,
    set_fast_gemm,
    synth_generate,
)

__all__ = [
    "DataError",
    "DecisionNet",
    "SegmentationNet",
    "WeightFileError",
    "average_precision",
    "best_f_threshold",
    "build_decision_net",
    "build_segmentation_net",
    "count_parameters",
    "dec_forward",
    "fp_at_full_recall",
    "load_dataset",
    "load_weights",
    "mac_count",
    "save_weights",
    "score_image",
    "seg_forward",
    "set_fast_gemm",
    "synth_generate",
]
