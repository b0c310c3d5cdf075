"""Calibrated cache models for few-shot adaptation of frozen feature classifiers."""

from ._accel import get_backend, set_backend, set_threads
from .approx import (
    NystromSketch,
    RffMap,
    bench_approx,
    lowrank_gp,
    lowrank_inverse,
    mean_prototype_logits,
    nystrom_logits,
    rff_logits,
)
from .bundle_io import FeatureBundle, LabeledSplit, generate_synthetic, read_bundle, write_bundle
from .calibration import CalibrationLayer, ContrastiveConfig, contrastive_loss, train_calibration
from .core import (
    CacheHyper,
    CacheModel,
    build_cache,
    confidence_calibrated_logits,
    fused_logits,
    gp_cache_logits,
    nw_cache_logits,
    predict,
    zero_shot_logits,
)
from .groups import GroupPartition, make_partition
from .kernel import KernelParams, gaussian_kernel, kernel_matrix
from .trainer import TrainConfig, cross_entropy, finetune, finetune_nw_baseline, loss_and_grad_keys
from .tuner import SearchSpace, evaluate, grid_search

__version__ = "0.1.0"
