"""Decoupled gradient harmonizing losses for partially annotated detection.

Subpackages:

* :mod:`dghm.losses`      -- per-example losses and analytic gradients
* :mod:`dghm.harmonizer`  -- gradient-density weighting (GHM / DGHM families)
* :mod:`dghm.simdata`     -- synthetic partially-annotated detection benchmark
* :mod:`dghm.model`       -- minimal MLP detector with hand-derived backprop
* :mod:`dghm.metrics`     -- recall / precision / NFPs / FROC / T-,R-recall
* :mod:`dghm.experiments` -- reproducible experiment grids and CSV exports
"""

from .harmonizer import (
    GradientHistogram,
    HarmonizerConfig,
    LossSpec,
    Mode,
    Partition,
    build_histograms,
    dghm_c_loss,
    ghm_c_loss,
    gradient_density,
    harmonize_weights,
    partition_of,
)
from .losses import (
    FocalParams,
    SceParams,
    ce_grad_logit,
    ce_loss,
    focal_loss,
    gradient_norm,
    sce_loss,
    sigmoid,
    smooth_l1,
)
from .metrics import MetricsReport, froc, match_detections, nfps, operating_point
from .model import Predictor, TrainConfig, finite_difference_check, train
from .simdata import Box, CorruptionSpec, Scene, SceneSpec, corrupt_annotations, iou

__all__ = [
    "Box", "CorruptionSpec", "FocalParams", "GradientHistogram",
    "HarmonizerConfig", "LossSpec", "MetricsReport", "Mode", "Partition",
    "Predictor", "SceParams", "Scene", "SceneSpec", "TrainConfig",
    "build_histograms", "ce_grad_logit", "ce_loss", "corrupt_annotations",
    "dghm_c_loss", "finite_difference_check", "focal_loss", "froc",
    "ghm_c_loss", "gradient_density", "gradient_norm", "harmonize_weights",
    "iou", "match_detections", "nfps", "operating_point", "partition_of",
    "sce_loss", "sigmoid", "smooth_l1", "train",
]

__version__ = "0.1.0"
