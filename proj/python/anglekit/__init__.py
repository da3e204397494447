"""Python face of the angle-closure screening toolkit's core operations."""

import torch as _torch  # noqa: F401  (loads libtorch before the extension needs it)

from ._anglekit import (
    ValidationError,
    cosine_lr,
    decode_heatmap,
    encode_heatmap,
    fbeta_loss,
    focal_loss,
    format_metric,
    hybrid_loss,
    kr_loss,
    roc_auc,
    synth_generate,
    threshold_metrics,
)

__all__ = [
    "ValidationError",
    "cosine_lr",
    "decode_heatmap",
    "encode_heatmap",
    "fbeta_loss",
    "focal_loss",
    "format_metric",
    "hybrid_loss",
    "kr_loss",
    "roc_auc",
    "synth_generate",
    "threshold_metrics",
]
