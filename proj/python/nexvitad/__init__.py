"""Python bindings for the nexvitad anomaly-detection pipeline."""

from _nexvitad import (
    NexvitadError,
    auc,
    average_precision,
    bilinear_resize,
    gaussian_blur,
    grad_check,
    load_tensor,
    pro_mean_iou,
    save_tensor,
    score_image,
    sinkhorn_assign,
    sinkhorn_kmeans,
    synth_class,
    __version__,
)

__all__ = [
    "NexvitadError",
    "auc",
    "average_precision",
    "bilinear_resize",
    "gaussian_blur",
    "grad_check",
    "load_tensor",
    "pro_mean_iou",
    "save_tensor",
    "score_image",
    "sinkhorn_assign",
    "sinkhorn_kmeans",
    "synth_class",
    "__version__",
]
