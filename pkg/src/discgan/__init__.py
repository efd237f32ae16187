"""Physics-rendered underwater style synthesis with per-cluster style-content GANs."""

from .clustering import ClusterModel, extract_style_features, kmeans_fit, suggest_k
from .metrics import fid, psnr, ssim
from .physics import WaterType, load_water_types, render_underwater
from .training import TrainConfig, synthesize, train_cluster

__version__ = "0.1.0"

__all__ = [
    "ClusterModel",
    "TrainConfig",
    "WaterType",
    "extract_style_features",
    "fid",
    "kmeans_fit",
    "load_water_types",
    "psnr",
    "render_underwater",
    "ssim",
    "suggest_k",
    "synthesize",
    "train_cluster",
]
