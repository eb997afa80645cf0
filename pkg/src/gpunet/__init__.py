"""GP-Unet: lesion detection from per-image counts with a 3D U-Net whose
global pooling head can be removed to obtain full-resolution heatmaps."""
from .model import GPUNet, NetworkConfig, build
from .training import TrainConfig, train

__all__ = ["GPUNet", "NetworkConfig", "TrainConfig", "build", "train"]
__version__ = "0.1.0"
