"""Desk-scale diffusion-driven 3D object detection on bird's-eye-view boxes.

Training corrupts ground-truth boxes toward Gaussian noise and teaches a
small decoder to undo the corruption; inference iteratively refines
Gaussian-sampled boxes into detections. See the README for the pipeline
walkthrough and the CLI.
"""

from .config import Config, default_config, load_config
from .diffusion import BoxNormalizer, NoiseSchedule, linear_beta_schedule
from .geometry import BevBox, Box3D, Detection

__all__ = [
    "BevBox",
    "Box3D",
    "BoxNormalizer",
    "Config",
    "Detection",
    "NoiseSchedule",
    "default_config",
    "linear_beta_schedule",
    "load_config",
]

__version__ = "0.1.0"
