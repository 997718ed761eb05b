"""Generic fundus image enhancement with frequency self-supervised representations."""

__version__ = "0.1.0"

from .data import AugmentationConfig, FundusImage, estimate_fov_mask, load_image, random_scale_crop
from .degradation import DegradationPolicy, DegradationSpec, apply_degradation, sample_spec, synthesize_view_set
from .frequency import GaussianKernelSpec, gaussian_kernel, highpass
from .metrics import count_macs, psnr, ssim
from .network import GFENet, NetworkConfig
from .training import LossBundle, TrainConfig, lr_schedule, run_training

__all__ = [
    "AugmentationConfig", "FundusImage", "estimate_fov_mask", "load_image", "random_scale_crop",
    "DegradationPolicy", "DegradationSpec", "apply_degradation", "sample_spec", "synthesize_view_set",
    "GaussianKernelSpec", "gaussian_kernel", "highpass",
    "count_macs", "psnr", "ssim",
    "GFENet", "NetworkConfig",
    "LossBundle", "TrainConfig", "lr_schedule", "run_training",
]
