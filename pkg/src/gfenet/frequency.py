"""Gaussian high-pass residual used as the self-supervision target.

``highpass(x) = x - blur(x)`` with a normalized Gaussian kernel and reflect
padding. The torch path is differentiable and is what the training losses
call; ``highpass_np`` is a thin numpy wrapper for data tooling.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, SizeError

BASE_SIDE = 256


@dataclass(frozen=True)
class GaussianKernelSpec:
    radius: int = 10
    sigma: float = 5.0

    def __post_init__(self):
        if int(self.radius) != self.radius or self.radius < 1:
            raise ConfigError(f"kernel radius must be an integer >= 1, got {self.radius}")
        if not self.sigma > 0:
            raise ConfigError(f"kernel sigma must be > 0, got {self.sigma}")

    @property
    def size(self) -> int:
        return 2 * self.radius + 1

    def scaled(self, side: int, base_side: int = BASE_SIDE) -> "GaussianKernelSpec":
        """Rescale radius and sigma for an input of ``side`` pixels.

        The defaults are tuned at ``base_side``; a 512 input doubles both.
        """
        f = side / base_side
        return GaussianKernelSpec(max(1, int(round(self.radius * f))), self.sigma * f)


def gaussian_kernel(spec: GaussianKernelSpec) -> np.ndarray:
    """Return the ``(2r+1, 2r+1)`` float64 weight grid, summing to one."""
    r = spec.radius
    i = np.arange(-r, r + 1, dtype=np.float64)
    d2 = i[:, None] ** 2 + i[None, :] ** 2
    w = np.exp(-d2 / (2.0 * spec.sigma**2))
    w /= w.sum()
    return w


def _check_size(h, w, spec, padding):
    if min(h, w) < spec.size:
        raise SizeError(
            f"image {h}x{w} is smaller than the {spec.size}x{spec.size} Gaussian kernel"
        )
    if padding == "reflect" and spec.radius >= min(h, w):
        raise SizeError(f"reflect padding of {spec.radius} needs a side > {spec.radius}")


def blur(x: torch.Tensor, spec: GaussianKernelSpec, padding: str = "reflect") -> torch.Tensor:
    """Depthwise Gaussian blur of an ``(N, C, H, W)`` or ``(C, H, W)`` tensor."""
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise SizeError(f"expected a (N, C, H, W) tensor, got shape {tuple(x.shape)}")
    _, c, h, w = x.shape
    _check_size(h, w, spec, padding)
    k = torch.as_tensor(gaussian_kernel(spec), dtype=x.dtype, device=x.device)
    k = k.expand(c, 1, spec.size, spec.size)
    r = spec.radius
    if padding == "zeros":
        out = F.conv2d(x, k, padding=r, groups=c)
    else:
        out = F.conv2d(F.pad(x, (r, r, r, r), mode=padding), k, groups=c)
    return out.squeeze(0) if squeeze else out


def highpass(x: torch.Tensor, spec: GaussianKernelSpec, padding: str = "reflect") -> torch.Tensor:
    """High-frequency map ``x - x * g``; linear and differentiable in ``x``."""
    return x - blur(x, spec, padding)


def highpass_np(img: np.ndarray, spec: GaussianKernelSpec, padding: str = "reflect") -> np.ndarray:
    """numpy convenience for ``(H, W, C)`` or ``(H, W)`` rasters."""
    a = np.asarray(img, dtype=np.float64)
    t = torch.from_numpy(a[..., None] if a.ndim == 2 else a).permute(2, 0, 1)
    out = highpass(t, spec, padding).permute(1, 2, 0).numpy()
    return out[..., 0] if a.ndim == 2 else out


def hfm_to_uint8(hfm: np.ndarray) -> np.ndarray:
    """Map an HFM from [-1, 1] to [0, 255] for inspection dumps."""
    return np.round((np.clip(hfm, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)
