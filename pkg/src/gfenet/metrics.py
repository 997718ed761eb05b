"""Full-reference quality metrics and forward-cost accounting."""

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
from scipy import signal

from .data import list_corpus, load_image
from .errors import RangeError, ShapeError, SizeError
from .network import NetworkConfig

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _as_unit(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.size and (a.min() < 0.0 or a.max() > 1.0):
        raise RangeError(f"{name} spans [{a.min():.3g}, {a.max():.3g}]; metrics need unit-range images")
    return a


def _pair(a, b):
    a, b = _as_unit(a, "a"), _as_unit(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, mask: Optional[np.ndarray] = None) -> float:
    """PSNR in dB with data range 1; identical inputs give ``inf``."""
    a, b = _pair(a, b)
    d2 = (a - b) ** 2
    if mask is not None:
        d2 = d2[np.asarray(mask, bool)]
    mse = float(d2.mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _window():
    i = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(i**2) / (2 * SSIM_SIGMA**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(a, b) -> np.ndarray:
    """Local SSIM over the valid window positions, shape ``(H-10, W-10, C)``."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise SizeError(f"image {a.shape[:2]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    w = _window()
    c1, c2 = K1**2, K2**2
    out = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        f = lambda z: signal.correlate(z, w, mode="valid", method="direct")
        mx, my = f(x), f(y)
        sxx = f(x * x) - mx * mx
        syy = f(y * y) - my * my
        sxy = f(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        out.append(num / den)
    return np.stack(out, axis=-1)


def ssim(a, b, mask: Optional[np.ndarray] = None) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5) over space and channels.

    With ``mask``, only windows centered inside the mask are averaged.
    """
    m = ssim_map(a, b)
    if mask is not None:
        r = SSIM_WINDOW // 2
        inner = np.asarray(mask, bool)[r:-r, r:-r]
        return float(m[inner].mean())
    return float(m.mean())


@dataclass
class MetricsReport:
    per_image: List[Tuple[str, float, float]] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.per_image)

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r[1] for r in self.per_image])) if self.per_image else math.nan

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r[2] for r in self.per_image])) if self.per_image else math.nan

    def aggregate(self) -> dict:
        return {"count": self.count, "mean_ssim": _num(self.mean_ssim),
                "mean_psnr": _num(self.mean_psnr), "warnings": list(self.warnings)}

    def write(self, csv_path) -> Path:
        """Write the per-image CSV and a ``.json`` aggregate block beside it."""
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "ssim", "psnr"])
            for path, s, p in self.per_image:
                w.writerow([path, repr(s), _num(p)])
        json_path = csv_path.with_suffix(".json")
        json_path.write_text(json.dumps(self.aggregate(), indent=2))
        return json_path


def _num(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def evaluate_pairs(enhanced_dir, reference_dir, in_mask: bool = False) -> MetricsReport:
    """Score filename-matched pairs; unmatched files become warnings."""
    enh = set(list_corpus(enhanced_dir))
    ref = set(list_corpus(reference_dir))
    report = MetricsReport()
    for rel in sorted(enh ^ ref):
        side = "reference" if rel in enh else "enhanced"
        report.warnings.append(f"{rel}: no matching {side} image")
    for rel in sorted(enh & ref):
        a = load_image(Path(enhanced_dir) / rel)
        b = load_image(Path(reference_dir) / rel)
        mask = b.fov_mask if in_mask else None
        if a.shape != b.shape:
            report.warnings.append(f"{rel}: size {a.shape} differs from reference {b.shape}")
            continue
        report.per_image.append((rel, ssim(a.pixels, b.pixels, mask), psnr(a.pixels, b.pixels, mask)))
    return report


def conv_macs(cin, cout, k, out_side):
    return cin * k * k * cout * out_side * out_side


def count_macs(cfg: Optional[NetworkConfig] = None, input_side: int = 256, transposed: str = "output") -> float:
    """Analytic multiply-accumulates of one forward pass, in GMac.

    ``transposed="output"`` charges a transposed convolution per output
    position, the convention of common PyTorch profilers (and of published
    GMac tables); ``"input"`` charges per input position, the true count.
    """
    cfg = cfg or NetworkConfig()
    if transposed not in ("output", "input"):
        raise ValueError("transposed must be 'output' or 'input'")
    total, cin, side = 0, cfg.in_channels, input_side
    for cout in cfg.enc_channels:
        side //= 2
        total += conv_macs(cin, cout, 4, side)
        cin = cout
    for in_channels in (cfg.repr_in_channels(), cfg.enh_in_channels()):
        outs = list(cfg.dec_channels) + [cfg.out_channels]
        s = input_side >> cfg.L
        for c_in, c_out in zip(in_channels, outs):
            s *= 2
            total += conv_macs(c_in, c_out, 4, s if transposed == "output" else s // 2)
    return total / 1e9


def count_macs_traced(model: nn.Module, input_side: int = 256, transposed: str = "output") -> float:
    """Count MACs by hooking every conv of an actual forward pass, in GMac."""
    total = [0]

    def hook(mod, inp, out):
        k = mod.kernel_size[0] * mod.kernel_size[1]
        per_pos = k * (mod.in_channels // mod.groups) * mod.out_channels
        x = out if (isinstance(mod, nn.Conv2d) or transposed == "output") else inp[0]
        total[0] += per_pos * x.shape[0] * x.shape[-1] * x.shape[-2]

    handles = [m.register_forward_hook(hook) for m in model.modules()
               if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d))]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(torch.zeros(1, 3, input_side, input_side))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return total[0] / 1e9
