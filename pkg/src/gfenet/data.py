"""Fundus image ingestion, field-of-view masks and scale/crop augmentation."""

import os
import shutil
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Sequence, Tuple

import cv2
import numpy as np
from scipy import ndimage

from .errors import ConfigError, DegenerateInputError, FormatError, ImageReadError, RangeError

RANGES = {"unit": (0.0, 1.0), "signed": (-1.0, 1.0)}
FOV_THRESHOLD = 10 / 255
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MASK_SUFFIX = "_mask.png"


def _range_of(tag):
    try:
        return RANGES[tag]
    except KeyError:
        raise ConfigError(f"unknown range tag {tag!r}; expected one of {sorted(RANGES)}") from None


@dataclass
class FundusImage:
    """An RGB raster with its field-of-view mask.

    ``pixels`` is ``(H, W, 3)`` float32 in the interval named by ``range_tag``;
    ``fov_mask`` is a boolean ``(H, W)`` raster, True inside the retinal disc.
    """

    pixels: np.ndarray
    fov_mask: np.ndarray
    range_tag: str = "unit"

    def __post_init__(self):
        _range_of(self.range_tag)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise FormatError(f"expected (H, W, 3) pixels, got shape {self.pixels.shape}")
        if self.fov_mask.shape != self.pixels.shape[:2]:
            raise FormatError(
                f"mask shape {self.fov_mask.shape} does not match pixels {self.pixels.shape[:2]}"
            )
        self.fov_mask = self.fov_mask.astype(bool, copy=False)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape[:2]

    @property
    def range_min(self) -> float:
        return _range_of(self.range_tag)[0]

    def masked(self) -> "FundusImage":
        px = self.pixels.copy()
        px[~self.fov_mask] = self.range_min
        return replace(self, pixels=px)

    def to_range(self, tag: str) -> "FundusImage":
        if tag == self.range_tag:
            return self
        _range_of(tag)
        if tag == "signed":
            px = self.pixels * 2.0 - 1.0
        else:
            px = (self.pixels + 1.0) * 0.5
        return FundusImage(px.astype(np.float32), self.fov_mask.copy(), tag).masked()

    def check(self) -> "FundusImage":
        """Assert the range and mask invariants; returns self for chaining."""
        lo, hi = _range_of(self.range_tag)
        if self.pixels.min() < lo or self.pixels.max() > hi:
            raise RangeError(
                f"pixels span [{self.pixels.min():.4g}, {self.pixels.max():.4g}], "
                f"outside {self.range_tag} range [{lo}, {hi}]"
            )
        if np.any(self.pixels[~self.fov_mask] != lo):
            raise RangeError("pixels outside the field-of-view mask are not at the range minimum")
        return self

    def disc(self) -> Tuple[float, float, float]:
        """Return ``(cy, cx, radius)`` of the disc, radius from the mask area."""
        return disc_geometry(self.fov_mask)


def disc_geometry(mask: np.ndarray) -> Tuple[float, float, float]:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        h, w = mask.shape
        return (h - 1) / 2, (w - 1) / 2, min(h, w) / 2
    return float(ys.mean()), float(xs.mean()), float(np.sqrt(ys.size / np.pi))


def _to_unit(raw: np.ndarray) -> np.ndarray:
    if raw.dtype == np.uint8:
        return raw.astype(np.float32) / 255.0
    if raw.dtype == np.uint16:
        return raw.astype(np.float32) / 65535.0
    return raw.astype(np.float32)


def estimate_fov_mask(img: np.ndarray, threshold: float = FOV_THRESHOLD) -> np.ndarray:
    """Locate the bright retinal disc against the black camera surround.

    Pixels whose channel mean exceeds ``threshold`` (unit scale; integer
    inputs are rescaled first) are labelled, the largest connected component
    kept, closed with a 5x5 square and hole-filled.

    Raises:
        DegenerateInputError: no pixel exceeds the threshold.
    """
    a = np.asarray(img)
    if a.size == 0:
        raise DegenerateInputError("empty image")
    a = _to_unit(a)
    lum = a.mean(axis=2) if a.ndim == 3 else a
    bright = lum > threshold
    if not bright.any():
        raise DegenerateInputError("no fundus disc found")
    labels, n = ndimage.label(bright, structure=np.ones((3, 3)))
    if n > 1:
        sizes = ndimage.sum_labels(bright, labels, index=np.arange(1, n + 1))
        bright = labels == (int(np.argmax(sizes)) + 1)
    # edge padding keeps the closing from eroding discs that touch the frame
    p = 5
    padded = np.pad(bright, p, mode="edge")
    closed = ndimage.binary_closing(padded, structure=np.ones((5, 5)))[p:-p, p:-p]
    return ndimage.binary_fill_holes(closed)


def load_image(path, target_range: str = "unit") -> FundusImage:
    """Read an 8- or 16-bit RGB PNG/JPEG into a masked :class:`FundusImage`."""
    lo, _ = _range_of(target_range)
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise ImageReadError(f"cannot read {path}: no such file")
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageReadError(f"cannot decode image {path}")
    channels = 1 if raw.ndim == 2 else raw.shape[2]
    if channels != 3:
        raise FormatError(f"{path}: expected 3 channels (RGB), found {channels}")
    if raw.dtype not in (np.uint8, np.uint16):
        raise FormatError(f"{path}: unsupported bit depth {raw.dtype}")
    unit = _to_unit(raw[..., ::-1])
    mask = estimate_fov_mask(unit)
    img = FundusImage(np.ascontiguousarray(unit), mask, "unit").masked()
    return img.to_range(target_range)


def save_image(path, unit_pixels: np.ndarray) -> None:
    """Write a unit-range ``(H, W, 3)`` raster as an 8-bit PNG."""
    u8 = np.round(np.clip(unit_pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(os.fspath(path), np.ascontiguousarray(u8[..., ::-1])):
        raise ImageReadError(f"failed to write {path}")


def save_mask(path, mask: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(os.fspath(path), mask.astype(np.uint8) * 255):
        raise ImageReadError(f"failed to write {path}")


def list_corpus(input_dir, manifest=None) -> List[str]:
    """Relative paths of the corpus images, sorted.

    With a manifest (one relative path per line, ``#`` comments allowed) the
    listed order is kept; otherwise the directory is walked for PNG/JPEG files,
    skipping ``*_mask.png`` sidecars.
    """
    root = Path(input_dir)
    if manifest is not None:
        lines = Path(manifest).read_text().splitlines()
        return [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
    if not root.is_dir():
        raise ImageReadError(f"{root} is not a directory")
    out = []
    for p in root.rglob("*"):
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES and not p.name.endswith(MASK_SUFFIX):
            out.append(p.relative_to(root).as_posix())
    return sorted(out)


def mask_path_for(image_path) -> Path:
    p = Path(image_path)
    return p.with_name(p.stem + MASK_SUFFIX)


def prepare_dataset(input_dir, output_dir, manifest=None) -> List[str]:
    """Mirror the corpus into ``output_dir`` with a mask PNG next to each image."""
    rels = list_corpus(input_dir, manifest)
    for rel in rels:
        src = Path(input_dir) / rel
        dst = Path(output_dir) / rel
        dst.parent.mkdir(parents=True, exist_ok=True)
        shutil.copy2(src, dst)
        save_mask(mask_path_for(dst), load_image(src).fov_mask)
    return rels


@dataclass(frozen=True)
class AugmentationConfig:
    scale_choices: Tuple[int, ...] = (286, 306, 326, 346)
    crop_size: int = 256
    horizontal_flip: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "scale_choices", tuple(int(s) for s in self.scale_choices))
        if not self.scale_choices:
            raise ConfigError("scale_choices must not be empty")
        if self.crop_size > min(self.scale_choices):
            raise ConfigError(
                f"crop_size {self.crop_size} exceeds the smallest scale {min(self.scale_choices)}"
            )
        if not 0.0 <= self.horizontal_flip <= 1.0:
            raise ConfigError("horizontal_flip is a probability in [0, 1]")

    def validate_depth(self, layers: int) -> None:
        step = 2**layers
        if self.crop_size % step:
            raise ConfigError(f"crop_size {self.crop_size} not divisible by {step} (2^{layers})")


@dataclass(frozen=True)
class CropParams:
    scale: int
    top: int
    left: int
    flip: bool
    resized_shape: Tuple[int, int]


def _scaled_shape(h, w, short_side):
    f = short_side / min(h, w)
    return max(short_side, int(round(h * f))), max(short_side, int(round(w * f)))


def draw_crop_params(shape: Sequence[int], cfg: AugmentationConfig, seed: int) -> CropParams:
    """Sample the scale, crop offset and flip for an image of ``shape``."""
    rng = np.random.default_rng(seed)
    scale = int(cfg.scale_choices[rng.integers(len(cfg.scale_choices))])
    if cfg.crop_size > scale:
        raise ConfigError(f"crop_size {cfg.crop_size} exceeds drawn scale {scale}")
    rh, rw = _scaled_shape(shape[0], shape[1], scale)
    top = int(rng.integers(rh - cfg.crop_size + 1))
    left = int(rng.integers(rw - cfg.crop_size + 1))
    flip = bool(rng.random() < cfg.horizontal_flip)
    return CropParams(scale, top, left, flip, (rh, rw))


def resize(img: FundusImage, shape: Tuple[int, int]) -> FundusImage:
    """Bilinear resize of pixels (half-pixel centers), nearest for the mask."""
    h, w = shape
    if (h, w) == img.shape:
        return img
    px = cv2.resize(img.pixels, (w, h), interpolation=cv2.INTER_LINEAR)
    mask = cv2.resize(img.fov_mask.astype(np.uint8), (w, h), interpolation=cv2.INTER_NEAREST)
    return FundusImage(px.astype(np.float32), mask.astype(bool), img.range_tag).masked()


def resize_square(img: FundusImage, side: int) -> FundusImage:
    """Resize the shorter side to ``side`` and center-crop a square."""
    h, w = img.shape
    rh, rw = _scaled_shape(h, w, side)
    out = resize(img, (rh, rw))
    top, left = (rh - side) // 2, (rw - side) // 2
    return crop(out, top, left, side)


def crop(img: FundusImage, top: int, left: int, size: int) -> FundusImage:
    sl = (slice(top, top + size), slice(left, left + size))
    return FundusImage(img.pixels[sl].copy(), img.fov_mask[sl].copy(), img.range_tag)


def random_scale_crop(img: FundusImage, cfg: AugmentationConfig, seed: int) -> FundusImage:
    """Resize the shorter side to a random scale choice and cut a random square."""
    p = draw_crop_params(img.shape, cfg, seed)
    out = crop(resize(img, p.resized_shape), p.top, p.left, cfg.crop_size)
    if p.flip:
        out = FundusImage(out.pixels[:, ::-1].copy(), out.fov_mask[:, ::-1].copy(), out.range_tag)
    return out.masked()
