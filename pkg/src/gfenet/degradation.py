"""Seeded synthesis of degraded views from a clear fundus image.

A :class:`DegradationSpec` is a fully parameterized, ordered list of
operators; applying it involves no randomness, so a spec serialized to a
manifest record replays the view bit-exactly. Randomness lives only in
:func:`sample_spec`.
"""

import json
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import cv2
import numpy as np
from scipy import ndimage

from .data import FundusImage, disc_geometry, load_image
from .errors import ConfigError, MissingDonorError, RangeError

REFERENCE_SIDE = 256


@dataclass(frozen=True)
class IlluminationJitter:
    alpha: float
    beta: float
    gamma: float

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")

    def apply(self, px, ctx):
        return self.alpha * np.power(px, self.gamma) + self.beta


@dataclass(frozen=True)
class LightSpot:
    """Additive Gaussian blob; ``cx, cy`` are offsets in disc radii."""

    cx: float
    cy: float
    radius: float
    strength: float

    def apply(self, px, ctx):
        cy, cx, r_disc = ctx.disc
        yy, xx = ctx.grid
        d2 = (yy - (cy + self.cy * r_disc)) ** 2 + (xx - (cx + self.cx * r_disc)) ** 2
        s = self.radius * r_disc
        return px + (self.strength * np.exp(-d2 / (2.0 * s * s)))[..., None]


@dataclass(frozen=True)
class Vignette:
    strength: float
    exponent: float

    def apply(self, px, ctx):
        cy, cx, r_disc = ctx.disc
        yy, xx = ctx.grid
        d = np.hypot(yy - cy, xx - cx) / r_disc
        gain = np.clip(1.0 - self.strength * d**self.exponent, 0.0, None)
        return px * gain[..., None]


@dataclass(frozen=True)
class DefocusBlur:
    """Gaussian blur; ``sigma`` is in pixels at 256 resolution."""

    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError(f"blur sigma must be >= 0, got {self.sigma}")

    def apply(self, px, ctx):
        return _blur(px, self.sigma * ctx.scale)


@dataclass(frozen=True)
class CataractVeil:
    """``t * blur(x) + (1 - t) * veil_luminance``."""

    t: float
    veil_luminance: float
    veil_sigma: float

    def __post_init__(self):
        if not 0.0 < self.t <= 1.0:
            raise ConfigError(f"transmission t must lie in (0, 1], got {self.t}")
        if self.veil_sigma < 0:
            raise ConfigError(f"veil sigma must be >= 0, got {self.veil_sigma}")

    def apply(self, px, ctx):
        return self.t * _blur(px, self.veil_sigma * ctx.scale) + (1.0 - self.t) * self.veil_luminance


@dataclass(frozen=True)
class StyleMix:
    """Blend the low-frequency amplitude spectrum with a donor image's."""

    donor: str
    lam: float
    cutoff: float

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"StyleMix lam must lie in [0, 1], got {self.lam}")
        if not 0.0 < self.cutoff <= 1.0:
            raise ConfigError(f"StyleMix cutoff must lie in (0, 1], got {self.cutoff}")

    def apply(self, px, ctx):
        if ctx.donors is None or self.donor not in ctx.donors:
            raise MissingDonorError(f"StyleMix donor {self.donor!r} is not in the donor pool")
        donor = ctx.donors[self.donor]
        dpx = donor.pixels if isinstance(donor, FundusImage) else np.asarray(donor)
        h, w = px.shape[:2]
        if dpx.shape[:2] != (h, w):
            dpx = cv2.resize(dpx.astype(np.float32), (w, h), interpolation=cv2.INTER_LINEAR)
        return amplitude_mix(px, dpx.astype(np.float64), self.lam, self.cutoff)


OPS = {cls.__name__: cls for cls in (IlluminationJitter, LightSpot, Vignette, DefocusBlur, CataractVeil, StyleMix)}


def _blur(px, sigma):
    if sigma <= 0:
        return px
    return ndimage.gaussian_filter(px, sigma=(sigma, sigma, 0), mode="reflect")


def amplitude_mix(own: np.ndarray, donor: np.ndarray, lam: float, cutoff: float) -> np.ndarray:
    """Swap-in ``lam`` of the donor's centered low-frequency amplitudes, keep own phase."""
    h, w = own.shape[:2]
    f_own = np.fft.fftshift(np.fft.fft2(own, axes=(0, 1)), axes=(0, 1))
    f_don = np.fft.fftshift(np.fft.fft2(donor, axes=(0, 1)), axes=(0, 1))
    amp, pha = np.abs(f_own), np.angle(f_own)
    side = max(1, int(round(cutoff * min(h, w))))
    t, l = h // 2 - side // 2, w // 2 - side // 2
    sl = (slice(t, t + side), slice(l, l + side))
    amp[sl] = (1.0 - lam) * amp[sl] + lam * np.abs(f_don)[sl]
    mixed = np.fft.ifftshift(amp * np.exp(1j * pha), axes=(0, 1))
    return np.real(np.fft.ifft2(mixed, axes=(0, 1)))


@dataclass
class _Context:
    disc: Tuple[float, float, float]
    grid: Tuple[np.ndarray, np.ndarray]
    scale: float
    donors: Optional[Mapping]


@dataclass(frozen=True)
class DegradationSpec:
    view_index: int
    seed: int
    ops: Tuple = ()

    def to_record(self) -> dict:
        return {
            "v": self.view_index,
            "seed": self.seed,
            "ops": [{"op": type(op).__name__, **asdict(op)} for op in self.ops],
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "DegradationSpec":
        ops = []
        for item in rec["ops"]:
            item = dict(item)
            name = item.pop("op")
            if name not in OPS:
                raise ConfigError(f"unknown degradation op {name!r}")
            ops.append(OPS[name](**item))
        return cls(int(rec["v"]), int(rec["seed"]), tuple(ops))

    def signature(self) -> Tuple[str, ...]:
        return tuple(type(op).__name__ for op in self.ops)


def apply_degradation(x: FundusImage, spec: DegradationSpec, donors: Optional[Mapping] = None) -> FundusImage:
    """Apply ``spec.ops`` in order inside the field-of-view mask.

    The output is clipped to [0, 1] after every operator and the background
    is held at 0, so the mask is never moved.
    """
    if x.range_tag != "unit":
        raise RangeError("degradations operate on unit-range images")
    h, w = x.shape
    cy, cx, r = disc_geometry(x.fov_mask)
    ctx = _Context((cy, cx, r), np.mgrid[0:h, 0:w].astype(np.float64), min(h, w) / REFERENCE_SIDE, donors)
    px = x.pixels.astype(np.float64)
    outside = ~x.fov_mask
    for op in spec.ops:
        px = np.clip(op.apply(px, ctx), 0.0, 1.0)
        px[outside] = 0.0
    return FundusImage(px.astype(np.float32), x.fov_mask.copy(), "unit")


@dataclass(frozen=True)
class OpPolicy:
    """Inclusion probability plus per-parameter ``[lo, hi]`` ranges or choice lists."""

    probability: float
    ranges: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    choices: Dict[str, Tuple[float, ...]] = field(default_factory=dict)


def _default_ops():
    return {
        "StyleMix": OpPolicy(0.3, {"lam": (0.1, 1.0), "cutoff": (0.03, 0.1)}),
        "IlluminationJitter": OpPolicy(0.8, {"alpha": (0.5, 1.5), "beta": (-0.2, 0.2), "gamma": (0.6, 1.7)}),
        "LightSpot": OpPolicy(0.3, {"cx": (-0.6, 0.6), "cy": (-0.6, 0.6), "radius": (0.05, 0.25), "strength": (0.1, 0.5)}),
        "Vignette": OpPolicy(0.4, {"strength": (0.2, 0.8)}, {"exponent": (2, 3, 4)}),
        "DefocusBlur": OpPolicy(0.5, {"sigma": (1.0, 4.0)}),
        "CataractVeil": OpPolicy(0.5, {"t": (0.5, 0.95), "veil_luminance": (0.6, 0.95), "veil_sigma": (2.0, 6.0)}),
    }


@dataclass(frozen=True)
class DegradationPolicy:
    ops: Dict[str, OpPolicy] = field(default_factory=_default_ops)
    max_spots: int = 2

    def __post_init__(self):
        for name, p in self.ops.items():
            if name not in OPS:
                raise ConfigError(f"unknown degradation op {name!r} in policy")
            if not 0.0 <= p.probability <= 1.0:
                raise ConfigError(f"{name}: probability {p.probability} outside [0, 1]")
            for key, (lo, hi) in p.ranges.items():
                if lo > hi:
                    raise ConfigError(f"{name}.{key}: range [{lo}, {hi}] is empty")
        if self.max_spots < 1:
            raise ConfigError("max_spots must be >= 1")

    @classmethod
    def only(cls, name: str, **ranges) -> "DegradationPolicy":
        """A policy that always draws exactly ``name``, optionally narrowing ranges."""
        base = _default_ops()[name]
        merged = {**base.ranges, **{k: tuple(v) for k, v in ranges.items()}}
        return cls({name: OpPolicy(1.0, merged, base.choices)})

    def to_dict(self) -> dict:
        return {
            "max_spots": self.max_spots,
            "ops": {
                name: {"probability": p.probability,
                       "ranges": {k: list(v) for k, v in p.ranges.items()},
                       "choices": {k: list(v) for k, v in p.choices.items()}}
                for name, p in self.ops.items()
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DegradationPolicy":
        unknown = set(d) - {"ops", "max_spots"}
        if unknown:
            raise ConfigError(f"unknown policy keys: {sorted(unknown)}")
        defaults = _default_ops()
        ops = {}
        for name, od in d.get("ops", {}).items():
            if name not in OPS:
                raise ConfigError(f"unknown degradation op {name!r} in policy")
            base = defaults[name]
            ops[name] = OpPolicy(
                float(od.get("probability", base.probability)),
                {**base.ranges, **{k: tuple(v) for k, v in od.get("ranges", {}).items()}},
                {**base.choices, **{k: tuple(v) for k, v in od.get("choices", {}).items()}},
            )
        return cls(ops if "ops" in d else defaults, int(d.get("max_spots", 2)))

    @classmethod
    def load(cls, path) -> "DegradationPolicy":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _draw_params(rng, name, p: OpPolicy, donors):
    kw = {}
    for f in fields(OPS[name]):
        if f.name == "donor":
            kw["donor"] = donors[int(rng.integers(len(donors)))]
        elif f.name in p.choices:
            opts = p.choices[f.name]
            kw[f.name] = float(opts[int(rng.integers(len(opts)))])
        else:
            lo, hi = p.ranges[f.name]
            kw[f.name] = float(rng.uniform(lo, hi))
    return OPS[name](**kw)


def sample_spec(rng_seed: int, policy: Optional[DegradationPolicy] = None, donors: Sequence[str] = (),
                view_index: int = 0) -> DegradationSpec:
    """Draw a spec: each op included independently, then shuffled, StyleMix first.

    StyleMix cannot be drawn without donors. An empty draw is redrawn from the
    same generator, so the result is a pure function of the arguments.
    """
    policy = policy or DegradationPolicy()
    donors = list(donors)
    live = {n: p for n, p in policy.ops.items()
            if p.probability > 0 and (n != "StyleMix" or donors)}
    if not live:
        raise ConfigError("degradation policy cannot produce any op (all inclusion probabilities are 0)")
    rng = np.random.default_rng(rng_seed)
    while True:
        drawn = []
        for name in OPS:
            if name not in policy.ops:
                continue
            p = policy.ops[name]
            if not rng.random() < p.probability or name not in live:
                continue
            count = int(rng.integers(1, policy.max_spots + 1)) if name == "LightSpot" else 1
            drawn.extend(_draw_params(rng, name, p, donors) for _ in range(count))
        if drawn:
            break
    order = rng.permutation(len(drawn))
    ops = [drawn[i] for i in order]
    ops.sort(key=lambda op: not isinstance(op, StyleMix))
    return DegradationSpec(view_index, int(rng_seed), tuple(ops))


@dataclass
class ViewSet:
    source: FundusImage
    views: List[Tuple[DegradationSpec, FundusImage]]

    def __len__(self):
        return len(self.views)


def synthesize_view_set(x: FundusImage, V: int, base_seed: int, policy: Optional[DegradationPolicy] = None,
                        donors: Optional[Mapping] = None) -> ViewSet:
    """Views ``v = 1..V``, view ``v`` drawn with seed ``base_seed + v``."""
    if V < 1:
        raise ConfigError(f"views per image must be >= 1, got {V}")
    donor_ids = sorted(donors) if donors else []
    views = []
    for v in range(1, V + 1):
        spec = sample_spec(base_seed + v, policy, donor_ids, view_index=v)
        views.append((spec, apply_degradation(x, spec, donors)))
    return ViewSet(x, views)


class DonorPool(Mapping):
    """Lazily loaded donor images keyed by corpus-relative path."""

    def __init__(self, root, rels: Sequence[str], exclude: Sequence[str] = ()):
        self.root = Path(root)
        self._ids = sorted(set(rels) - set(exclude))
        self._load = lru_cache(maxsize=64)(lambda rel: load_image(self.root / rel))

    def __getitem__(self, key):
        if key not in self._ids:
            raise MissingDonorError(f"StyleMix donor {key!r} is not in the donor pool")
        return self._load(key)

    def __iter__(self):
        return iter(self._ids)

    def __len__(self):
        return len(self._ids)

    def excluding(self, rel: str) -> "DonorPool":
        pool = DonorPool.__new__(DonorPool)
        pool.root, pool._load = self.root, self._load
        pool._ids = [i for i in self._ids if i != rel]
        return pool


def read_manifest(path) -> List[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def replay_record(rec: Mapping, input_dir, donors: Optional[Mapping] = None) -> FundusImage:
    """Re-apply a manifest record to its source image."""
    src = load_image(Path(input_dir) / rec["source"])
    return apply_degradation(src, DegradationSpec.from_record(rec), donors)
