"""GFE-Net: shared encoder, representation decoder and coupled enhancement decoder.

The encoder has ``L`` stride-2 down layers. Both decoders have ``L`` up
layers; the last one is the output layer (ReLU, transposed conv to 3
channels, Tanh). The representation decoder takes U-Net skips from the
encoder; the enhancement decoder instead takes the representation decoder's
layer outputs, so it sees the encoder only through the bottleneck.
"""

import hashlib
import itertools
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import torch
import torch.nn as nn

from .errors import CheckpointError, ConfigError, ConsistencyError, ShapeError
from .frequency import GaussianKernelSpec, highpass

INPUT_MODES = {"image": 3, "hfm": 3, "concat": 6}


@dataclass(frozen=True)
class NetworkConfig:
    """Layer count and widths.

    ``dec_channels`` holds the widths of the ``L - 1`` hidden up layers; the
    ``L``-th up layer is the output layer and emits ``out_channels``.
    """

    L: int = 8
    enc_channels: Tuple[int, ...] = (64, 128, 256, 512, 512, 512, 512, 512)
    dec_channels: Tuple[int, ...] = (512, 512, 512, 512, 256, 128, 64)
    out_channels: int = 3
    leaky_slope: float = 0.2
    input_mode: str = "image"

    def __post_init__(self):
        object.__setattr__(self, "enc_channels", tuple(int(c) for c in self.enc_channels))
        object.__setattr__(self, "dec_channels", tuple(int(c) for c in self.dec_channels))
        if self.L < 1:
            raise ConfigError(f"L must be >= 1, got {self.L}")
        if len(self.enc_channels) != self.L:
            raise ConfigError(f"enc_channels has {len(self.enc_channels)} entries, expected L={self.L}")
        if len(self.dec_channels) != self.L - 1:
            raise ConfigError(
                f"dec_channels has {len(self.dec_channels)} entries, expected L-1={self.L - 1} "
                "(the L-th up layer is the output layer)"
            )
        if self.input_mode not in INPUT_MODES:
            raise ConfigError(f"input_mode must be one of {sorted(INPUT_MODES)}, got {self.input_mode!r}")

    @property
    def in_channels(self) -> int:
        return INPUT_MODES[self.input_mode]

    @property
    def divisor(self) -> int:
        return 2**self.L

    @classmethod
    def toy(cls, L: int = 4, width: int = 8, **kw) -> "NetworkConfig":
        """Small config for tests: widths double up to ``4 * width``."""
        enc = tuple(min(width * 2**i, width * 4) for i in range(L))
        return cls(L=L, enc_channels=enc, dec_channels=tuple(reversed(enc[:-1])), **kw)

    def repr_in_channels(self) -> List[int]:
        """Input channels of D_R layers 1..L: ``[D_R^{l-1} output, f^{L-l+1}]``."""
        out = [self.enc_channels[-1]]
        for l in range(2, self.L + 1):
            out.append(self.dec_channels[l - 2] + self.enc_channels[self.L - l])
        return out

    def enh_in_channels(self) -> List[int]:
        """Input channels of D_E layers 1..L: ``[D_E^{l-1} output, D_R^{l-1} output]``."""
        out = [self.enc_channels[-1]]
        for l in range(2, self.L + 1):
            out.append(2 * self.dec_channels[l - 2])
        return out


def down_layer(cin, cout, slope, norm):
    layers = [nn.Conv2d(cin, cout, 4, 2, 1), nn.LeakyReLU(slope)]
    if norm:
        layers.append(nn.BatchNorm2d(cout))
    return nn.Sequential(*layers)


def up_layer(cin, cout):
    return nn.Sequential(nn.ConvTranspose2d(cin, cout, 4, 2, 1), nn.ReLU(), nn.BatchNorm2d(cout))


def output_layer(cin, cout):
    return nn.Sequential(nn.ReLU(), nn.ConvTranspose2d(cin, cout, 4, 2, 1), nn.Tanh())


def _decoder(in_channels, cfg):
    layers = [up_layer(cin, cout) for cin, cout in zip(in_channels[:-1], cfg.dec_channels)]
    layers.append(output_layer(in_channels[-1], cfg.out_channels))
    return nn.ModuleList(layers)


_pass_counter = itertools.count(1)


@dataclass
class FeatureBundle:
    """Per-pass features.

    ``encoder_feats[l-1]`` is f^l; ``repr_feats[l-1]`` and ``enh_feats[l-1]``
    are the *inputs* of decoder layer l; ``repr_outputs[l-1]`` is the output
    of D_R layer l (the last one is the HFM head).
    """

    encoder_feats: List[torch.Tensor]
    pass_id: int
    repr_feats: List[torch.Tensor] = field(default_factory=list)
    repr_outputs: List[torch.Tensor] = field(default_factory=list)
    repr_pass_id: Optional[int] = None
    enh_feats: List[torch.Tensor] = field(default_factory=list)


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, std)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.normal_(m.weight, 1.0, std)
            nn.init.zeros_(m.bias)


class GFENet(nn.Module):
    def __init__(self, cfg: Optional[NetworkConfig] = None, kernel: Optional[GaussianKernelSpec] = None):
        super().__init__()
        self.cfg = cfg = cfg or NetworkConfig()
        self.kernel = kernel or GaussianKernelSpec()
        cins = (cfg.in_channels,) + cfg.enc_channels[:-1]
        # no normalization on the first layer or the 1x1 bottleneck
        self.encoder = nn.ModuleList(
            down_layer(cin, cout, cfg.leaky_slope, norm=0 < i < cfg.L - 1)
            for i, (cin, cout) in enumerate(zip(cins, cfg.enc_channels))
        )
        self.repr_decoder = _decoder(cfg.repr_in_channels(), cfg)
        self.enh_decoder = _decoder(cfg.enh_in_channels(), cfg)
        init_weights(self)

    def _prepare_input(self, x):
        if self.cfg.input_mode == "image":
            return x
        hfm = highpass(x, self.kernel.scaled(x.shape[-1]))
        return hfm if self.cfg.input_mode == "hfm" else torch.cat([x, hfm], dim=1)

    def encode(self, x: torch.Tensor) -> FeatureBundle:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected a (B, 3, H, W) batch, got {tuple(x.shape)}")
        d = self.cfg.divisor
        for side in x.shape[-2:]:
            if side % d:
                raise ShapeError(f"input side {side} not divisible by {d} (2^{self.cfg.L})")
        h = self._prepare_input(x)
        feats = []
        for layer in self.encoder:
            h = layer(h)
            feats.append(h)
        return FeatureBundle(feats, next(_pass_counter))

    def decode_repr(self, bundle: FeatureBundle) -> torch.Tensor:
        enc = bundle.encoder_feats
        L = self.cfg.L
        if len(enc) != L:
            raise ShapeError(f"expected {L} encoder features, got {len(enc)}")
        inputs, outputs = [], []
        h = enc[-1]
        for l, layer in enumerate(self.repr_decoder, start=1):
            if l > 1:
                h = torch.cat([outputs[-1], enc[L - l]], dim=1)
            expected = layer[0].in_channels if l < L else layer[1].in_channels
            if h.shape[1] != expected:
                raise ShapeError(f"D_R layer {l}: got {h.shape[1]} input channels, expected {expected}")
            inputs.append(h)
            outputs.append(layer(h))
        bundle.repr_feats, bundle.repr_outputs, bundle.repr_pass_id = inputs, outputs, bundle.pass_id
        return outputs[-1]

    def decode_enhance(self, bundle: FeatureBundle) -> torch.Tensor:
        if bundle.repr_pass_id is None:
            raise ConsistencyError("decode_enhance needs decode_repr to run on this bundle first")
        if bundle.repr_pass_id != bundle.pass_id:
            raise ConsistencyError(
                f"representation features come from pass {bundle.repr_pass_id}, "
                f"encoder features from pass {bundle.pass_id}"
            )
        r_out = bundle.repr_outputs
        inputs, h, prev = [], bundle.encoder_feats[-1], None
        for l, layer in enumerate(self.enh_decoder, start=1):
            if l > 1:
                h = torch.cat([prev, r_out[l - 2]], dim=1)
            inputs.append(h)
            prev = layer(h)
        bundle.enh_feats = inputs
        return prev

    def forward(self, x: torch.Tensor, return_features: bool = False):
        """One pass through both heads: ``(hfm_out, enhanced)``, each ``(B, 3, H, W)``."""
        bundle = self.encode(x)
        hfm = self.decode_repr(bundle)
        enhanced = self.decode_enhance(bundle)
        if return_features:
            return hfm, enhanced, bundle
        return hfm, enhanced

    def parameter_groups(self):
        return {"encoder": self.encoder, "repr_decoder": self.repr_decoder, "enh_decoder": self.enh_decoder}


def config_hash(cfg: NetworkConfig, kernel: GaussianKernelSpec) -> str:
    doc = {"network": asdict(cfg), "kernel": asdict(kernel)}
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def save_checkpoint(path, model: GFENet, extra_state: Optional[dict] = None, meta: Optional[dict] = None) -> Path:
    """Write ``path`` (torch state) and ``path.json`` (metadata sidecar)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {"model": model.state_dict(), **(extra_state or {})}
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(state, tmp)
    os.replace(tmp, path)
    sidecar = {
        "config_hash": config_hash(model.cfg, model.kernel),
        "L": model.cfg.L,
        "network": asdict(model.cfg),
        "kernel": asdict(model.kernel),
        **(meta or {}),
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def read_checkpoint_meta(path) -> dict:
    side = Path(str(path) + ".json")
    try:
        return json.loads(side.read_text())
    except (OSError, ValueError) as e:
        raise CheckpointError(f"cannot read checkpoint metadata {side}: {e}") from None


def load_checkpoint(path, cfg: Optional[NetworkConfig] = None, kernel: Optional[GaussianKernelSpec] = None,
                    force: bool = False, map_location="cpu"):
    """Rebuild the model from a checkpoint; returns ``(model, state, meta)``.

    With ``cfg`` given, a config-hash mismatch is refused unless ``force``.
    """
    meta = read_checkpoint_meta(path)
    try:
        saved_cfg = NetworkConfig(**meta["network"])
        saved_kernel = GaussianKernelSpec(**meta["kernel"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"malformed checkpoint metadata for {path}: {e}") from None
    if cfg is not None:
        kernel = kernel or saved_kernel
        if config_hash(cfg, kernel) != meta.get("config_hash") and not force:
            raise CheckpointError(
                f"checkpoint {path} was trained with config hash {meta.get('config_hash', '?')[:12]}, "
                f"runtime config hashes to {config_hash(cfg, kernel)[:12]}"
            )
    try:
        state = torch.load(path, map_location=map_location, weights_only=True)
        model = GFENet(cfg if (cfg is not None and force) else saved_cfg, kernel or saved_kernel)
        model.load_state_dict(state["model"])
    except Exception as e:
        raise CheckpointError(f"cannot load checkpoint {path}: {e}") from None
    return model, state, meta
