"""Flat JSON run configuration: defaults, overrides, validation and hashing."""

import difflib
import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Optional

from .data import AugmentationConfig
from .degradation import DegradationPolicy
from .errors import ConfigError
from .frequency import GaussianKernelSpec
from .network import NetworkConfig
from .training import TrainConfig

# keys that locate a run rather than define it; excluded from the hash
LOCATION_KEYS = ("data_dir", "out_dir", "manifest", "device")

_TRAIN_KEYS = [f.name for f in fields(TrainConfig)]
_AUG_KEYS = ["scale_choices", "crop_size", "horizontal_flip"]
_NET_KEYS = ["L", "enc_channels", "dec_channels", "input_mode", "leaky_slope"]
_KERNEL_KEYS = {"kernel_radius": "radius", "kernel_sigma": "sigma"}


def _defaults() -> dict:
    d = asdict(TrainConfig())
    d.update({k: v for k, v in asdict(AugmentationConfig()).items()})
    d["scale_choices"] = list(d["scale_choices"])
    net = NetworkConfig()
    d.update({k: getattr(net, k) for k in _NET_KEYS})
    d["enc_channels"], d["dec_channels"] = list(net.enc_channels), list(net.dec_channels)
    k = GaussianKernelSpec()
    d.update({"kernel_radius": k.radius, "kernel_sigma": k.sigma})
    d["policy"] = DegradationPolicy().to_dict()
    d.update({"data_dir": None, "out_dir": None, "manifest": None,
              "device": os.environ.get("GFE_DEVICE", "cpu"), "deterministic": False})
    return d


DEFAULTS = _defaults()


@dataclass
class RunConfig:
    train: TrainConfig
    augmentation: AugmentationConfig
    network: NetworkConfig
    kernel: GaussianKernelSpec
    policy: DegradationPolicy
    values: dict
    config_hash: str

    def __getattr__(self, name):
        values = self.__dict__.get("values", {})
        if name in values:
            return values[name]
        raise AttributeError(name)

    def to_dict(self) -> dict:
        return dict(self.values)

    def dump(self, path, **extra) -> Path:
        doc = {"config": self.values, "config_hash": self.config_hash, **extra}
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True))
        return path


def normalized_hash(values: Mapping[str, Any]) -> str:
    """sha256 of the key-sorted, compact JSON of the non-location keys."""
    doc = {k: v for k, v in values.items() if k not in LOCATION_KEYS}
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _check_keys(doc: Mapping, source: str):
    for key in doc:
        if key not in DEFAULTS:
            near = difflib.get_close_matches(key, list(DEFAULTS), n=1)
            hint = f"; did you mean {near[0]!r}?" if near else ""
            raise ConfigError(f"unknown config key {key!r} in {source}{hint}")


def load_config_file(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except ValueError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return doc


def parse_and_validate(config_path=None, overrides: Optional[Mapping[str, Any]] = None,
                       document: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Merge defaults < config file (or ``document``) < overrides and validate.

    Setting ``L`` alone derives channel lists from the first ``L`` default
    encoder widths, mirrored for the decoder.
    """
    file_doc = dict(document or {})
    if config_path is not None:
        file_doc.update(load_config_file(config_path))
    _check_keys(file_doc, str(config_path or "config"))
    over = {k: v for k, v in (overrides or {}).items() if v is not None}
    _check_keys(over, "command-line overrides")
    given = {**file_doc, **over}
    values = {**DEFAULTS, **given}

    if isinstance(values["policy"], str):
        values["policy"] = DegradationPolicy.load(values["policy"]).to_dict()
    if "L" in given and "enc_channels" not in given:
        values["enc_channels"] = DEFAULTS["enc_channels"][: values["L"]]
    if "L" in given and "dec_channels" not in given:
        values["dec_channels"] = list(reversed(values["enc_channels"][:-1]))

    try:
        train = TrainConfig(**{k: values[k] for k in _TRAIN_KEYS})
        aug = AugmentationConfig(**{k: values[k] for k in _AUG_KEYS})
        net = NetworkConfig(**{k: values[k] for k in _NET_KEYS})
        kernel = GaussianKernelSpec(**{v: values[k] for k, v in _KERNEL_KEYS.items()})
        policy = DegradationPolicy.from_dict(values["policy"])
    except TypeError as e:
        raise ConfigError(f"invalid config value: {e}") from None

    aug.validate_depth(net.L)
    eff = kernel.scaled(aug.crop_size)
    if eff.size > aug.crop_size:
        raise ConfigError(
            f"Gaussian kernel of {eff.size} px (scaled for crop {aug.crop_size}) does not fit the crop"
        )
    values["policy"] = policy.to_dict()
    values["scale_choices"] = list(aug.scale_choices)
    values["enc_channels"], values["dec_channels"] = list(net.enc_channels), list(net.dec_channels)
    return RunConfig(train, aug, net, kernel, policy, values, normalized_hash(values))
