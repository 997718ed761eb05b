import json

import pytest

from gfenet.config import DEFAULTS, parse_and_validate
from gfenet.errors import ConfigError


def test_empty_config_is_defaults(tmp_path):
    (tmp_path / "c.json").write_text("{}")
    a = parse_and_validate(tmp_path / "c.json")
    b = parse_and_validate()
    assert a.config_hash == b.config_hash
    assert a.train.batch_size == 8 and a.augmentation.crop_size == 256 and a.network.L == 8
    assert a.kernel.radius == 10 and a.kernel.sigma == 5.0


def test_crop_divisibility_message():
    with pytest.raises(ConfigError, match="250 not divisible by 256"):
        parse_and_validate(document={"crop_size": 250})


def test_unknown_key_suggests_nearest():
    with pytest.raises(ConfigError, match="'batch_sise'.*'batch_size'"):
        parse_and_validate(document={"batch_sise": 4})


def test_hash_stable_under_key_order(tmp_path):
    doc = {"lr_init": 0.002, "views_per_image": 2, "seed": 9, "w_cyc": 0.5, "kernel_sigma": 4.0}
    permuted = dict(reversed(list(doc.items())))
    (tmp_path / "a.json").write_text(json.dumps(doc))
    (tmp_path / "b.json").write_text(json.dumps(permuted))
    ha = parse_and_validate(tmp_path / "a.json").config_hash
    hb = parse_and_validate(tmp_path / "b.json").config_hash
    assert ha == hb
    assert ha != parse_and_validate().config_hash


def test_overrides_beat_file(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"seed": 1, "out_dir": "x"}))
    cfg = parse_and_validate(tmp_path / "c.json", {"seed": 2, "out_dir": None})
    assert cfg.train.seed == 2 and cfg.out_dir == "x"
    # locations do not enter the hash
    assert cfg.config_hash == parse_and_validate(document={"seed": 2}).config_hash


def test_cross_field_rules():
    with pytest.raises(ConfigError):
        parse_and_validate(document={"views_per_image": 0})
    with pytest.raises(ConfigError, match="does not fit"):
        parse_and_validate(document={"crop_size": 16, "scale_choices": [16], "L": 4, "kernel_radius": 200})
    cfg = parse_and_validate(document={"L": 4, "crop_size": 64, "scale_choices": [64]})
    assert cfg.network.enc_channels == (64, 128, 256, 512)
    assert cfg.network.dec_channels == (256, 128, 64)


def test_policy_from_file(tmp_path):
    (tmp_path / "p.json").write_text(json.dumps({"ops": {"Vignette": {"probability": 1.0}}}))
    cfg = parse_and_validate(document={"policy": str(tmp_path / "p.json")})
    assert list(cfg.policy.ops) == ["Vignette"]


def test_defaults_cover_every_module():
    for key in ("batch_size", "scale_choices", "kernel_radius", "enc_channels", "policy", "deterministic"):
        assert key in DEFAULTS
