import dataclasses

import pytest
import torch

from gfenet.errors import CheckpointError, ConfigError, ConsistencyError, ShapeError
from gfenet.frequency import GaussianKernelSpec
from gfenet.network import GFENet, NetworkConfig, config_hash, load_checkpoint, save_checkpoint
from gfenet.training import loss_cyc, loss_e, loss_r


@pytest.fixture(scope="module")
def full_net():
    torch.manual_seed(0)
    return GFENet(NetworkConfig())


def test_default_encoder_sides(full_net):
    with torch.no_grad():
        b = full_net.encode(torch.randn(1, 3, 256, 256))
    assert [f.shape[-1] for f in b.encoder_feats] == [128, 64, 32, 16, 8, 4, 2, 1]
    assert [f.shape[1] for f in b.encoder_feats] == list(full_net.cfg.enc_channels)


def test_encoder_sides_at_512(full_net):
    full_net.eval()
    with torch.no_grad():
        b = full_net.encode(torch.randn(1, 3, 512, 512))
    full_net.train()
    assert [f.shape[-1] for f in b.encoder_feats] == [256, 128, 64, 32, 16, 8, 4, 2]


def test_indivisible_side_rejected(full_net):
    with pytest.raises(ShapeError, match="250 not divisible by 256"):
        full_net.encode(torch.randn(1, 3, 250, 250))


@pytest.mark.parametrize("cfg", [NetworkConfig(), NetworkConfig.toy(L=4, width=8)], ids=["L8", "L4"])
def test_layer_input_channels(cfg):
    torch.manual_seed(0)
    net = GFENet(cfg)
    side = cfg.divisor
    with torch.no_grad():
        hfm, enh, b = net(torch.randn(2, 3, side, side), return_features=True)
    L = cfg.L
    assert [f.shape[1] for f in b.repr_feats] == cfg.repr_in_channels()
    assert [f.shape[1] for f in b.enh_feats] == cfg.enh_in_channels()
    assert cfg.repr_in_channels()[1] == cfg.dec_channels[0] + cfg.enc_channels[L - 2]
    assert cfg.enh_in_channels()[1] == 2 * cfg.dec_channels[0]
    for l in range(1, L + 1):
        side_in = side >> (L - l + 1)
        assert b.repr_feats[l - 1].shape[-1] == side_in
        assert b.enh_feats[l - 1].shape[-1] == side_in
    # each layer input is the concatenation of the previous outputs it names
    for l in range(2, L + 1):
        dr = b.repr_outputs[l - 2]
        assert torch.equal(b.repr_feats[l - 1][:, : dr.shape[1]], dr)
        assert torch.equal(b.repr_feats[l - 1][:, dr.shape[1]:], b.encoder_feats[L - l])
        assert torch.equal(b.enh_feats[l - 1][:, dr.shape[1]:], dr)
    assert torch.equal(b.repr_feats[0], b.encoder_feats[-1])
    assert torch.equal(b.enh_feats[0], b.encoder_feats[-1])
    assert hfm.shape == enh.shape == (2, 3, side, side)


def test_output_range_and_scale_invariance(toy_cfg):
    net = GFENet(toy_cfg)
    for side in (16, 32, 48):
        x = torch.randn(1, 3, side, side) * 10
        with torch.no_grad():
            hfm, enh = net(x)
        assert hfm.shape == enh.shape == x.shape
        assert hfm.abs().max() <= 1 and enh.abs().max() <= 1


def test_stale_features_rejected(toy_cfg):
    net = GFENet(toy_cfg)
    x = torch.randn(1, 3, 16, 16)
    a, b = net.encode(x), net.encode(x)
    with pytest.raises(ConsistencyError):
        net.decode_enhance(a)
    net.decode_repr(a)
    stale = dataclasses.replace(b, repr_feats=a.repr_feats, repr_outputs=a.repr_outputs,
                                repr_pass_id=a.repr_pass_id)
    with pytest.raises(ConsistencyError):
        net.decode_enhance(stale)


def test_config_validation():
    with pytest.raises(ConfigError):
        NetworkConfig(L=3, enc_channels=(8, 8), dec_channels=(8, 8))
    with pytest.raises(ConfigError):
        NetworkConfig(L=2, enc_channels=(8, 8), dec_channels=(8, 8))
    with pytest.raises(ConfigError):
        NetworkConfig.toy(input_mode="rgb")


def _losses(net, x, clear, kernel):
    hfm, enh = net(x)
    from gfenet.frequency import highpass
    return loss_r(hfm, highpass(clear, kernel)), loss_e(enh, clear), loss_cyc(enh, hfm, kernel)


def _grads(net, loss):
    net.zero_grad(set_to_none=True)
    loss.backward(retain_graph=True)
    return {n: (p.grad.abs().sum().item() if p.grad is not None else 0.0) for n, p in net.named_parameters()}


def test_every_parameter_receives_gradient(toy_cfg):
    torch.manual_seed(1)
    net = GFENet(toy_cfg)
    k = GaussianKernelSpec(2, 1.0)
    x, clear = torch.randn(4, 3, 32, 32), torch.rand(4, 3, 32, 32) * 2 - 1
    g = _grads(net, sum(_losses(net, x, clear, k)))
    assert all(v > 0 for v in g.values()), [n for n, v in g.items() if v == 0]


def test_encoder_shared_by_both_heads(toy_cfg):
    torch.manual_seed(2)
    net = GFENet(toy_cfg)
    k = GaussianKernelSpec(2, 1.0)
    x, clear = torch.randn(4, 3, 32, 32), torch.rand(4, 3, 32, 32) * 2 - 1
    l_r, l_e, _ = _losses(net, x, clear, k)
    for loss in (l_r, l_e):
        g = _grads(net, loss)
        enc = {n: v for n, v in g.items() if n.startswith("encoder.")}
        assert enc and all(v > 0 for v in enc.values())
    ids = [id(p) for p in net.parameters()]
    assert len(ids) == len(set(ids))
    groups = net.parameter_groups()
    assert sum(1 for g in groups.values() for _ in g.parameters()) == len(ids)


def test_weight_init_statistics():
    torch.manual_seed(0)
    net = GFENet(NetworkConfig())
    w = net.encoder[3][0].weight.detach()
    assert abs(w.mean().item()) < 1e-3 and w.std().item() == pytest.approx(0.02, rel=0.05)
    bn = net.encoder[3][2]
    assert bn.weight.detach().mean().item() == pytest.approx(1.0, abs=0.01)
    assert torch.count_nonzero(bn.bias) == 0
    # no normalization on the first and bottleneck layers
    assert len(net.encoder[0]) == 2 and len(net.encoder[-1]) == 2


def test_input_modes():
    for mode in ("hfm", "concat"):
        net = GFENet(NetworkConfig.toy(input_mode=mode), GaussianKernelSpec(10, 5.0))
        hfm, enh = net(torch.randn(1, 3, 32, 32))
        assert enh.shape == (1, 3, 32, 32)
    assert GFENet(NetworkConfig.toy(input_mode="concat")).encoder[0][0].in_channels == 6


def test_checkpoint_round_trip(tmp_path, toy_cfg):
    net = GFENet(toy_cfg, GaussianKernelSpec(3, 1.5))
    path = save_checkpoint(tmp_path / "m.pt", net, {"epoch": 3}, {"epoch": 3, "global_step": 12})
    model, state, meta = load_checkpoint(path)
    assert meta["config_hash"] == config_hash(toy_cfg, GaussianKernelSpec(3, 1.5))
    assert meta["L"] == 4 and meta["global_step"] == 12 and state["epoch"] == 3
    x = torch.randn(1, 3, 16, 16)
    net.eval(), model.eval()
    with torch.no_grad():
        assert torch.equal(net(x)[1], model(x)[1])
    load_checkpoint(path, toy_cfg, GaussianKernelSpec(3, 1.5))


def test_checkpoint_hash_mismatch_refused(tmp_path, toy_cfg):
    path = save_checkpoint(tmp_path / "m.pt", GFENet(toy_cfg))
    other = NetworkConfig.toy(L=4, width=8, leaky_slope=0.1)
    with pytest.raises(CheckpointError, match="config hash"):
        load_checkpoint(path, other)
    model, _, _ = load_checkpoint(path, other, force=True)
    assert model.cfg == other


def test_corrupted_checkpoint(tmp_path, toy_cfg):
    path = save_checkpoint(tmp_path / "m.pt", GFENet(toy_cfg))
    path.write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.pt")
