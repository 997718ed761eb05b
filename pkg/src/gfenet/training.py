"""Losses, learning-rate schedule and the training loop.

Objective per batch: ``w_r * L_R + w_e * L_E + w_cyc * L_cyc`` where

* ``L_R``   L1 between the HFM head and the high-pass of the clear image,
* ``L_E``   L1 between the enhanced head and the clear image,
* ``L_cyc`` L1 between the high-pass of the enhanced head and the HFM head.

Per-view L1 means are summed over the views of a sample and averaged over
the batch.
"""

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .data import AugmentationConfig, FundusImage, random_scale_crop, resize_square
from .degradation import DegradationPolicy, synthesize_view_set
from .errors import ConfigError, NonFiniteLossError, ScheduleError, ShapeError
from .frequency import GaussianKernelSpec, highpass
from .network import GFENet, NetworkConfig, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

CSV_COLUMNS = ("epoch", "step", "l_r", "l_e", "l_cyc", "l_total", "lr")
VIEW_MODES = ("on_the_fly", "fixed")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    lr_init: float = 0.001
    epochs_flat: int = 150
    epochs_decay: int = 50
    beta1: float = 0.5
    beta2: float = 0.999
    views_per_image: int = 1
    w_r: float = 1.0
    w_e: float = 1.0
    w_cyc: float = 1.0
    use_hfm: bool = True
    view_mode: str = "on_the_fly"
    loss_in_mask: bool = False
    clip_grad_norm: Optional[float] = None
    checkpoint_every: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "epochs_flat", "epochs_decay", "views_per_image", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive count, got {getattr(self, name)}")
        for name in ("w_r", "w_e", "w_cyc"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be >= 0")
        if not self.lr_init > 0:
            raise ConfigError("lr_init must be > 0")
        if self.view_mode not in VIEW_MODES:
            raise ConfigError(f"view_mode must be one of {VIEW_MODES}, got {self.view_mode!r}")

    @property
    def epochs(self) -> int:
        return self.epochs_flat + self.epochs_decay

    @property
    def weights(self) -> Tuple[float, float, float]:
        return self.w_r, self.w_e, self.w_cyc


@dataclass
class LossBundle:
    l_r: float
    l_e: float
    l_cyc: float
    l_total: float

    def as_row(self):
        return [self.l_r, self.l_e, self.l_cyc, self.l_total]


def _l1(pred, target, mask=None):
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    diff = (pred - target).abs()
    if pred.dim() < 5:
        if mask is None:
            return diff.mean()
        m = mask.expand_as(diff)
        return (diff * m).sum() / m.sum().clamp_min(1)
    # (B, V, C, H, W): per-view mean, summed over views, averaged over batch
    if mask is None:
        per_view = diff.flatten(2).mean(-1)
    else:
        m = mask.expand_as(diff).flatten(2)
        per_view = (diff.flatten(2) * m).sum(-1) / m.sum(-1).clamp_min(1)
    return per_view.sum(1).mean()


def loss_r(hfm_pred, hfm_target, mask=None):
    """HFM reconstruction loss."""
    return _l1(hfm_pred, hfm_target, mask)


def loss_e(enhanced, clear, mask=None):
    """Enhancement loss against the clear image."""
    return _l1(enhanced, clear, mask)


def loss_cyc(enhanced, hfm_pred, kernel: Optional[GaussianKernelSpec], mask=None):
    """Cycle loss ``|highpass(enhanced) - hfm_pred|``; ``kernel=None`` means identity filter."""
    if enhanced.shape != hfm_pred.shape:
        raise ShapeError(f"shape mismatch: {tuple(enhanced.shape)} vs {tuple(hfm_pred.shape)}")
    if kernel is None:
        filtered = enhanced
    else:
        flat = enhanced.reshape(-1, *enhanced.shape[-3:])
        filtered = highpass(flat, kernel).reshape(enhanced.shape)
    return _l1(filtered, hfm_pred, mask)


def loss_total(l_r, l_e, l_cyc, weights=(1.0, 1.0, 1.0)):
    w_r, w_e, w_cyc = weights
    return w_r * l_r + w_e * l_e + w_cyc * l_cyc


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Constant for ``epochs_flat`` epochs, then linear per-epoch decay to 0."""
    if not 0 <= epoch < cfg.epochs:
        raise ScheduleError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.epochs_flat:
        return cfg.lr_init
    return cfg.lr_init * (1.0 - (epoch - cfg.epochs_flat + 1) / cfg.epochs_decay)


@dataclass
class Batch:
    """Signed-range tensors: clear ``(B,3,H,W)``, views ``(B,V,3,H,W)``,
    hfm_targets ``(B,3,H,W)``, mask ``(B,1,H,W)``."""

    clear: torch.Tensor
    views: torch.Tensor
    hfm_targets: torch.Tensor
    mask: torch.Tensor

    def to(self, device):
        return Batch(*(t.to(device) for t in (self.clear, self.views, self.hfm_targets, self.mask)))


def hfm_target(clear_signed: torch.Tensor, kernel: GaussianKernelSpec, use_hfm: bool = True) -> torch.Tensor:
    """Supervision for the HFM head; the clear image itself when ``use_hfm`` is off."""
    return highpass(clear_signed, kernel) if use_hfm else clear_signed.clone()


def effective_kernel(kernel: GaussianKernelSpec, side: int) -> GaussianKernelSpec:
    return kernel.scaled(side)


def compute_losses(model: GFENet, batch: Batch, cfg: TrainConfig, kernel: GaussianKernelSpec):
    """Forward both heads and return the four loss tensors ``(l_r, l_e, l_cyc, l_total)``."""
    b, v = batch.views.shape[:2]
    hfm, enh = model(batch.views.flatten(0, 1))
    hfm = hfm.reshape(b, v, *hfm.shape[1:])
    enh = enh.reshape(b, v, *enh.shape[1:])
    mask = batch.mask[:, None] if cfg.loss_in_mask else None
    target = batch.hfm_targets[:, None].expand_as(hfm)
    clear = batch.clear[:, None].expand_as(enh)
    k = effective_kernel(kernel, batch.views.shape[-1]) if cfg.use_hfm else None
    l_r = loss_r(hfm, target, mask)
    l_e = loss_e(enh, clear, mask)
    l_cyc = loss_cyc(enh, hfm, k, mask)
    return l_r, l_e, l_cyc, loss_total(l_r, l_e, l_cyc, cfg.weights)


@dataclass
class TrainState:
    model: GFENet
    optimizer: torch.optim.Optimizer
    step: int = 0
    epoch: int = 0


def make_optimizer(model, cfg: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=cfg.lr_init, betas=(cfg.beta1, cfg.beta2))


def grad_norms(model: GFENet) -> Dict[str, float]:
    out = {}
    for name, group in model.parameter_groups().items():
        sq = sum(float(p.grad.detach().double().pow(2).sum()) for p in group.parameters() if p.grad is not None)
        out[name] = math.sqrt(sq)
    return out


def train_step(batch: Batch, state: TrainState, cfg: TrainConfig, kernel: GaussianKernelSpec) -> LossBundle:
    """One forward, one backward of the weighted total, one optimizer step."""
    model, opt = state.model, state.optimizer
    model.train()
    opt.zero_grad(set_to_none=True)
    l_r, l_e, l_cyc, total = compute_losses(model, batch, cfg, kernel)
    terms = {k: float(t.detach()) for k, t in zip(("l_r", "l_e", "l_cyc", "l_total"), (l_r, l_e, l_cyc, total))}
    if not all(math.isfinite(t) for t in terms.values()):
        raise NonFiniteLossError(f"non-finite loss at step {state.step}: {terms}", terms, grad_norms(model))
    total.backward()
    norms = grad_norms(model)
    if not all(math.isfinite(n) for n in norms.values()):
        raise NonFiniteLossError(f"non-finite gradients at step {state.step}: {norms}", terms, norms)
    if cfg.clip_grad_norm:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_grad_norm)
    opt.step()
    state.step += 1
    return LossBundle(**terms)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


def _to_signed_tensor(img: FundusImage) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.pixels.transpose(2, 0, 1)) * 2.0 - 1.0)


class ViewSource:
    """Produces per-sample (clear crop, V degraded views) deterministically.

    ``fixed`` mode resizes each image to ``crop_size`` once and synthesizes its
    views once; ``on_the_fly`` redraws the crop and the views every epoch from
    seeds derived from ``(seed, epoch, index)``.
    """

    def __init__(self, images: Sequence[Tuple[str, FundusImage]], cfg: TrainConfig,
                 aug: AugmentationConfig, policy: Optional[DegradationPolicy] = None):
        if not images:
            raise ConfigError("training corpus is empty")
        self.ids = [i for i, _ in images]
        self.images = [im for _, im in images]
        self.cfg, self.aug = cfg, aug
        self.policy = policy or DegradationPolicy()
        self._fixed = {}

    def __len__(self):
        return len(self.images)

    def _donors(self, idx, clear_side):
        return {d: im for j, (d, im) in enumerate(zip(self.ids, self.images)) if j != idx}

    def sample(self, idx: int, epoch: int):
        if self.cfg.view_mode == "fixed":
            if idx not in self._fixed:
                clear = resize_square(self.images[idx], self.aug.crop_size)
                vs = synthesize_view_set(clear, self.cfg.views_per_image, derive_seed(self.cfg.seed, idx),
                                         self.policy, self._donors(idx, self.aug.crop_size))
                self._fixed[idx] = (clear, [v for _, v in vs.views])
            return self._fixed[idx]
        clear = random_scale_crop(self.images[idx], self.aug, derive_seed(self.cfg.seed, epoch, idx, 1))
        vs = synthesize_view_set(clear, self.cfg.views_per_image, derive_seed(self.cfg.seed, epoch, idx, 2),
                                 self.policy, self._donors(idx, self.aug.crop_size))
        return clear, [v for _, v in vs.views]

    def batches(self, epoch: int, kernel: GaussianKernelSpec):
        order = np.random.default_rng(derive_seed(self.cfg.seed, epoch, 0)).permutation(len(self))
        bs = self.cfg.batch_size
        for start in range(0, len(order), bs):
            yield self.make_batch(order[start:start + bs], epoch, kernel)

    def make_batch(self, indices, epoch: int, kernel: GaussianKernelSpec) -> Batch:
        clears, views, masks = [], [], []
        for idx in indices:
            clear, vs = self.sample(int(idx), epoch)
            clears.append(_to_signed_tensor(clear))
            views.append(torch.stack([_to_signed_tensor(v) for v in vs]))
            masks.append(torch.from_numpy(clear.fov_mask[None].astype(np.float32)))
        clear_t = torch.stack(clears)
        target = hfm_target(clear_t, effective_kernel(kernel, clear_t.shape[-1]), self.cfg.use_hfm)
        return Batch(clear_t, torch.stack(views), target, torch.stack(masks))


def _write_rows(csv_path: Path, rows: List[list], keep_before_epoch: Optional[int] = None):
    if keep_before_epoch is not None and csv_path.exists():
        with open(csv_path, newline="") as fh:
            old = [r for r in csv.reader(fh)][1:]
        rows = [r for r in old if int(r[0]) < keep_before_epoch] + rows
        mode = "w"
    else:
        mode = "a" if csv_path.exists() else "w"
    with open(csv_path, mode, newline="") as fh:
        w = csv.writer(fh)
        if mode == "w":
            w.writerow(CSV_COLUMNS)
        w.writerows(rows)


def _fmt_row(epoch, step, bundle: LossBundle, lr):
    return [epoch, step] + [repr(v) for v in bundle.as_row()] + [repr(lr)]


def set_deterministic(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def run_training(images: Sequence[Tuple[str, FundusImage]], cfg: TrainConfig, out_dir,
                 net_cfg: Optional[NetworkConfig] = None, aug: Optional[AugmentationConfig] = None,
                 kernel: Optional[GaussianKernelSpec] = None, policy: Optional[DegradationPolicy] = None,
                 resume=None, device: str = "cpu", deterministic: bool = False,
                 meta: Optional[dict] = None) -> Path:
    """Train over the corpus and return the path of the final checkpoint.

    Writes ``loss.csv`` (one row per step), ``ckpt_epochNNNN.pt`` every
    ``checkpoint_every`` epochs, and ``latest.pt`` after every checkpointed
    epoch and at the end.
    """
    net_cfg = net_cfg or NetworkConfig()
    aug = aug or AugmentationConfig()
    kernel = kernel or GaussianKernelSpec()
    aug.validate_depth(net_cfg.L)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    source = ViewSource(images, cfg, aug, policy)

    if deterministic:
        set_deterministic(cfg.seed)
    else:
        torch.manual_seed(cfg.seed)
    model = GFENet(net_cfg, kernel).to(device)
    opt = make_optimizer(model, cfg)
    state = TrainState(model, opt)
    csv_path = out_dir / "loss.csv"
    truncate_at = 0
    if resume is not None:
        loaded, ckpt, _ = load_checkpoint(resume, net_cfg, kernel, map_location=device)
        model.load_state_dict(loaded.state_dict())
        opt.load_state_dict(ckpt["optimizer"])
        state.epoch, state.step = int(ckpt["epoch"]), int(ckpt["step"])
        truncate_at = state.epoch
        log.info("resumed from %s at epoch %d step %d", resume, state.epoch, state.step)

    base_meta = {"train": asdict(cfg), "augmentation": asdict(aug), "seeds": {"train": cfg.seed},
                 **(meta or {})}

    def checkpoint(path):
        return save_checkpoint(
            path, model, {"optimizer": opt.state_dict(), "epoch": state.epoch, "step": state.step},
            {**base_meta, "epoch": state.epoch, "global_step": state.step},
        )

    first_write = True
    for epoch in range(state.epoch, cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        rows = []
        for batch in source.batches(epoch, kernel):
            bundle = train_step(batch.to(device), state, cfg, kernel)
            rows.append(_fmt_row(epoch, state.step, bundle, lr))
        state.epoch = epoch + 1
        try:
            _write_rows(csv_path, rows, truncate_at if first_write else None)
        except OSError:
            checkpoint(out_dir / "latest.pt")
            raise
        first_write = False
        log.info("epoch %d lr %.6g l_total %s", epoch, lr, rows[-1][5] if rows else "-")
        if state.epoch % cfg.checkpoint_every == 0 or state.epoch == cfg.epochs:
            checkpoint(out_dir / f"ckpt_epoch{state.epoch:04d}.pt")
            checkpoint(out_dir / "latest.pt")
    if first_write:
        checkpoint(out_dir / "latest.pt")
    return out_dir / "latest.pt"


def read_loss_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
