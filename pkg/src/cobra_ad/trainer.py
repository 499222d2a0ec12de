"""Adversarial contrastive training loop.

Per step: craft one pseudo-anomaly per normal image, take two light views of
the combined batch, attack the combined loss with PGD, then update encoder,
projection head and anomaly head with the adversarial images acting as a
third positive view.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .attacks import AttackConfig, pgd_training_attack
from .augment import LightViewSpec, TransformSpec, apply_light_view
from .crafter import CrafterConfig, CraftLog, ThresholdModel, craft_batch, fit_crafter
from .losses import PairBatch, cls_loss, cobra_loss, nt_xent, opposite_mass
from .nets import CobraNet, ModelConfig, save_checkpoint
from .seeding import stream_seed

log = logging.getLogger(__name__)

STATE_FILE = "train_state.ckpt"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    optimizer: str = "sgd_momentum"
    lr: float = 0.1
    warmup_epochs: int = 10
    weight_decay: float = 1e-6
    momentum: float = 0.9
    attack: AttackConfig = field(default_factory=AttackConfig)
    temperature: float = 0.5
    cls_weight: float = 1.0
    opposite_weight: float = 1.0
    eps_num: float = 1e-8
    max_craft_iters: int = 10
    grad_clip: float | None = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.attack, dict):
            self.attack = AttackConfig(**self.attack)
        if self.optimizer not in ("sgd_momentum", "lars"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive or None")


class LARS(torch.optim.Optimizer):
    """SGD with momentum and layer-wise trust ratio; biases and norms skip adaptation."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0, eta=1e-3):
        super().__init__(params, dict(lr=lr, momentum=momentum, weight_decay=weight_decay, eta=eta))

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad
                if p.ndim > 1:
                    g = g.add(p, alpha=group["weight_decay"])
                    w_norm, g_norm = p.norm(), g.norm()
                    if w_norm > 0 and g_norm > 0:
                        g = g.mul(group["eta"] * w_norm / g_norm)
                buf = self.state[p].get("momentum_buffer")
                if buf is None:
                    buf = self.state[p]["momentum_buffer"] = g.clone()
                else:
                    buf.mul_(group["momentum"]).add_(g)
                p.add_(buf, alpha=-group["lr"])


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "lars":
        return LARS(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``cfg.lr`` then cosine decay without restarts."""
    total = max(cfg.epochs * steps_per_epoch, 1)
    warm = min(cfg.warmup_epochs * steps_per_epoch, total)
    if step < warm:
        return cfg.lr * (step + 1) / warm
    if total == warm:
        return cfg.lr
    progress = (step - warm) / (total - warm)
    return 0.5 * cfg.lr * (1 + math.cos(math.pi * progress))


@dataclass
class PairImages:
    """Images for one step: ``x`` is normals followed by their crafted opposites."""

    x: torch.Tensor
    view1: torch.Tensor
    view2: torch.Tensor
    opposite: np.ndarray
    labels: torch.Tensor
    craft_logs: list[CraftLog]


def make_pair_batch(b_normal: torch.Tensor, tm: ThresholdModel, bank: Sequence[TransformSpec], seed: int,
                    light: LightViewSpec | None = None, max_iters: int = 10) -> PairImages:
    b = len(b_normal)
    crafted, logs = craft_batch(b_normal, tm, bank, stream_seed(seed, "craft"), max_iters, return_logs=True)
    x = torch.cat([b_normal, crafted])
    base = asdict(light or LightViewSpec())
    v1 = apply_light_view(x, LightViewSpec(**{**base, "seed": stream_seed(seed, "views", 0)}))
    v2 = apply_light_view(x, LightViewSpec(**{**base, "seed": stream_seed(seed, "views", 1)}))
    opposite = np.r_[np.arange(b) + b, np.arange(b)]
    labels = torch.cat([torch.zeros(b), torch.ones(b)])
    return PairImages(x, v1, v2, opposite, labels, logs)


def _attack_objective(model: CobraNet, z1: torch.Tensor, z2: torch.Tensor, opposite: np.ndarray,
                      labels: torch.Tensor, cfg: TrainConfig) -> Callable[[torch.Tensor], torch.Tensor]:
    z_opp = z1[opposite]

    def objective(x_adv):
        out = model(x_adv)
        pb = PairBatch(z1, z2, z_opp=z_opp, z_adv=out.z, t=cfg.temperature)
        return (cobra_loss(pb, cfg.opposite_weight, cfg.eps_num, reduction="mean")
                + cfg.cls_weight * cls_loss(out.p_anom, labels))

    return objective


def train_step(model: CobraNet, optimizer: torch.optim.Optimizer, batch: PairImages, cfg: TrainConfig,
               seed: int = 0) -> dict:
    """One min-max update. Returns loss components and the gradient norm."""
    model.train()
    n = len(batch.x)
    with torch.no_grad():
        z1c = model(batch.view1).z
        z2c = model(batch.view2).z
    objective = _attack_objective(model, z1c, z2c, batch.opposite, batch.labels, cfg)
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        x_adv = pgd_training_attack(objective, batch.x, cfg.attack, seed=stream_seed(seed, "attack"))
    finally:
        for p in model.parameters():
            p.requires_grad_(True)

    out = model(torch.cat([batch.x, batch.view1, batch.view2, x_adv]))
    z_x, z1, z2, z_adv = out.z.split(n)
    p_x, _, _, p_adv = out.p_anom.split(n)
    pb = PairBatch(z1, z2, z_opp=z1[batch.opposite], z_adv=z_adv, t=cfg.temperature)
    contrastive = cobra_loss(pb, cfg.opposite_weight, cfg.eps_num, reduction="mean")
    p_all = torch.cat([p_x, p_adv])
    y_all = torch.cat([batch.labels, batch.labels])
    loss = contrastive + cfg.cls_weight * cls_loss(p_all, y_all)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()}")
    optimizer.zero_grad()
    loss.backward()
    # the clamped numerator can produce very large gradients near collapse; the norm is logged before clipping
    grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip or math.inf)
    optimizer.step()
    with torch.no_grad():
        return {
            "loss": loss.item(),
            "cobra": contrastive.item(),
            "nt_xent": nt_xent(pb, reduction="mean").item(),
            "opposite_mass": opposite_mass(pb).item(),
            "cls_acc": ((p_all > 0.5).float() == y_all).float().mean().item(),
            "grad_norm": grad_norm.item(),
            "adv_linf": (x_adv - batch.x).abs().max().item(),
        }


@dataclass
class FitResult:
    model: CobraNet
    threshold: ThresholdModel
    log: list[dict]


def _batches(n: int, b: int, perm: np.ndarray):
    for s in range(0, n, b):
        yield perm[s:s + b]


def fit(d_train: torch.Tensor, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
        bank: Sequence[TransformSpec] | None = None, crafter_cfg: CrafterConfig | None = None,
        threshold: ThresholdModel | None = None, light: LightViewSpec | None = None,
        out_dir=None, resume: bool = False, on_record: Callable[[dict], None] | None = None,
        max_steps: int | None = None) -> FitResult:
    """Train on an unlabeled normal set.

    Fits the crafter first unless ``threshold`` is given. With ``out_dir`` a
    resumable state is written after every epoch. ``max_steps`` stops early
    (used to test resumption).
    """
    from .augment import default_bank

    d_train = torch.as_tensor(d_train).float()
    if d_train.ndim != 4 or len(d_train) == 0:
        raise ValueError("d_train must be a non-empty (N, C, H, W) image batch")
    bank = list(bank) if bank is not None else default_bank()
    model_cfg = model_cfg or ModelConfig(input_shape=tuple(d_train.shape[1:]))
    crafter_cfg = crafter_cfg or CrafterConfig()
    root = cfg.seed
    if threshold is None:
        threshold = fit_crafter(d_train, bank, crafter_cfg, seed=stream_seed(root, "crafter"))

    torch.manual_seed(stream_seed(root, "init"))
    model = CobraNet(model_cfg)
    optimizer = make_optimizer(model, cfg)
    n = len(d_train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    records: list[dict] = []
    start_epoch = 0
    out = Path(out_dir) if out_dir else None
    if resume and out and (out / STATE_FILE).exists():
        state = torch.load(out / STATE_FILE, map_location="cpu", weights_only=False)
        model.load_state_dict(state["model"])
        optimizer.load_state_dict(state["optimizer"])
        records = state["log"]
        start_epoch = state["epoch"] + 1
        log.info("resuming from epoch %d", start_epoch)

    global_step = start_epoch * steps_per_epoch
    for epoch in range(start_epoch, cfg.epochs):
        perm = np.random.default_rng(stream_seed(root, "data", epoch)).permutation(n)
        for step, idx in enumerate(_batches(n, cfg.batch_size, perm)):
            if max_steps is not None and global_step >= max_steps:
                return FitResult(model, threshold, records)
            lr = lr_at(global_step, steps_per_epoch, cfg)
            for g in optimizer.param_groups:
                g["lr"] = lr
            step_seed = stream_seed(root, "step", epoch, step)
            batch = make_pair_batch(d_train[idx], threshold, bank, step_seed, light, cfg.max_craft_iters)
            try:
                stats = train_step(model, optimizer, batch, cfg, seed=step_seed)
            except TrainingError as e:
                hint = f"; last good state: {out / STATE_FILE}" if out and (out / STATE_FILE).exists() else ""
                raise TrainingError(f"epoch {epoch} step {step}: {e}{hint}") from e
            if stats["adv_linf"] > cfg.attack.epsilon + 1e-6 and cfg.attack.norm == "linf":
                raise TrainingError(f"adversarial views exceed the budget: {stats['adv_linf']}")
            rec = {"epoch": epoch, "step": step, "global_step": global_step, "lr": lr,
                   "fallback": sum(lg.fallback_used for lg in batch.craft_logs), **stats}
            records.append(rec)
            if on_record:
                on_record(rec)
            global_step += 1
        ep_recs = [r for r in records if r["epoch"] == epoch]
        log.info("epoch %d loss %.4f cls_acc %.3f", epoch, np.mean([r["loss"] for r in ep_recs]),
                 np.mean([r["cls_acc"] for r in ep_recs]))
        if out:
            out.mkdir(parents=True, exist_ok=True)
            snapshot = {"train": _cfg_dict(cfg), "model": asdict(model_cfg)}
            torch.save({"model": model.state_dict(), "optimizer": optimizer.state_dict(), "epoch": epoch,
                        "log": records, "config": snapshot}, out / (STATE_FILE + ".tmp"))
            (out / (STATE_FILE + ".tmp")).replace(out / STATE_FILE)
            save_checkpoint(model, out / "model.ckpt", extra={"config": snapshot, "epoch": epoch})
    model.eval()
    return FitResult(model, threshold, records)


def _cfg_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    return json.loads(json.dumps(d))
