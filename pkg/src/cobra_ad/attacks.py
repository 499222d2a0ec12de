"""L-inf / L2 bounded attacks: training-time PGD and score-targeted attacks.

Score attacks follow the signed update ``x <- x + y * alpha * sign(grad A)``
with ``y = +1`` for normal samples (push the anomaly score up) and ``y = -1``
for anomalies (push it down).
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch

log = logging.getLogger(__name__)

ScoreFn = Callable[[torch.Tensor], torch.Tensor]


class AttackError(RuntimeError):
    pass


@dataclass
class AttackConfig:
    epsilon: float = 4 / 255
    alpha: float | None = None
    steps: int = 10
    restarts: int = 1
    norm: str = "linf"
    random_init: bool = True

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.alpha is None:
            self.alpha = min(2.5 * self.epsilon / self.steps, self.epsilon)
        if self.norm == "linf" and self.epsilon > 0 and not 0 < self.alpha <= self.epsilon + 1e-12:
            raise ValueError("linf attacks need 0 < alpha <= epsilon")

    def to_dict(self):
        return asdict(self)


def _project(x_adv: torch.Tensor, x: torch.Tensor, eps: float, norm: str) -> torch.Tensor:
    delta = x_adv - x
    if norm == "linf":
        delta = delta.clamp(-eps, eps)
    else:
        n = delta.flatten(1).norm(dim=1).clamp_min(1e-12)
        delta = delta * (eps / n).clamp(max=1.0).view(-1, *[1] * (x.ndim - 1))
    return (x + delta).clamp(0, 1)


def _step(grad: torch.Tensor, alpha: float, norm: str) -> torch.Tensor:
    if norm == "linf":
        return alpha * grad.sign()  # sign(0) = 0 leaves flat coordinates alone
    n = grad.flatten(1).norm(dim=1).clamp_min(1e-12)
    return alpha * grad / n.view(-1, *[1] * (grad.ndim - 1))


def _random_start(x: torch.Tensor, eps: float, norm: str, gen: torch.Generator) -> torch.Tensor:
    if norm == "linf":
        noise = (torch.rand(x.shape, generator=gen, dtype=x.dtype) * 2 - 1) * eps
    else:
        d = torch.randn(x.shape, generator=gen, dtype=x.dtype)
        d = d / d.flatten(1).norm(dim=1).clamp_min(1e-12).view(-1, *[1] * (x.ndim - 1))
        r = torch.rand(x.shape[0], generator=gen, dtype=x.dtype) ** (1.0 / x[0].numel())
        noise = d * (r * eps).view(-1, *[1] * (x.ndim - 1))
    return _project(x + noise, x, eps, norm)


def _grad(objective: Callable[[torch.Tensor], torch.Tensor], x_adv: torch.Tensor):
    x_adv = x_adv.detach().requires_grad_(True)
    with torch.enable_grad():
        value = objective(x_adv)
        grad, = torch.autograd.grad(value.sum(), x_adv)
    if not torch.isfinite(grad).all():
        raise AttackError("non-finite gradient during attack")
    return value.detach(), grad.detach()


def _keep_better(best_x, best_val, cand, val):
    val = val.detach().double()
    better = val > best_val
    best_x[better] = cand[better]
    return torch.where(better, val, best_val)


def pgd_maximize(objective: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, cfg: AttackConfig,
                 seed: int = 0, track_best: bool = True) -> torch.Tensor:
    """Projected gradient ascent on ``objective`` (per-sample values, summed for the gradient).

    With ``track_best`` the returned point for each sample is the iterate with
    the highest objective over all restarts and steps (initial points excluded).
    """
    x = x.detach()
    if cfg.epsilon == 0:
        return x.clone()
    best_x = x.clone()
    best_val = torch.full((x.shape[0],), -math.inf, dtype=torch.float64)
    for r in range(cfg.restarts):
        gen = torch.Generator().manual_seed((int(seed) * 1009 + r) % (1 << 63))
        x_adv = _random_start(x, cfg.epsilon, cfg.norm, gen) if cfg.random_init else x.clone()
        for s in range(cfg.steps):
            val, g = _grad(objective, x_adv)
            if s > 0 and track_best:
                best_val = _keep_better(best_x, best_val, x_adv, val)
            x_adv = _project(x_adv + _step(g, cfg.alpha, cfg.norm), x, cfg.epsilon, cfg.norm).detach()
        with torch.no_grad():
            val = objective(x_adv)
        best_val = _keep_better(best_x, best_val, x_adv, val)
    return best_x


def pgd_training_attack(loss_fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                        cfg: AttackConfig, seed: int = 0) -> torch.Tensor:
    """Maximize a scalar training loss of the adversarial batch inside the budget.

    ``loss_fn`` maps the candidate batch to a scalar (e.g. the combined loss
    with the clean views held fixed). Returns the last iterate, as in plain PGD.
    """
    x = x.detach()
    if cfg.epsilon == 0:
        return x.clone()
    gen = torch.Generator().manual_seed(int(seed) % (1 << 63))
    x_adv = _random_start(x, cfg.epsilon, cfg.norm, gen) if cfg.random_init else x.clone()
    for _ in range(cfg.steps):
        _, g = _grad(loss_fn, x_adv)
        x_adv = _project(x_adv + _step(g, cfg.alpha, cfg.norm), x, cfg.epsilon, cfg.norm).detach()
    return x_adv


def _signed(score_fn: ScoreFn, y: torch.Tensor):
    y = torch.as_tensor(y, dtype=torch.float32)
    if not torch.all((y == 1) | (y == -1)):
        raise ValueError("y must be +1 (normal) or -1 (anomaly)")
    return lambda z: y.to(z.dtype) * score_fn(z)


def score_attack_pgd(score_fn: ScoreFn, x: torch.Tensor, y, cfg: AttackConfig, seed: int = 0) -> torch.Tensor:
    """PGD on ``y * A(x)``; per sample, the most adversarial iterate over restarts."""
    return pgd_maximize(_signed(score_fn, y), x, cfg, seed)


def fgsm_score_attack(score_fn: ScoreFn, x: torch.Tensor, y, epsilon: float) -> torch.Tensor:
    """Single signed step of size ``epsilon`` from the clean input."""
    x = x.detach()
    if epsilon == 0:
        return x.clone()
    _, g = _grad(_signed(score_fn, y), x)
    return _project(x + epsilon * g.sign(), x, epsilon, "linf")


def blackbox_score_attack(score_fn: ScoreFn, x: torch.Tensor, y, cfg: AttackConfig, queries: int,
                          seed: int = 0, p_init: float = 0.1) -> torch.Tensor:
    """Gradient-free greedy random search with square sign patches (L-inf).

    The first query scores the clean input. Each further query sets a random
    square patch of the perturbation to ``+-epsilon`` (one sign per channel) and
    keeps it only if ``y * A`` strictly improves. The patch area shrinks from
    ``p_init`` of the image to a single pixel over the query budget.
    """
    if queries < 1:
        raise ValueError("queries must be >= 1")
    x = x.detach()
    obj = _signed(score_fn, y)
    eps = cfg.epsilon
    N, C, H, W = x.shape
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        best = x.clone()
        best_val = obj(best).double()
        for q in range(1, queries):
            frac = q / max(queries - 1, 1)
            p = p_init * (1.0 - frac) ** 2
            side = int(np.clip(round(math.sqrt(p * H * W)), 1, min(H, W)))
            cand = best.clone()
            for i in range(N):
                top = int(rng.integers(0, H - side + 1))
                left = int(rng.integers(0, W - side + 1))
                signs = torch.from_numpy(rng.choice([-1.0, 1.0], size=(C, 1, 1))).to(x.dtype)
                patch = x[i, :, top:top + side, left:left + side] + eps * signs
                cand[i, :, top:top + side, left:left + side] = patch
            cand = _project(cand, x, eps, "linf")
            val = obj(cand).double()
            better = val > best_val
            best[better] = cand[better]
            best_val = torch.where(better, val, best_val)
    return best
