"""Contrastive losses with opposite-pair repulsion, and the binary head loss.

All contrastive losses treat every view of every sample as an anchor. For an
anchor, positives are the other views of the same sample and negatives are
all views of all other samples; the softmax denominator runs over both.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

EPS_NUM = 1e-8
EPS_PROB = 1e-7


@dataclass
class PairBatch:
    z1: torch.Tensor
    z2: torch.Tensor
    z_opp: torch.Tensor | None = None
    z_adv: torch.Tensor | None = None
    labels: torch.Tensor | None = None
    t: float = 0.5

    def views(self) -> torch.Tensor:
        vs = [self.z1, self.z2] + ([self.z_adv] if self.z_adv is not None else [])
        return torch.stack(vs)  # (V, N, d)


def _check(pb: PairBatch):
    if pb.t <= 0:
        raise ValueError("temperature must be positive")
    if pb.z1.shape[0] < 2:
        raise ValueError("contrastive losses need at least two samples")


def _logits(pb: PairBatch):
    """Per-anchor similarity logits and log-denominators.

    Returns ``sims`` of shape (V, N, V, N) holding sim/t between view (v, i)
    and (w, j), the log-denominator per anchor (V, N), and the positive mask.
    """
    Z = pb.views()
    V, N, _ = Z.shape
    flat = Z.reshape(V * N, -1)
    sims = (flat @ flat.T / pb.t).reshape(V, N, V, N)
    eye_n = torch.eye(N, dtype=torch.bool, device=Z.device)
    eye_v = torch.eye(V, dtype=torch.bool, device=Z.device)
    same_sample = eye_n[None, :, None, :].expand(V, N, V, N)
    self_pair = (eye_v[:, None, :, None] & eye_n[None, :, None, :])
    pos = same_sample & ~self_pair
    cand = ~self_pair  # positives plus all other samples' views
    log_den = torch.logsumexp(sims.masked_fill(~cand, float("-inf")).reshape(V, N, -1), dim=-1)
    return sims, log_den, pos


def _reduce(per_sample: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "sum":
        return per_sample.sum()
    if reduction == "mean":
        return per_sample.mean()
    if reduction == "none":
        return per_sample
    raise ValueError(f"unknown reduction {reduction!r}")


def nt_xent(pb: PairBatch, reduction: str = "sum") -> torch.Tensor:
    """NT-Xent summed over anchors and their positives."""
    _check(pb)
    sims, log_den, pos = _logits(pb)
    V, N = log_den.shape
    terms = (log_den[:, :, None, None] - sims).masked_fill(~pos, 0.0)
    per_sample = terms.sum(dim=(0, 2, 3))
    return _reduce(per_sample, reduction)


def cobra_loss(pb: PairBatch, opposite_weight: float = 1.0, eps_num: float = EPS_NUM,
               reduction: str = "sum") -> torch.Tensor:
    """NT-Xent whose numerator subtracts the anchor's similarity to its opposite.

    The numerator ``exp(pos) - w * exp(opp)`` is clamped below at ``eps_num``.
    ``opposite_weight=0`` reproduces :func:`nt_xent` exactly.
    """
    _check(pb)
    if pb.z_opp is None:
        raise ValueError("cobra_loss needs opposite embeddings (z_opp)")
    sims, log_den, pos = _logits(pb)
    if opposite_weight == 0:
        num_log = sims
    else:
        Z = pb.views()
        opp = (Z * pb.z_opp[None]).sum(-1) / pb.t  # (V, N)
        num = torch.exp(sims) - opposite_weight * torch.exp(opp)[:, :, None, None]
        num_log = torch.log(num.clamp_min(eps_num))
    terms = (log_den[:, :, None, None] - num_log).masked_fill(~pos, 0.0)
    per_sample = terms.sum(dim=(0, 2, 3))
    return _reduce(per_sample, reduction)


def opposite_mass(pb: PairBatch) -> torch.Tensor:
    """Share of the opposite term in the total softmax mass over all anchors.

    ``sum_a exp(sim(a, opp)/t) / sum_a (D_a + exp(sim(a, opp)/t))`` with ``D_a``
    the anchor's usual denominator; lies in (0, 1).
    """
    if pb.z_opp is None:
        raise ValueError("opposite_mass needs opposite embeddings (z_opp)")
    sims, log_den, _ = _logits(pb)
    Z = pb.views()
    opp = (Z * pb.z_opp[None]).sum(-1) / pb.t
    num = torch.exp(opp).sum()
    return num / (torch.exp(log_den).sum() + num)


def cls_loss(p_anom: torch.Tensor, labels: torch.Tensor, eps: float = EPS_PROB) -> torch.Tensor:
    """Mean binary cross-entropy; label 1 marks pseudo-anomalies."""
    labels = torch.as_tensor(labels, dtype=p_anom.dtype, device=p_anom.device)
    if not torch.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    p = p_anom.clamp(eps, 1 - eps)
    return -(labels * torch.log(p) + (1 - labels) * torch.log(1 - p)).mean()


def total_loss(pb: PairBatch, p_anom: torch.Tensor, labels: torch.Tensor, cls_weight: float = 1.0,
               opposite_weight: float = 1.0, eps_num: float = EPS_NUM, reduction: str = "sum") -> torch.Tensor:
    """Contrastive term plus weighted classification term.

    With ``reduction="mean"`` the contrastive part is averaged over samples, so
    the result is the per-sample average of the combined objective.
    """
    return cobra_loss(pb, opposite_weight, eps_num, reduction) + cls_weight * cls_loss(p_anom, labels)
