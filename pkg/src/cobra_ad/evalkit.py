"""Feature bank, anomaly scores, detection metrics and evaluation protocols."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .attacks import AttackConfig, blackbox_score_attack, fgsm_score_attack, score_attack_pgd
from .data import fingerprint_images
from .nets import CobraNet, fingerprint

log = logging.getLogger(__name__)

SCORE_VARIANTS = ("A", "A_prime", "A_plus")


# ---------------------------------------------------------------------------
# feature bank and scores
# ---------------------------------------------------------------------------

@dataclass
class FeatureBank:
    embeddings: torch.Tensor
    source: str
    model: str

    def __len__(self):
        return len(self.embeddings)


@torch.no_grad()
def build_feature_bank(model: CobraNet, d_train: torch.Tensor, batch_size: int = 512) -> FeatureBank:
    if len(d_train) == 0:
        raise ValueError("cannot build a feature bank from an empty training set")
    model.eval()
    z = torch.cat([model(d_train[s:s + batch_size]).z for s in range(0, len(d_train), batch_size)])
    return FeatureBank(z.detach().clone(), fingerprint_images(d_train), fingerprint(model))


def anomaly_score_A(bank: FeatureBank, model: CobraNet, x: torch.Tensor) -> torch.Tensor:
    """Negative max cosine similarity to the bank; gradients flow through the argmax row."""
    if len(bank) == 0:
        raise ValueError("empty feature bank")
    z = model(x).z
    return -(z @ bank.embeddings.T).max(dim=1).values


def anomaly_score_Aprime(model: CobraNet, x: torch.Tensor) -> torch.Tensor:
    """Anomaly-class probability of the binary head."""
    return model(x).p_anom


def anomaly_score(variant: str, bank: FeatureBank, model: CobraNet, x: torch.Tensor) -> torch.Tensor:
    if variant == "A":
        return anomaly_score_A(bank, model, x)
    if variant == "A_prime":
        return anomaly_score_Aprime(model, x)
    if variant == "A_plus":
        out = model(x)
        return -(out.z @ bank.embeddings.T).max(dim=1).values + out.p_anom
    raise ValueError(f"unknown score variant {variant!r}")


def score_fn(variant: str, bank: FeatureBank, model: CobraNet) -> Callable[[torch.Tensor], torch.Tensor]:
    return lambda x: anomaly_score(variant, bank, model, x)


def batched_scores(fn, x: torch.Tensor, batch_size: int = 512) -> np.ndarray:
    with torch.no_grad():
        return torch.cat([fn(x[s:s + batch_size]) for s in range(0, len(x), batch_size)]).double().numpy()


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in shape")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 (normal) or 1 (anomaly)")
    n_pos, n_neg = int((labels == 1).sum()), int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("metrics need both normal and anomalous samples")
    return scores, labels, n_pos, n_neg


def auroc(scores, labels) -> float:
    """P(anomaly score > normal score), ties counted as one half."""
    scores, labels, n_pos, n_neg = _split(scores, labels)
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def aupr(scores, labels) -> float:
    """Average precision with anomalies as the positive class.

    Sum over distinct thresholds of (recall gain) x (precision at threshold).
    """
    scores, labels, n_pos, _ = _split(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def fpr_at_tpr(scores, labels, tpr: float = 0.95) -> float:
    """FPR at the highest threshold whose TPR reaches ``tpr`` (predict anomaly iff score >= thr)."""
    scores, labels, n_pos, n_neg = _split(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tprs = tp[last] / n_pos
    k = int(np.argmax(tprs >= tpr - 1e-12))
    return float(fp[last][k] / n_neg)


def compute_metrics(scores, labels) -> tuple[float, float, float]:
    return auroc(scores, labels), aupr(scores, labels), fpr_at_tpr(scores, labels, 0.95)


# ---------------------------------------------------------------------------
# protocol runs
# ---------------------------------------------------------------------------

@dataclass
class Condition:
    """One evaluation condition: ``clean`` or an attack with its config."""

    name: str = "clean"
    attack: AttackConfig | None = None
    queries: int = 0

    def __post_init__(self):
        if self.name not in ("clean", "pgd", "fgsm", "blackbox"):
            raise ValueError(f"unknown condition {self.name!r}")
        if isinstance(self.attack, dict):
            self.attack = AttackConfig(**self.attack)
        if self.name != "clean" and self.attack is None:
            self.attack = AttackConfig()
        if self.name == "blackbox" and self.queries < 1:
            self.queries = 1000

    @property
    def label(self) -> str:
        if self.name == "clean":
            return "clean"
        a = self.attack
        eps = f"eps={a.epsilon * 255:.3g}/255"
        if self.name == "pgd":
            return f"pgd-{a.steps}x{a.restarts}-{a.norm}-{eps}"
        if self.name == "fgsm":
            return f"fgsm-{eps}"
        return f"blackbox-{self.queries}q-{eps}"

    def to_dict(self):
        return {"name": self.name, "attack": self.attack.to_dict() if self.attack else None, "queries": self.queries}


@dataclass
class EvalRecord:
    protocol: dict
    condition: str
    condition_config: dict
    score_variant: str
    auroc: float
    aupr: float
    fpr95: float
    n_normal: int
    n_anomaly: int
    wall_time_s: float
    fingerprint: dict = field(default_factory=dict)


@dataclass
class EvalReport:
    records: list[EvalRecord] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    transcripts: dict = field(default_factory=dict)

    def get(self, condition: str, variant: str = "A") -> EvalRecord:
        for r in self.records:
            if r.condition == condition and r.score_variant == variant:
                return r
        raise KeyError((condition, variant))

    def metrics(self) -> dict[tuple[str, str], tuple[float, float, float]]:
        return {(r.condition, r.score_variant): (r.auroc, r.aupr, r.fpr95) for r in self.records}

    def save(self, directory, stem: str = "report") -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / f"{stem}.jsonl", "w") as f:
            for r in self.records:
                f.write(json.dumps(asdict(r)) + "\n")
            for w in self.warnings:
                f.write(json.dumps({"warning": w}) + "\n")
        with open(d / f"{stem}.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["condition", "score_variant", "auroc", "aupr", "fpr95", "n_normal", "n_anomaly",
                        "model", "data"])
            for r in self.records:
                w.writerow([r.condition, r.score_variant, f"{r.auroc:.6f}", f"{r.aupr:.6f}", f"{r.fpr95:.6f}",
                            r.n_normal, r.n_anomaly, r.fingerprint.get("model", ""), r.fingerprint.get("data", "")])

    @classmethod
    def load(cls, directory, stem: str = "report") -> "EvalReport":
        rep = cls()
        with open(Path(directory) / f"{stem}.jsonl") as f:
            for line in f:
                d = json.loads(line)
                if "warning" in d:
                    rep.warnings.append(d["warning"])
                else:
                    rep.records.append(EvalRecord(**d))
        return rep


def attack_inputs(cond: Condition, fn, x: torch.Tensor, labels: np.ndarray, seed: int = 0,
                  batch_size: int = 256) -> torch.Tensor:
    """Attack normals with y=+1 and anomalies with y=-1 against the score ``fn``."""
    if cond.name == "clean":
        return x
    y = torch.from_numpy(np.where(np.asarray(labels) == 0, 1.0, -1.0)).float()
    out = []
    for b, s in enumerate(range(0, len(x), batch_size)):
        xb, yb = x[s:s + batch_size], y[s:s + batch_size]
        if cond.name == "pgd":
            out.append(score_attack_pgd(fn, xb, yb, cond.attack, seed=seed + b))
        elif cond.name == "fgsm":
            out.append(fgsm_score_attack(fn, xb, yb, cond.attack.epsilon))
        else:
            out.append(blackbox_score_attack(fn, xb, yb, cond.attack, cond.queries, seed=seed + b))
    return torch.cat(out)


def run_protocol(model: CobraNet, bank: FeatureBank, d_test: torch.Tensor, test_labels,
                 conditions: Sequence[Condition] = (Condition(),), variants: Sequence[str] = ("A",),
                 protocol: dict | None = None, seed: int = 0, transcripts: bool = False) -> EvalReport:
    """Score clean and attacked test inputs for every condition and score variant."""
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    labels = np.asarray(test_labels)
    conditions = list(conditions)
    if not any(c.name == "clean" for c in conditions):
        conditions.insert(0, Condition())
    report = EvalReport()
    fp = {"model": bank.model, "data": bank.source, "test": fingerprint_images(d_test)}
    try:
        for variant in variants:
            fn = score_fn(variant, bank, model)
            clean_auroc = None
            for cond in conditions:
                t0 = time.time()
                x_eval = attack_inputs(cond, fn, d_test, labels, seed)
                if cond.name != "clean":
                    delta = (x_eval - d_test).abs().amax().item()
                    if delta > cond.attack.epsilon + 1e-6 and cond.attack.norm == "linf":
                        raise RuntimeError(f"attack exceeded its budget: {delta}")
                scores = batched_scores(fn, x_eval)
                a, ap, f95 = compute_metrics(scores, labels)
                if transcripts:
                    report.transcripts[(cond.label, variant)] = scores
                if cond.name == "clean":
                    clean_auroc = a
                elif clean_auroc is not None and a > clean_auroc + 1e-12 and cond.attack.epsilon > 0:
                    msg = (f"{variant}/{cond.label}: attacked AUROC {a:.4f} exceeds clean {clean_auroc:.4f} "
                           "(possible gradient masking)")
                    log.warning(msg)
                    report.warnings.append(msg)
                report.records.append(EvalRecord(
                    protocol=protocol or {}, condition=cond.label, condition_config=cond.to_dict(),
                    score_variant=variant, auroc=a, aupr=ap, fpr95=f95,
                    n_normal=int((labels == 0).sum()), n_anomaly=int((labels == 1).sum()),
                    wall_time_s=time.time() - t0, fingerprint=fp))
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
    return report
