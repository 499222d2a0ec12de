"""Distribution-aware pseudo-anomaly crafting.

A k-class classifier learns which hard transform produced an image. Its
penultimate features of the normal training set are modelled with a diagonal
Gaussian mixture; a hard-transformed image is accepted as a pseudo-anomaly
only if its likelihood falls in the lower ``lam`` tail of the training
likelihoods.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.special import logsumexp
from sklearn.exceptions import ConvergenceWarning
from sklearn.mixture import GaussianMixture

from .augment import (LightViewSpec, TransformSpec, apply_hard_sequence, apply_light_view, hard_transform,
                      sample_hard_sequence)
from .nets import ResNet18, SmallCNN, read_checkpoint
from .seeding import stream_seed

log = logging.getLogger(__name__)

THRESHOLD_FORMAT = "cobra-threshold"
THRESHOLD_VERSION = 1
COV_FLOOR = 1e-6


class CrafterError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# transformation classifier
# ---------------------------------------------------------------------------

class TransformClassifier(nn.Module):
    """k-way transform predictor; ``embed`` returns the pre-logit features."""

    def __init__(self, in_ch: int, k: int, arch: str = "small_cnn", embed_dim: int = 16):
        super().__init__()
        self.arch, self.in_ch, self.k, self.embed_dim = arch, in_ch, k, embed_dim
        self.backbone = SmallCNN(in_ch) if arch == "small_cnn" else ResNet18(in_ch)
        # linear bottleneck: low-dimensional, no dead units, friendly to the GMM
        self.neck = nn.Linear(self.backbone.out_dim, embed_dim)
        self.fc = nn.Linear(embed_dim, k)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.neck(self.backbone(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.embed(x))

    def spec(self) -> dict:
        return {"in_ch": self.in_ch, "k": self.k, "arch": self.arch, "embed_dim": self.embed_dim}


def build_transform_dataset(d_train: torch.Tensor, bank: Sequence[TransformSpec], seed: int = 0):
    """Apply every bank transform to every training image; label = bank index.

    Returns ``(images, labels)`` with ``n * k`` rows ordered transform-major.
    """
    if len(bank) == 0:
        raise CrafterError("empty transform bank")
    if len(d_train) == 0:
        raise CrafterError("empty training set")
    rng = np.random.default_rng(seed)
    imgs, labels = [], []
    for i, spec in enumerate(bank):
        imgs.append(apply_hard_sequence(d_train, [spec], rng))
        labels.append(np.full(len(d_train), i, dtype=np.int64))
    return torch.cat(imgs), np.concatenate(labels)


def train_transform_classifier(dataset: torch.Tensor, labels, epochs: int, k: int | None = None,
                               lr: float = 1e-3, batch_size: int = 128, seed: int = 0,
                               arch: str = "small_cnn", embed_dim: int = 16, weight_decay: float = 1e-4,
                               regenerate: Callable[[int], tuple] | None = None) -> TransformClassifier:
    """Train the transform classifier with Adam and cross-entropy.

    ``regenerate(epoch)``, when given, rebuilds ``(dataset, labels)`` at the
    start of every epoch after the first, so the classifier sees fresh
    transform draws instead of memorizing one fixed set.
    """
    if epochs < 1:
        raise CrafterError("epochs must be >= 1")
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    k = int(labels.max()) + 1 if k is None else k
    if labels.min() < 0 or labels.max() >= k:
        raise CrafterError("labels outside [0, k)")
    torch.manual_seed(seed)
    clf = TransformClassifier(dataset.shape[1], k, arch, embed_dim)
    opt = torch.optim.Adam(clf.parameters(), lr=lr, weight_decay=weight_decay)
    gen = torch.Generator().manual_seed(seed)
    n = len(dataset)
    clf.train()
    for ep in range(epochs):
        if regenerate is not None and ep > 0:
            dataset, labels = regenerate(ep)
            labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
            n = len(dataset)
        perm = torch.randperm(n, generator=gen)
        total, correct = 0.0, 0
        for s in range(0, n, batch_size):
            idx = perm[s:s + batch_size]
            logits = clf(dataset[idx])
            loss = F.cross_entropy(logits, labels[idx])
            if not torch.isfinite(loss):
                raise CrafterError(f"classifier loss diverged at epoch {ep}: {loss.item()}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += (logits.argmax(1) == labels[idx]).sum().item()
        log.debug("classifier epoch %d loss %.4f acc %.3f", ep, total / n, correct / n)
    clf.eval()
    return clf


@torch.no_grad()
def classifier_accuracy(clf: TransformClassifier, dataset: torch.Tensor, labels, batch_size: int = 512) -> float:
    labels = torch.as_tensor(np.asarray(labels))
    preds = torch.cat([clf(dataset[s:s + batch_size]).argmax(1) for s in range(0, len(dataset), batch_size)])
    return float((preds == labels).float().mean())


@torch.no_grad()
def embed_images(clf: TransformClassifier, x: torch.Tensor, batch_size: int = 512) -> np.ndarray:
    clf.eval()
    out = [clf.embed(x[s:s + batch_size]).double() for s in range(0, len(x), batch_size)]
    return torch.cat(out).numpy()


# ---------------------------------------------------------------------------
# GMM + empirical p-values
# ---------------------------------------------------------------------------

@dataclass
class GMMParams:
    weights: np.ndarray     # (K,)
    means: np.ndarray       # (K, d)
    variances: np.ndarray   # (K, d) diagonal covariances

    def loglik(self, e: np.ndarray) -> np.ndarray:
        e = np.atleast_2d(np.asarray(e, dtype=np.float64))
        if not np.isfinite(e).all():
            raise CrafterError("non-finite embedding")
        d = e.shape[1]
        diff = e[:, None, :] - self.means[None]
        maha = (diff ** 2 / self.variances[None]).sum(-1)
        log_norm = -0.5 * (d * math.log(2 * math.pi) + np.log(self.variances).sum(-1))
        with np.errstate(divide="ignore"):
            log_w = np.log(self.weights)
        return logsumexp(log_w[None] + log_norm[None] - 0.5 * maha, axis=1)


def fit_gmm(e: np.ndarray, n_components: int = 5, restarts: int = 3, seed: int = 0,
            cov_floor: float = COV_FLOOR) -> GMMParams:
    """Diagonal GMM by EM (best of ``restarts`` inits), variances floored."""
    e = np.asarray(e, dtype=np.float64)
    if len(e) < n_components:
        raise CrafterError(f"need at least {n_components} samples to fit {n_components} components, got {len(e)}")
    gm = GaussianMixture(n_components, covariance_type="diag", n_init=restarts, reg_covar=cov_floor,
                         random_state=seed, max_iter=200)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        gm.fit(e)
    w = np.asarray(gm.weights_, dtype=np.float64)
    return GMMParams(w / w.sum(), np.asarray(gm.means_, np.float64),
                     np.maximum(np.asarray(gm.covariances_, np.float64), cov_floor))


@dataclass
class ThresholdModel:
    classifier: TransformClassifier
    gmm: GMMParams
    train_likelihoods: np.ndarray
    lam: float = 0.05

    def loglik(self, x: torch.Tensor) -> np.ndarray:
        return self.gmm.loglik(embed_images(self.classifier, x))

    def pvalue_from_loglik(self, ll) -> np.ndarray:
        ll = np.asarray(ll, dtype=np.float64)
        n = len(self.train_likelihoods)
        return (1 + np.searchsorted(self.train_likelihoods, ll, side="right")) / (n + 1)

    def pvalues(self, x: torch.Tensor) -> np.ndarray:
        return self.pvalue_from_loglik(self.loglik(x))

    @property
    def threshold_loglik(self) -> float:
        """Log-likelihood of the ``ceil(lam * n)``-th smallest training sample."""
        n = len(self.train_likelihoods)
        idx = max(int(math.ceil(self.lam * n)) - 1, 0)
        return float(self.train_likelihoods[idx])

    def save(self, path) -> None:
        payload = {
            "format": THRESHOLD_FORMAT,
            "version": THRESHOLD_VERSION,
            "classifier_spec": self.classifier.spec(),
            "classifier_state": self.classifier.state_dict(),
            "gmm": {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in asdict(self.gmm).items()},
            "train_likelihoods": torch.from_numpy(self.train_likelihoods),
            "lam": float(self.lam),
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "ThresholdModel":
        p = read_checkpoint(path, THRESHOLD_FORMAT, THRESHOLD_VERSION)
        clf = TransformClassifier(**p["classifier_spec"])
        clf.load_state_dict(p["classifier_state"])
        clf.eval()
        gmm = GMMParams(**{k: v.numpy() for k, v in p["gmm"].items()})
        return cls(clf, gmm, p["train_likelihoods"].numpy(), p["lam"])


def fit_threshold_model(c: TransformClassifier, d_train: torch.Tensor, lam: float = 0.05,
                        n_components: int = 5, restarts: int = 3, seed: int = 0,
                        reference: torch.Tensor | None = None) -> ThresholdModel:
    """Fit the GMM on ``d_train`` embeddings and tabulate reference likelihoods.

    The table comes from ``reference`` when given (images the classifier and
    GMM never saw), otherwise from ``d_train`` itself.
    """
    if not 0 < lam <= 1:
        raise CrafterError("lambda must lie in (0, 1]")
    e = embed_images(c, d_train)
    gmm = fit_gmm(e, n_components, restarts, seed)
    ref = e if reference is None else embed_images(c, reference)
    ll = np.sort(gmm.loglik(ref))
    return ThresholdModel(c, gmm, ll, lam)


@dataclass
class CrafterConfig:
    lam: float = 0.05
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 128
    weight_decay: float = 1e-4
    arch: str = "small_cnn"
    embed_dim: int = 16
    gmm_components: int = 5
    gmm_restarts: int = 3
    max_iters: int = 10
    light_views: bool = True
    # share of the normals held back from classifier and GMM fitting to build the likelihood table
    calibration_fraction: float = 0.0


def fit_crafter(d_train: torch.Tensor, bank: Sequence[TransformSpec], cfg: CrafterConfig | None = None,
                seed: int = 0) -> ThresholdModel:
    """Train the transform classifier on the normal set and fit the threshold model.

    With ``cfg.light_views`` each epoch's k-class dataset is rebuilt from a
    fresh light view of the training images. With ``cfg.calibration_fraction``
    above zero, a seeded random share of the images is held back and only used
    for the likelihood table, which keeps p-values of unseen normals uniform
    even when the classifier memorises its training images.
    """
    cfg = cfg or CrafterConfig()
    if not 0 <= cfg.calibration_fraction < 1:
        raise CrafterError("calibration_fraction must lie in [0, 1)")
    reference = None
    if cfg.calibration_fraction > 0:
        n_ref = int(round(len(d_train) * cfg.calibration_fraction))
        if n_ref < 1 or len(d_train) - n_ref < cfg.gmm_components:
            raise CrafterError(f"cannot hold back {n_ref} of {len(d_train)} images for calibration")
        perm = np.random.default_rng(stream_seed(seed, "calibration")).permutation(len(d_train))
        reference = d_train[perm[:n_ref]]
        d_train = d_train[perm[n_ref:]]
    ss = np.random.SeedSequence(seed)
    data_seed, init_seed, gmm_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))

    def make(ep: int):
        src = d_train
        if cfg.light_views:
            src = apply_light_view(d_train, LightViewSpec(seed=data_seed + 7919 * ep))
        return build_transform_dataset(src, bank, seed=data_seed + ep)

    ds, labels = make(0)
    clf = train_transform_classifier(ds, labels, cfg.epochs, k=len(bank), lr=cfg.lr, batch_size=cfg.batch_size,
                                     seed=init_seed, arch=cfg.arch, embed_dim=cfg.embed_dim,
                                     weight_decay=cfg.weight_decay, regenerate=make)
    return fit_threshold_model(clf, d_train, cfg.lam, cfg.gmm_components, cfg.gmm_restarts, gmm_seed, reference)


def pvalue(tm: ThresholdModel, x: torch.Tensor) -> float:
    """Smoothed empirical p-value of a single image (C, H, W) or (1, C, H, W)."""
    x = torch.as_tensor(x)
    if x.ndim == 3:
        x = x[None]
    return float(tm.pvalues(x)[0])


# ---------------------------------------------------------------------------
# rejection sampling
# ---------------------------------------------------------------------------

@dataclass
class CraftLog:
    attempts: int
    final_pvalue: float
    sequence_used: list[str]
    fallback_used: bool
    donors: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _apply_seq(img, seq, rng, donors, self_index):
    used_donors = []
    for s in seq:
        img, info = hard_transform(img, s, rng, donors=donors, self_index=self_index)
        if "donor" in info:
            used_donors.append(info["donor"])
    return img, used_donors


def _craft(xs: torch.Tensor, rngs: list[np.random.Generator], tm: ThresholdModel, bank, max_iters: int,
           donors: torch.Tensor, indices: list[int]):
    """Batched rejection loop; each sample consumes only its own generator."""
    if max_iters < 1:
        raise CrafterError("max_iters must be >= 1")
    n = len(xs)
    out = xs.clone()
    logs: list[CraftLog | None] = [None] * n
    pending = list(range(n))
    for attempt in range(1, max_iters + 1):
        cands, seqs, dons = [], [], []
        for j in pending:
            seq = sample_hard_sequence(rngs[j], bank)
            img, d = _apply_seq(xs[j], seq, rngs[j], donors, indices[j])
            cands.append(img)
            seqs.append(seq)
            dons.append(d)
        pv = tm.pvalues(torch.stack(cands))
        still = []
        for j, img, seq, d, p in zip(pending, cands, seqs, dons, pv):
            if p <= tm.lam:
                out[j] = img
                logs[j] = CraftLog(attempt, float(p), [s.id for s in seq], False, d)
            else:
                still.append(j)
        pending = still
        if not pending:
            break
    if pending:
        cands, seqs, dons = [], [], []
        for j in pending:
            order = rngs[j].permutation(len(bank))
            seq = [bank[int(i)] for i in order]
            img, d = _apply_seq(xs[j], seq, rngs[j], donors, indices[j])
            cands.append(img)
            seqs.append(seq)
            dons.append(d)
        pv = tm.pvalues(torch.stack(cands))
        for j, img, seq, d, p in zip(pending, cands, seqs, dons, pv):
            out[j] = img
            logs[j] = CraftLog(max_iters, float(p), [s.id for s in seq], True, d)
    return out, logs


def craft_pseudo_anomaly(x: torch.Tensor, tm: ThresholdModel, bank: Sequence[TransformSpec], seed: int,
                         max_iters: int = 10, donors: torch.Tensor | None = None,
                         self_index: int | None = None):
    """Transform ``x`` (C, H, W) until its p-value drops below ``tm.lam``.

    After ``max_iters`` rejections the whole bank is applied in a seeded order
    and the result is returned with ``fallback_used=True``.
    """
    x = torch.as_tensor(x).float()
    if donors is None:
        donors, self_index = x[None], 0
    out, logs = _craft(x[None], [np.random.default_rng(seed)], tm, bank, max_iters, donors, [self_index])
    return out[0], logs[0]


def sample_seeds(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def craft_batch(b_normal: torch.Tensor, tm: ThresholdModel, bank: Sequence[TransformSpec], seed: int,
                max_iters: int = 10, return_logs: bool = False):
    """Craft one pseudo-anomaly per input; output index i is the opposite of input i."""
    b_normal = torch.as_tensor(b_normal).float()
    out, logs = _craft(b_normal, sample_seeds(seed, len(b_normal)), tm, bank, max_iters, b_normal,
                       list(range(len(b_normal))))
    return (out, logs) if return_logs else out


def write_craft_logs(logs: Sequence[CraftLog], path) -> None:
    with open(path, "w") as f:
        for i, lg in enumerate(logs):
            f.write(json.dumps({"index": i, **lg.to_dict()}) + "\n")


def summarize_craft_logs(logs: Sequence[CraftLog]) -> dict:
    n = len(logs)
    accepted = [lg for lg in logs if not lg.fallback_used]
    return {
        "n": n,
        "accept_rate": len(accepted) / n if n else 0.0,
        "mean_attempts": float(np.mean([lg.attempts for lg in logs])) if n else 0.0,
        "fallback_count": n - len(accepted),
    }
