"""Dataset loading and anomaly-detection protocol splits.

Supported datasets:

* ``mnist`` / ``fashion_mnist``: IDX files (optionally gzipped) under
  ``<root>/<name>/`` or ``<root>/<name>/raw/``, or a keras-style
  ``<root>/<name>.npz``.
* ``cifar10``: the python pickle batches under ``<root>/cifar-10-batches-py/``.
* ``mnist5k``: the 5000-image MNIST subset bundled with ``mlxtend`` (500 per
  digit), split into train/test per class with ``split_seed``.
* ``shapes``: synthetic filled circles (label 0) vs squares (label 1).
* ``noise``: uniform noise images, an anomaly source for multi-class runs.

The dataset root comes from ``ProtocolSpec.root`` or the ``COBRA_DATA_ROOT``
environment variable. Nothing is ever downloaded.
"""
from __future__ import annotations

import gzip
import os
import pickle
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

ENV_ROOT = "COBRA_DATA_ROOT"
RESOLUTIONS = (28, 32, 64)
NUM_CLASSES = {"mnist": 10, "fashion_mnist": 10, "cifar10": 10, "mnist5k": 10, "shapes": 2}

DOWNLOAD_HELP = {
    "mnist": "place train-images-idx3-ubyte(.gz), train-labels-idx1-ubyte(.gz), t10k-images-idx3-ubyte(.gz), "
             "t10k-labels-idx1-ubyte(.gz) in {path} (or mnist.npz in the root)",
    "fashion_mnist": "place the Fashion-MNIST IDX files in {path} (or fashion_mnist.npz in the root)",
    "cifar10": "extract cifar-10-python.tar.gz so that {path}/data_batch_1 exists",
}


class DatasetNotFoundError(FileNotFoundError):
    pass


@dataclass
class ProtocolSpec:
    kind: str = "one_class"
    dataset: str = "mnist5k"
    class_id: int | None = 0
    in_name: str | None = None
    out_name: str | None = None
    resolution: int = 28
    channels: int = 1
    split_seed: int = 0
    test_fraction: float = 0.4
    n_synthetic: int = 1000
    max_test: int | None = None
    root: str | None = None

    def __post_init__(self):
        if self.kind not in ("one_class", "multi_class"):
            raise ValueError(f"unknown protocol kind {self.kind!r}")
        if self.resolution not in RESOLUTIONS:
            raise ValueError(f"resolution must be one of {RESOLUTIONS}")
        if self.kind == "one_class":
            n = NUM_CLASSES.get(self.dataset)
            if n is None:
                raise ValueError(f"dataset {self.dataset!r} has no classes for the one-class protocol")
            if self.class_id is None or not 0 <= int(self.class_id) < n:
                raise ValueError(f"invalid class_id {self.class_id!r} for {self.dataset} ({n} classes)")
        elif not (self.in_name and self.out_name):
            raise ValueError("multi_class protocol needs in_name and out_name")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must be in (0, 1)")

    def to_dict(self):
        return asdict(self)


@dataclass
class LabeledSplit:
    x_train: torch.Tensor
    y_train: np.ndarray
    x_test: torch.Tensor
    y_test: np.ndarray


def data_root(spec_root: str | None = None) -> Path | None:
    r = spec_root or os.environ.get(ENV_ROOT)
    return Path(r) if r else None


# ---------------------------------------------------------------------------
# raw loaders (uint8 / float arrays, N x C x H x W)
# ---------------------------------------------------------------------------

def _read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        data = f.read()
    ndim = data[3]
    dims = [int.from_bytes(data[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    return np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim).reshape(dims).copy()


def _find(base: Path, stem: str) -> Path | None:
    for d in (base, base / "raw"):
        for name in (stem, stem + ".gz"):
            if (d / name).exists():
                return d / name
    return None


def _load_idx_dataset(name: str, root: Path | None) -> LabeledSplit:
    if root is None:
        raise DatasetNotFoundError(
            f"{name}: no dataset root configured; set {ENV_ROOT} or data.root. "
            + DOWNLOAD_HELP[name].format(path=f"<root>/{name}"))
    npz = root / f"{name}.npz"
    if npz.exists():
        d = np.load(npz)
        xtr, ytr, xte, yte = d["x_train"], d["y_train"], d["x_test"], d["y_test"]
    else:
        base = root / name
        stems = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]
        paths = [_find(base, s) for s in stems]
        if any(p is None for p in paths):
            raise DatasetNotFoundError(f"{name} files not found under {base}; " + DOWNLOAD_HELP[name].format(path=base))
        xtr, ytr, xte, yte = (_read_idx(p) for p in paths)
    to = lambda a: torch.from_numpy(np.ascontiguousarray(a)).float().div(255).unsqueeze(1)
    return LabeledSplit(to(xtr), np.asarray(ytr, np.int64), to(xte), np.asarray(yte, np.int64))


def _load_cifar10(root: Path | None) -> LabeledSplit:
    base = (root / "cifar-10-batches-py") if root else None
    if base is None or not (base / "data_batch_1").exists():
        raise DatasetNotFoundError(
            "cifar10 not found; set a dataset root and " + DOWNLOAD_HELP["cifar10"].format(path=base or "<root>/cifar-10-batches-py"))

    def read(names):
        xs, ys = [], []
        for n in names:
            with open(base / n, "rb") as f:
                d = pickle.load(f, encoding="bytes")
            xs.append(d[b"data"].reshape(-1, 3, 32, 32))
            ys.append(np.asarray(d[b"labels"]))
        return torch.from_numpy(np.concatenate(xs)).float().div(255), np.concatenate(ys).astype(np.int64)

    xtr, ytr = read([f"data_batch_{i}" for i in range(1, 6)])
    xte, yte = read(["test_batch"])
    return LabeledSplit(xtr, ytr, xte, yte)


def _stratified_split(x: torch.Tensor, y: np.ndarray, test_fraction: float, seed: int) -> LabeledSplit:
    rng = np.random.default_rng(seed)
    tr, te = [], []
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        n_te = int(round(test_fraction * len(idx)))
        te.append(idx[:n_te])
        tr.append(idx[n_te:])
    tr, te = np.sort(np.concatenate(tr)), np.sort(np.concatenate(te))
    return LabeledSplit(x[tr], y[tr], x[te], y[te])


def _load_mnist5k(test_fraction: float, seed: int) -> LabeledSplit:
    try:
        from mlxtend.data import mnist_data
    except ImportError as e:  # pragma: no cover - dependency declared
        raise DatasetNotFoundError("mnist5k needs the mlxtend package") from e
    X, y = mnist_data()
    x = torch.from_numpy(X.reshape(-1, 1, 28, 28)).float().div(255)
    return _stratified_split(x, np.asarray(y, np.int64), test_fraction, seed)


def _disk(x: np.ndarray, r: float, cy: float, cx: float) -> np.ndarray:
    return (x[0] - cy) ** 2 + (x[1] - cx) ** 2 <= r ** 2


def make_synthetic_shapes(n: int, resolution: int = 32, seed: int = 0, channels: int = 1):
    """Balanced filled circles (label 0) and squares (label 1) on a dark canvas.

    Position, size and intensity are jittered; labels are shuffled so the
    classes are interleaved. Returns ``(images, labels)``.
    """
    if n < 2:
        raise ValueError("need n >= 2 shapes")
    rng = np.random.default_rng(seed)
    labels = np.array([0] * (n // 2) + [1] * (n - n // 2), dtype=np.int64)
    labels = labels[rng.permutation(n)]
    R = resolution
    yy, xx = np.mgrid[0:R, 0:R].astype(np.float64) + 0.5
    grid = np.stack([yy, xx])
    imgs = np.empty((n, channels, R, R), dtype=np.float32)
    for i, lab in enumerate(labels):
        size = rng.uniform(0.26, 0.32) * R  # radius or half-side
        cy, cx = rng.uniform(size + 1, R - size - 1, size=2)
        fg = rng.uniform(0.7, 1.0)
        bg = rng.uniform(0.0, 0.15)
        if lab == 0:
            mask = _disk(grid, size, cy, cx)
        else:
            half = size * 0.886  # equal area to the disk
            mask = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
        img = np.where(mask, fg, bg) + rng.normal(0, 0.02, size=(R, R))
        imgs[i] = np.clip(img, 0, 1)[None]
    return torch.from_numpy(imgs), labels


def load_labeled(name: str, spec: ProtocolSpec) -> LabeledSplit:
    root = data_root(spec.root)
    if name in ("mnist", "fashion_mnist"):
        return _load_idx_dataset(name, root)
    if name == "cifar10":
        return _load_cifar10(root)
    if name == "mnist5k":
        return _load_mnist5k(spec.test_fraction, spec.split_seed)
    if name == "shapes":
        x, y = make_synthetic_shapes(spec.n_synthetic, spec.resolution, spec.split_seed)
        return _stratified_split(x, y, spec.test_fraction, spec.split_seed + 1)
    if name == "noise":
        gen = torch.Generator().manual_seed(spec.split_seed)
        n = spec.n_synthetic
        x = torch.rand((n, 1, spec.resolution, spec.resolution), generator=gen)
        return _stratified_split(x, np.zeros(n, np.int64), spec.test_fraction, spec.split_seed)
    raise ValueError(f"unknown dataset {name!r}")


def _fit(x: torch.Tensor, resolution: int, channels: int) -> torch.Tensor:
    if x.shape[-1] != resolution or x.shape[-2] != resolution:
        x = F.interpolate(x, size=(resolution, resolution), mode="bilinear", align_corners=False, antialias=True)
    if x.shape[1] != channels:
        if x.shape[1] == 1:
            x = x.expand(-1, channels, -1, -1)
        elif channels == 1:
            x = x.mean(1, keepdim=True)
        else:
            raise ValueError(f"cannot map {x.shape[1]} channels to {channels}")
    return x.clamp(0, 1).contiguous()


def _subsample(x, y, max_n, seed):
    if max_n is None or len(x) <= max_n:
        return x, y
    rng = np.random.default_rng(seed)
    # keep both groups, proportionally
    keep = []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        k = max(1, int(round(max_n * len(idx) / len(y))))
        keep.append(rng.choice(idx, size=min(k, len(idx)), replace=False))
    keep = np.sort(np.concatenate(keep))
    return x[keep], y[keep]


def load_protocol(spec: ProtocolSpec):
    """Return ``(d_train, d_test, test_labels)`` for the protocol.

    ``d_train`` holds normal images only and carries no labels; test labels
    are 0 for normal and 1 for anomaly.
    """
    if spec.kind == "one_class":
        split = load_labeled(spec.dataset, spec)
        c = int(spec.class_id)
        d_train = split.x_train[split.y_train == c]
        d_test = split.x_test
        labels = (split.y_test != c).astype(np.int64)
    else:
        a = load_labeled(spec.in_name, spec)
        b = load_labeled(spec.out_name, spec)
        d_train = a.x_train
        xa = _fit(a.x_test, spec.resolution, spec.channels)
        xb = _fit(b.x_test, spec.resolution, spec.channels)
        d_test = torch.cat([xa, xb])
        labels = np.concatenate([np.zeros(len(xa), np.int64), np.ones(len(xb), np.int64)])
    d_train = _fit(d_train, spec.resolution, spec.channels)
    d_test = _fit(d_test, spec.resolution, spec.channels)
    d_test, labels = _subsample(d_test, labels, spec.max_test, spec.split_seed)
    if len(d_train) == 0:
        raise ValueError("protocol produced an empty training set")
    return d_train, d_test, labels


def fingerprint_images(x: torch.Tensor) -> str:
    import hashlib
    return hashlib.sha256(x.detach().cpu().contiguous().numpy().tobytes()).hexdigest()[:16]
