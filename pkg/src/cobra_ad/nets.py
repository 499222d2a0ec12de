"""Encoder, projection head and binary anomaly head."""
from __future__ import annotations

import hashlib
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

CKPT_FORMAT = "cobra-model"
CKPT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    encoder: str = "small_cnn"
    proj_dim: int = 128
    proj_layers: int = 2
    input_shape: tuple[int, int, int] = (1, 28, 28)
    widths: tuple[int, ...] = (32, 64, 128, 256)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.widths = tuple(int(v) for v in self.widths)
        if self.encoder not in ("small_cnn", "resnet18"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.proj_dim < 2:
            raise ValueError("proj_dim must be >= 2")
        if self.proj_layers < 1:
            raise ValueError("proj_layers must be >= 1")
        if len(self.input_shape) != 3:
            raise ValueError("input_shape must be (C, H, W)")


class ForwardOutput(NamedTuple):
    h: torch.Tensor
    z: torch.Tensor
    p_anom: torch.Tensor
    logits: torch.Tensor


def _norm(ch: int) -> nn.Module:
    # per-sample normalization: attacks and eval never depend on batch composition
    return nn.GroupNorm(min(8, ch), ch)


class SmallCNN(nn.Module):
    """Four stride-2 conv blocks followed by global average pooling."""

    def __init__(self, in_ch: int, widths=(32, 64, 128, 256)):
        super().__init__()
        layers = []
        c = in_ch
        for w in widths:
            layers += [nn.Conv2d(c, w, 3, stride=2, padding=1, bias=False), _norm(w), nn.ReLU(inplace=True)]
            c = w
        self.features = nn.Sequential(*layers)
        self.out_dim = c

    def forward(self, x):
        return F.adaptive_avg_pool2d(self.features(x), 1).flatten(1)


class _BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.n1 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.n2 = _norm(cout)
        self.short = nn.Identity()
        if stride != 1 or cin != cout:
            self.short = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _norm(cout))

    def forward(self, x):
        y = F.relu(self.n1(self.conv1(x)))
        return F.relu(self.n2(self.conv2(y)) + self.short(x))


class ResNet18(nn.Module):
    """CIFAR-style ResNet-18 (3x3 stem, no max-pool)."""

    def __init__(self, in_ch: int):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(in_ch, 64, 3, 1, 1, bias=False), _norm(64), nn.ReLU(inplace=True))
        blocks = []
        cin = 64
        for cout, stride in [(64, 1), (128, 2), (256, 2), (512, 2)]:
            blocks += [_BasicBlock(cin, cout, stride), _BasicBlock(cout, cout, 1)]
            cin = cout
        self.blocks = nn.Sequential(*blocks)
        self.out_dim = 512

    def forward(self, x):
        return F.adaptive_avg_pool2d(self.blocks(self.stem(x)), 1).flatten(1)


def build_encoder(name: str, in_ch: int, widths=(32, 64, 128, 256)) -> nn.Module:
    if name == "small_cnn":
        return SmallCNN(in_ch, widths)
    if name == "resnet18":
        return ResNet18(in_ch)
    raise ValueError(f"unknown encoder {name!r}")


class CobraNet(nn.Module):
    """Encoder F, projection head G (f = G o F) and anomaly head H on F's output."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = build_encoder(cfg.encoder, cfg.input_shape[0], cfg.widths)
        d = self.encoder.out_dim
        layers: list[nn.Module] = []
        for _ in range(cfg.proj_layers - 1):
            layers += [nn.Linear(d, d), nn.ReLU(inplace=True)]
        layers.append(nn.Linear(d, cfg.proj_dim))
        self.projector = nn.Sequential(*layers)
        self.head = nn.Linear(d, 2)

    def _check(self, x):
        if tuple(x.shape[1:]) != self.cfg.input_shape:
            raise ValueError(f"input shape {tuple(x.shape[1:])} does not match config {self.cfg.input_shape}")

    def forward(self, x: torch.Tensor) -> ForwardOutput:
        self._check(x)
        h = self.encoder(x)
        z = F.normalize(self.projector(h), dim=1)
        logits = self.head(h)
        # index 1 is the anomaly class
        p_anom = logits.softmax(dim=1)[:, 1]
        return ForwardOutput(h, z, p_anom, logits)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x).z


def fingerprint(model: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(model: CobraNet, path, extra: dict | None = None) -> None:
    payload = {
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "config": asdict(model.cfg),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def read_checkpoint(path, fmt: str, version: int) -> dict:
    """Load a versioned checkpoint payload, validating its header."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:  # torch raises assorted errors on garbage input
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != fmt:
        raise CheckpointError(f"{path} is not a {fmt} checkpoint")
    if payload.get("version") != version:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')!r} (expected {version})")
    return payload


def load_checkpoint(path) -> CobraNet:
    payload = read_checkpoint(path, CKPT_FORMAT, CKPT_VERSION)
    model = CobraNet(ModelConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
