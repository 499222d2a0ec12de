"""Light (semantics-preserving) and hard (semantics-destroying) image transforms.

Every function takes an explicit seed or ``numpy.random.Generator``; nothing
touches a global RNG, so calls are safe to run from parallel workers.
Images are float tensors shaped ``(N, C, H, W)`` with values in ``[0, 1]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import permutations
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn.functional as F

HARD_IDS = (
    "jigsaw",
    "random_erasing",
    "cutpaste",
    "rotation",
    "extreme_blur",
    "intense_crop",
    "noise_injection",
    "extreme_crop",
    "mixup",
    "cutout",
    "cutmix",
    "elastic",
)

LIGHT_OPS = ("color_jitter", "random_grayscale", "random_crop_80_100")

DEFAULT_PARAMS: dict[str, dict[str, float]] = {
    "jigsaw": {"grid": 2},
    "random_erasing": {"area_min": 0.02, "area_max": 0.33, "ratio_min": 0.1, "ratio_max": 0.5},
    "cutpaste": {"side_min": 0.1, "side_max": 0.5},
    "rotation": {"angle_min": -90.0, "angle_max": 90.0},
    "extreme_blur": {"sigma": 2.5, "kernel_frac": 0.05},
    "intense_crop": {"area_min": 0.5, "area_max": 0.8},
    "noise_injection": {"std": 0.1},
    "extreme_crop": {"area_min": 0.4, "area_max": 0.6},
    "mixup": {"alpha": 0.1},
    "cutout": {"side": 0.25, "fill": 0.5},
    "cutmix": {"area": 0.2},
    # displacement std in pixels on a 32-px canvas, scaled with width
    "elastic": {"std_px": 4.0, "smooth_px": 3.0},
}

# Allowed closed ranges for each tunable parameter.
PARAM_RANGES: dict[str, dict[str, tuple[float, float]]] = {
    "jigsaw": {"grid": (2, 2)},
    "random_erasing": {"area_min": (0.0, 1.0), "area_max": (0.0, 1.0), "ratio_min": (0.1, 0.5), "ratio_max": (0.1, 0.5)},
    "cutpaste": {"side_min": (0.1, 0.5), "side_max": (0.1, 0.5)},
    "rotation": {"angle_min": (-90.0, 90.0), "angle_max": (-90.0, 90.0)},
    "extreme_blur": {"sigma": (2.5, 2.5), "kernel_frac": (0.0, 0.05)},
    "intense_crop": {"area_min": (0.5, 0.8), "area_max": (0.5, 0.8)},
    "noise_injection": {"std": (0.1, 0.1)},
    "extreme_crop": {"area_min": (0.4, 0.6), "area_max": (0.4, 0.6)},
    "mixup": {"alpha": (0.1, 0.1)},
    "cutout": {"side": (0.25, 0.25), "fill": (0.0, 1.0)},
    "cutmix": {"area": (0.2, 0.2)},
    "elastic": {"std_px": (0.0, 16.0), "smooth_px": (0.5, 8.0)},
}


class TransformError(ValueError):
    pass


@dataclass(frozen=True)
class TransformSpec:
    id: str
    params: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.id not in HARD_IDS:
            raise TransformError(f"unknown transform id {self.id!r}")
        merged = dict(DEFAULT_PARAMS[self.id])
        unknown = set(self.params) - set(merged)
        if unknown:
            raise TransformError(f"{self.id}: unknown params {sorted(unknown)}")
        merged.update(self.params)
        for key, (lo, hi) in PARAM_RANGES[self.id].items():
            if not lo <= merged[key] <= hi:
                raise TransformError(f"{self.id}.{key}={merged[key]} outside [{lo}, {hi}]")
        object.__setattr__(self, "params", merged)

    def __hash__(self):
        return hash((self.id, tuple(sorted(self.params.items()))))

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TransformSpec":
        return cls(d["id"], dict(d.get("params", {})))


def default_bank() -> list[TransformSpec]:
    return [TransformSpec(i) for i in HARD_IDS]


@dataclass
class LightViewSpec:
    ops: tuple[str, ...] = LIGHT_OPS
    seed: int = 0
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    jitter_p: float = 0.8
    grayscale_p: float = 0.2
    crop_area: tuple[float, float] = (0.8, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)

    def __post_init__(self):
        bad = [op for op in self.ops if op not in LIGHT_OPS]
        if bad:
            raise TransformError(f"unknown light ops {bad}")
        lo, hi = self.crop_area
        if not 0.8 <= lo <= hi <= 1.0:
            raise TransformError("random_crop_80_100 must retain 80%-100% of the area")


def _check_batch(x: torch.Tensor) -> torch.Tensor:
    x = torch.as_tensor(x)
    if x.ndim != 4:
        raise TransformError(f"expected (N, C, H, W) batch, got shape {tuple(x.shape)}")
    if x.shape[0] == 0:
        raise TransformError("empty batch")
    if not torch.isfinite(x).all():
        raise TransformError("non-finite pixels in input")
    return x.float()


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------

def _warp(img: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    """Affine-resample a single (C, H, W) image; bilinear, reflect padding."""
    grid = F.affine_grid(theta[None].float(), [1, *img.shape], align_corners=False)
    out = F.grid_sample(img[None], grid, mode="bilinear", padding_mode="reflection", align_corners=False)
    return out[0]


def _crop_resize(img: torch.Tensor, top: int, left: int, h: int, w: int) -> torch.Tensor:
    _, H, W = img.shape
    crop = img[:, top:top + h, left:left + w]
    if (h, w) == (H, W):
        return crop.clone()
    return F.interpolate(crop[None], size=(H, W), mode="bilinear", align_corners=False)[0]


def sample_crop_box(rng: np.random.Generator, H: int, W: int, area: tuple[float, float],
                    ratio: tuple[float, float] = (3 / 4, 4 / 3), center: bool = False):
    """Draw a crop box ``(top, left, h, w)`` whose area fraction lies in ``area``.

    Falls back to a centered square of the mid area when no draw fits after ten
    tries.
    """
    lo, hi = area
    for _ in range(10):
        target = rng.uniform(lo, hi) * H * W
        log_r = rng.uniform(math.log(ratio[0]), math.log(ratio[1]))
        r = math.exp(log_r)
        w = int(round(math.sqrt(target * r)))
        h = int(round(math.sqrt(target / r)))
        if 0 < w <= W and 0 < h <= H and lo - 1e-9 <= h * w / (H * W) <= hi + 1e-9:
            if center:
                return (H - h) // 2, (W - w) // 2, h, w
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            return top, left, h, w
    # exact-area search over heights; always succeeds for reasonable sizes
    target = 0.5 * (lo + hi) * H * W
    best = None
    for h in range(1, H + 1):
        w = min(W, max(1, int(round(target / h))))
        frac = h * w / (H * W)
        if lo - 1e-9 <= frac <= hi + 1e-9:
            score = abs(math.log(h / w))
            if best is None or score < best[0]:
                best = (score, h, w)
    if best is None:
        return 0, 0, H, W
    _, h, w = best
    return (H - h) // 2, (W - w) // 2, h, w


# ---------------------------------------------------------------------------
# light views
# ---------------------------------------------------------------------------

def _gray(img: torch.Tensor) -> torch.Tensor:
    if img.shape[0] == 3:
        w = img.new_tensor([0.299, 0.587, 0.114])[:, None, None]
        return (img * w).sum(0, keepdim=True)
    return img.mean(0, keepdim=True)


def _hue_shift(img: torch.Tensor, shift: float) -> torch.Tensor:
    # rotation of the chroma plane in YIQ space; shift is a fraction of a turn
    yiq = img.new_tensor([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
    c, s = math.cos(2 * math.pi * shift), math.sin(2 * math.pi * shift)
    rot = img.new_tensor([[1, 0, 0], [0, c, -s], [0, s, c]])
    m = torch.linalg.inv(yiq) @ rot @ yiq
    return torch.einsum("ij,jhw->ihw", m, img)


def sample_light_params(rng: np.random.Generator, spec: LightViewSpec, H: int, W: int) -> dict[str, Any]:
    """Draw one image's light-view parameters, consuming ``rng`` in op order."""
    p: dict[str, Any] = {}
    for op in spec.ops:
        if op == "color_jitter":
            apply = bool(rng.random() < spec.jitter_p)
            factors = {
                "brightness": rng.uniform(max(0.0, 1 - spec.brightness), 1 + spec.brightness),
                "contrast": rng.uniform(max(0.0, 1 - spec.contrast), 1 + spec.contrast),
                "saturation": rng.uniform(max(0.0, 1 - spec.saturation), 1 + spec.saturation),
                "hue": rng.uniform(-spec.hue, spec.hue),
            }
            p["color_jitter"] = {"apply": apply, **factors, "order": rng.permutation(4).tolist()}
        elif op == "random_grayscale":
            p["random_grayscale"] = bool(rng.random() < spec.grayscale_p)
        elif op == "random_crop_80_100":
            p["random_crop_80_100"] = sample_crop_box(rng, H, W, spec.crop_area, spec.crop_ratio)
    return p


def _color_jitter(img: torch.Tensor, prm: dict[str, Any]) -> torch.Tensor:
    if not prm["apply"]:
        return img
    names = ("brightness", "contrast", "saturation", "hue")
    for k in prm["order"]:
        name, f = names[k], prm[names[k]]
        if name == "brightness":
            img = img * f
        elif name == "contrast":
            img = f * img + (1 - f) * _gray(img).mean()
        elif name == "saturation" and img.shape[0] == 3:
            img = f * img + (1 - f) * _gray(img)
        elif name == "hue" and img.shape[0] == 3:
            img = _hue_shift(img, f)
        img = img.clamp(0, 1)
    return img


def apply_light_view(x: torch.Tensor, spec: LightViewSpec, log: list | None = None) -> torch.Tensor:
    """Apply the ordered light ops of ``spec`` to every image of ``x``.

    Per-image parameters come from ``numpy.random.default_rng(spec.seed)`` drawn
    image by image; pass a list as ``log`` to receive them.
    """
    x = _check_batch(x)
    rng = np.random.default_rng(spec.seed)
    _, C, H, W = x.shape
    out = []
    for img in x:
        prm = sample_light_params(rng, spec, H, W)
        for op in spec.ops:
            if op == "color_jitter":
                img = _color_jitter(img, prm[op])
            elif op == "random_grayscale" and prm[op]:
                img = _gray(img).expand(C, H, W).clone()
            elif op == "random_crop_80_100":
                img = _crop_resize(img, *prm[op])
        out.append(img.clamp(0, 1))
        if log is not None:
            log.append(prm)
    return torch.stack(out)


# ---------------------------------------------------------------------------
# hard transforms
# ---------------------------------------------------------------------------

_NON_IDENTITY_PERMS = [p for p in permutations(range(4)) if p != (0, 1, 2, 3)]


def _jigsaw(img, prm, rng, donor):
    _, H, W = img.shape
    th, tw = H // 2, W // 2
    perm = _NON_IDENTITY_PERMS[int(rng.integers(len(_NON_IDENTITY_PERMS)))]
    tiles = [img[:, r * th:(r + 1) * th, c * tw:(c + 1) * tw] for r in range(2) for c in range(2)]
    out = img.clone()
    for dst, src in enumerate(perm):
        r, c = divmod(dst, 2)
        out[:, r * th:(r + 1) * th, c * tw:(c + 1) * tw] = tiles[src]
    return out, {"perm": list(perm)}


def _random_erasing(img, prm, rng, donor):
    C, H, W = img.shape
    area = rng.uniform(prm["area_min"], max(prm["area_min"], prm["area_max"])) * H * W
    ratio = rng.uniform(prm["ratio_min"], max(prm["ratio_min"], prm["ratio_max"]))
    if rng.random() < 0.5:
        ratio = 1.0 / ratio
    h = int(np.clip(round(math.sqrt(area * ratio)), 1, H))
    w = int(np.clip(round(math.sqrt(area / ratio)), 1, W))
    top, left = int(rng.integers(0, H - h + 1)), int(rng.integers(0, W - w + 1))
    out = img.clone()
    fill = torch.from_numpy(rng.random((C, h, w))).float()
    out[:, top:top + h, left:left + w] = fill
    return out, {"box": (top, left, h, w)}


def _cutpaste(img, prm, rng, donor):
    _, H, W = img.shape
    side = int(np.clip(round(rng.uniform(prm["side_min"], max(prm["side_min"], prm["side_max"])) * W), 1, min(H, W)))
    sy, sx = int(rng.integers(0, H - side + 1)), int(rng.integers(0, W - side + 1))
    dy, dx = sy, sx
    for _ in range(10):
        dy, dx = int(rng.integers(0, H - side + 1)), int(rng.integers(0, W - side + 1))
        if (dy, dx) != (sy, sx):
            break
    out = img.clone()
    out[:, dy:dy + side, dx:dx + side] = img[:, sy:sy + side, sx:sx + side]
    return out, {"src": (sy, sx), "dst": (dy, dx), "side": side}


def _rotation(img, prm, rng, donor):
    angle = float(rng.uniform(prm["angle_min"], prm["angle_max"])) if prm["angle_max"] > prm["angle_min"] else float(prm["angle_min"])
    _, H, W = img.shape
    if angle % 90 == 0 and (H == W or angle % 180 == 0):
        return torch.rot90(img, int(angle // 90) % 4, dims=(1, 2)).clone(), {"angle": angle}
    rad = math.radians(angle)
    c, s = math.cos(rad), math.sin(rad)
    theta = torch.tensor([[c, -s * H / W, 0.0], [s * W / H, c, 0.0]])
    return _warp(img, theta), {"angle": angle}


def _gauss_kernel(sigma: float, size: int) -> torch.Tensor:
    ax = torch.arange(size, dtype=torch.float32) - (size - 1) / 2
    k = torch.exp(-ax ** 2 / (2 * sigma ** 2))
    return k / k.sum()


def _blur(img: torch.Tensor, sigma: float, size: int) -> torch.Tensor:
    C = img.shape[0]
    k = _gauss_kernel(sigma, size)
    pad = size // 2
    y = F.pad(img[None], (pad, pad, pad, pad), mode="reflect")
    y = F.conv2d(y, k.view(1, 1, 1, -1).expand(C, 1, 1, size), groups=C)
    y = F.conv2d(y, k.view(1, 1, -1, 1).expand(C, 1, size, 1), groups=C)
    return y[0]


def _extreme_blur(img, prm, rng, donor):
    _, H, W = img.shape
    # kernel "up to" kernel_frac of the width, never below 3 taps
    kmax = max(3, int(round(prm["kernel_frac"] * W)) | 1)
    size = int(rng.choice(np.arange(3, kmax + 1, 2)))
    size = min(size, 2 * (min(H, W) // 2) - 1)
    return _blur(img, prm["sigma"], size), {"kernel": size}


def _crop_transform(img, prm, rng, center):
    _, H, W = img.shape
    box = sample_crop_box(rng, H, W, (prm["area_min"], prm["area_max"]), center=center)
    return _crop_resize(img, *box), {"box": box}


def _intense_crop(img, prm, rng, donor):
    return _crop_transform(img, prm, rng, center=False)


def _extreme_crop(img, prm, rng, donor):
    return _crop_transform(img, prm, rng, center=True)


def _noise_injection(img, prm, rng, donor):
    noise = torch.from_numpy(rng.standard_normal(img.shape)).float() * prm["std"]
    return img + noise, {}


def _mixup(img, prm, rng, donor):
    lam = float(rng.beta(prm["alpha"], prm["alpha"]))
    return lam * img + (1 - lam) * donor, {"lam": lam}


def _cutout(img, prm, rng, donor):
    _, H, W = img.shape
    side = max(1, int(round(prm["side"] * W)))
    side = min(side, H)
    top, left = int(rng.integers(0, H - side + 1)), int(rng.integers(0, W - side + 1))
    out = img.clone()
    out[:, top:top + side, left:left + side] = prm["fill"]
    return out, {"box": (top, left, side, side)}


def _cutmix(img, prm, rng, donor):
    _, H, W = img.shape
    ratio = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
    area = prm["area"] * H * W
    h = int(np.clip(round(math.sqrt(area * ratio)), 1, H))
    w = int(np.clip(round(math.sqrt(area / ratio)), 1, W))
    top, left = int(rng.integers(0, H - h + 1)), int(rng.integers(0, W - w + 1))
    out = img.clone()
    out[:, top:top + h, left:left + w] = donor[:, top:top + h, left:left + w]
    return out, {"box": (top, left, h, w)}


def _elastic(img, prm, rng, donor):
    _, H, W = img.shape
    scale = W / 32.0
    std = prm["std_px"] * scale
    smooth = prm["smooth_px"] * scale
    field_ = torch.from_numpy(rng.standard_normal((2, H, W))).float()
    size = 2 * int(math.ceil(2 * smooth)) + 1
    size = min(size, 2 * (min(H, W) // 2) - 1)
    field_ = _blur(field_, smooth, size)
    field_ = field_ / field_.std().clamp_min(1e-8) * std
    ys, xs = torch.meshgrid(torch.arange(H, dtype=torch.float32), torch.arange(W, dtype=torch.float32), indexing="ij")
    gx = (xs + field_[0] + 0.5) / W * 2 - 1
    gy = (ys + field_[1] + 0.5) / H * 2 - 1
    grid = torch.stack([gx, gy], dim=-1)[None]
    out = F.grid_sample(img[None], grid, mode="bilinear", padding_mode="reflection", align_corners=False)[0]
    return out, {}


_HARD_FNS = {
    "jigsaw": _jigsaw,
    "random_erasing": _random_erasing,
    "cutpaste": _cutpaste,
    "rotation": _rotation,
    "extreme_blur": _extreme_blur,
    "intense_crop": _intense_crop,
    "noise_injection": _noise_injection,
    "extreme_crop": _extreme_crop,
    "mixup": _mixup,
    "cutout": _cutout,
    "cutmix": _cutmix,
    "elastic": _elastic,
}

NEEDS_DONOR = ("mixup", "cutmix")


def hard_transform(img: torch.Tensor, spec: TransformSpec, rng: np.random.Generator,
                   donors: torch.Tensor | None = None, self_index: int | None = None):
    """Apply one hard transform to a single ``(C, H, W)`` image.

    Returns ``(image, info)``. Donor-based transforms draw a donor index from
    ``donors`` with ``rng`` (avoiding ``self_index`` when possible) and record
    it in ``info["donor"]``.
    """
    donor = None
    info: dict[str, Any] = {"id": spec.id}
    if spec.id in NEEDS_DONOR:
        if donors is None or len(donors) == 0:
            donors, self_index = img[None], 0
        n = len(donors)
        if n > 1 and self_index is not None:
            j = int(rng.integers(n - 1))
            j = j + 1 if j >= self_index else j
        else:
            j = int(rng.integers(n))
        donor = donors[j]
        info["donor"] = j
    out, extra = _HARD_FNS[spec.id](img, spec.params, rng, donor)
    info.update(extra)
    return out.clamp(0, 1), info


def apply_hard_sequence(x: torch.Tensor, seq: Sequence[TransformSpec], seed: int | np.random.Generator,
                        log: list | None = None) -> torch.Tensor:
    """Apply ``seq`` in order to each image of the batch ``x``.

    Donors for mixup/cutmix come from the same batch via the seeded stream.
    """
    if len(seq) == 0:
        raise TransformError("transform sequence is empty")
    for s in seq:
        if not isinstance(s, TransformSpec):
            raise TransformError(f"not a TransformSpec: {s!r}")
    x = _check_batch(x)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = []
    for i, img in enumerate(x):
        infos = []
        for s in seq:
            img, info = hard_transform(img, s, rng, donors=x, self_index=i)
            infos.append(info)
        out.append(img)
        if log is not None:
            log.append(infos)
    return torch.stack(out)


def sample_hard_sequence(rng_seed: int | np.random.Generator, bank: Sequence[TransformSpec]) -> list[TransformSpec]:
    """Random subset of ``bank`` with ``2 <= m < len(bank)`` in random order.

    A two-entry bank returns both entries (``m <= k`` is allowed there).
    """
    k = len(bank)
    if k < 2:
        raise TransformError("hard-transform bank needs at least two entries")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    m = 2 if k == 2 else int(rng.integers(2, k))
    idx = rng.choice(k, size=m, replace=False)
    return [bank[int(i)] for i in idx]
