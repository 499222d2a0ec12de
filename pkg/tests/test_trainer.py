import math

import numpy as np
import pytest
import torch

from cobra_ad.attacks import AttackConfig
from cobra_ad.augment import default_bank
from cobra_ad.crafter import CrafterConfig, ThresholdModel, fit_crafter
from cobra_ad.data import ProtocolSpec, load_protocol, make_synthetic_shapes
from cobra_ad.nets import CobraNet, ModelConfig
from cobra_ad.trainer import (LARS, TrainConfig, fit, lr_at, make_optimizer, make_pair_batch, train_step)

MODEL = ModelConfig(input_shape=(1, 28, 28), widths=(8, 16, 16, 32), proj_dim=16)


@pytest.fixture(scope="module")
def normals():
    x, y = make_synthetic_shapes(120, 28, seed=0)
    return x[y == 0][:48]


@pytest.fixture(scope="module")
def tm(normals):
    return fit_crafter(normals, default_bank(), CrafterConfig(epochs=2, gmm_components=2), seed=0)


def cfg(**kw):
    base = dict(epochs=2, batch_size=8, lr=0.05, warmup_epochs=1, attack=AttackConfig(epsilon=4 / 255, steps=2))
    base.update(kw)
    return TrainConfig(**base)


def test_lr_schedule():
    c = cfg(epochs=10, warmup_epochs=2, lr=1.0)
    spe = 5
    assert lr_at(0, spe, c) == pytest.approx(1 / 10)
    assert lr_at(9, spe, c) == pytest.approx(1.0)
    assert lr_at(10, spe, c) == pytest.approx(1.0)
    assert lr_at(30, spe, c) == pytest.approx(0.5 * (1 + math.cos(math.pi * 20 / 40)))
    assert lr_at(49, spe, c) < 0.01


def test_pair_batch_single(normals, tm):
    pb = make_pair_batch(normals[:1], tm, default_bank(), seed=0)
    assert len(pb.x) == 2 and pb.opposite.tolist() == [1, 0]
    assert pb.labels.tolist() == [0.0, 1.0]


def test_pair_batch_structure(normals, tm):
    b = 6
    pb = make_pair_batch(normals[:b], tm, default_bank(), seed=1)
    assert pb.view1.shape == pb.x.shape == (2 * b, 1, 28, 28)
    assert np.array_equal(pb.opposite[pb.opposite], np.arange(2 * b))
    assert np.bincount(pb.labels.long().numpy()).tolist() == [b, b]
    assert torch.equal(pb.x[:b], normals[:b])
    p = tm.pvalues(pb.x[b:])
    for pv, lg in zip(p, pb.craft_logs):
        assert lg.fallback_used or pv < tm.lam


def test_zero_lr_keeps_parameters(normals, tm):
    torch.manual_seed(0)
    model = CobraNet(MODEL)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    c = cfg(lr=0.0)
    opt = make_optimizer(model, c)
    stats = train_step(model, opt, make_pair_batch(normals[:4], tm, default_bank(), 0), c, seed=0)
    assert math.isfinite(stats["loss"])
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k])


def test_zero_epsilon_step(normals, tm):
    torch.manual_seed(0)
    model = CobraNet(MODEL)
    c = cfg(attack=AttackConfig(epsilon=0.0))
    stats = train_step(model, make_optimizer(model, c), make_pair_batch(normals[:4], tm, default_bank(), 0), c)
    assert stats["adv_linf"] == 0.0 and math.isfinite(stats["loss"])
    for key in ("loss", "cobra", "nt_xent", "opposite_mass", "cls_acc", "grad_norm"):
        assert key in stats


def test_lars_step(normals, tm):
    torch.manual_seed(0)
    model = CobraNet(MODEL)
    c = cfg(optimizer="lars")
    opt = make_optimizer(model, c)
    assert isinstance(opt, LARS)
    before = [p.clone() for p in model.parameters()]
    train_step(model, opt, make_pair_batch(normals[:4], tm, default_bank(), 0), c)
    assert any(not torch.equal(a, b) for a, b in zip(before, model.parameters()))


def test_fit_zero_epochs(normals, tm):
    res = fit(normals, cfg(epochs=0), MODEL, threshold=tm)
    assert res.log == [] and res.threshold is tm
    torch.manual_seed(0)


def test_fit_deterministic_and_budget(normals, tm):
    a = fit(normals[:16], cfg(), MODEL, threshold=tm)
    b = fit(normals[:16], cfg(), MODEL, threshold=tm)
    la, lb = [r["loss"] for r in a.log], [r["loss"] for r in b.log]
    assert len(la) == 4
    assert np.allclose(la, lb, atol=1e-5, rtol=0)
    assert all(r["adv_linf"] <= 4 / 255 + 1e-6 for r in a.log)


def test_resume_matches_uninterrupted(normals, tm, tmp_path):
    full = fit(normals[:16], cfg(epochs=3), MODEL, threshold=tm)
    fit(normals[:16], cfg(epochs=3), MODEL, threshold=tm, out_dir=tmp_path, max_steps=2)
    # only whole epochs are checkpointed: the interrupted run saved epoch 0
    resumed = fit(normals[:16], cfg(epochs=3), MODEL, threshold=tm, out_dir=tmp_path, resume=True)
    assert [r["global_step"] for r in resumed.log] == list(range(6))
    assert resumed.log[2]["loss"] == pytest.approx(full.log[2]["loss"], abs=1e-5)
    assert (tmp_path / "model.ckpt").exists()


def test_fit_rejects_bad_input(tm):
    with pytest.raises(ValueError):
        fit(torch.rand(0, 1, 28, 28), cfg(), MODEL, threshold=tm)


def test_grad_clip_bounds_update(normals, tm):
    # plain SGD without momentum moves the parameters by exactly lr * clipped gradient
    torch.manual_seed(0)
    model = CobraNet(MODEL)
    before = torch.cat([p.detach().flatten().clone() for p in model.parameters()])
    c = cfg(lr=1.0, momentum=0.0, weight_decay=0.0, grad_clip=1e-3)
    stats = train_step(model, make_optimizer(model, c), make_pair_batch(normals[:4], tm, default_bank(), 0), c)
    after = torch.cat([p.detach().flatten() for p in model.parameters()])
    assert stats["grad_norm"] > 1e-3
    assert (after - before).norm().item() == pytest.approx(1e-3, rel=1e-3)


@pytest.mark.parametrize("kwargs", [dict(optimizer="adam"), dict(batch_size=0), dict(temperature=0.0),
                                    dict(grad_clip=0.0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_loss_decreases_on_tiny_mnist():
    # one fixed batch of 8 zeros (crafted opposites and views drawn once), 60 updates
    tr, _, _ = load_protocol(ProtocolSpec(dataset="mnist5k", class_id=0))
    data = tr[:8]
    tm = fit_crafter(data.repeat(4, 1, 1, 1), default_bank(), CrafterConfig(epochs=2, gmm_components=2), seed=0)
    batch = make_pair_batch(data, tm, default_bank(), seed=0)
    torch.manual_seed(0)
    model = CobraNet(MODEL)
    c = cfg(lr=0.002, attack=AttackConfig(epsilon=4 / 255, steps=2))
    opt = make_optimizer(model, c)
    losses = np.array([train_step(model, opt, batch, c, seed=0)["loss"] for _ in range(60)])
    ma = np.convolve(losses, np.ones(10) / 10, mode="valid")[:51]
    downs = int((np.diff(ma) < 0).sum())
    assert downs >= 45, downs
