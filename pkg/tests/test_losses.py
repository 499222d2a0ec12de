import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from cobra_ad.losses import PairBatch, cls_loss, cobra_loss, nt_xent, opposite_mass, total_loss
from oracles import bce_loop, cobra_loop, nt_xent_loop


def unit(rng, n, d=6):
    return F.normalize(torch.from_numpy(rng.normal(size=(n, d))), dim=1)


def random_pb(seed, n=4, d=6, adv=True, t=0.5):
    rng = np.random.default_rng(seed)
    z1, z2 = unit(rng, n, d), unit(rng, n, d)
    opp = np.r_[np.arange(n // 2) + n // 2, np.arange(n // 2)]
    return PairBatch(z1, z2, z_opp=z1[opp], z_adv=unit(rng, n, d) if adv else None, t=t)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("adv", [False, True])
def test_nt_xent_matches_loop(seed, adv):
    pb = random_pb(seed, adv=adv)
    want = nt_xent_loop(pb.z1.numpy(), pb.z2.numpy(), pb.t, pb.z_adv.numpy() if adv else None)
    assert nt_xent(pb).item() == pytest.approx(want, rel=1e-9)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("weight", [0.0, 0.5, 1.0])
def test_cobra_matches_loop(seed, weight):
    pb = random_pb(seed, n=6)
    want = cobra_loop(pb.z1.numpy(), pb.z2.numpy(), pb.z_opp.numpy(), pb.t, pb.z_adv.numpy(), weight)
    assert cobra_loss(pb, weight).item() == pytest.approx(want, rel=1e-9)


def test_orthonormal_two_sample_value():
    # four mutually orthogonal unit vectors, t=1: every anchor sees 3 candidates of equal weight
    z = torch.eye(4, dtype=torch.float64)
    pb = PairBatch(z[:2], z[2:], t=1.0)
    assert nt_xent(pb).item() == pytest.approx(4 * math.log(3), rel=1e-12)


def test_identical_views_orthogonal_samples_value():
    # positives identical (sim 1) and the two samples orthogonal: -log(e / (e + 2)) per anchor
    z = torch.eye(2, dtype=torch.float64)
    pb = PairBatch(z, z.clone(), t=1.0)
    per_anchor = -math.log(math.e / (math.e + 2))
    assert per_anchor == pytest.approx(0.5514, abs=1e-4)
    assert nt_xent(pb).item() == pytest.approx(4 * per_anchor, rel=1e-12)


def test_nt_xent_vanishes_at_low_temperature():
    z = torch.eye(3, dtype=torch.float64)
    assert nt_xent(PairBatch(z, z.clone(), t=0.01)).item() < 1e-10


def test_cobra_far_opposite_matches_nt_xent():
    rng = np.random.default_rng(0)
    z1 = unit(rng, 4)
    z2 = F.normalize(z1 + 0.05 * torch.from_numpy(rng.normal(size=z1.shape)), dim=1)
    pb = PairBatch(z1, z2, z_opp=-z1, t=0.05)
    assert abs(cobra_loss(pb).item() - nt_xent(pb).item()) < 1e-3


def test_cobra_weight_zero_is_exactly_nt_xent():
    pb = random_pb(3)
    assert torch.equal(cobra_loss(pb, opposite_weight=0.0), nt_xent(pb))


def test_clamped_numerator_gives_maximum_penalty():
    z = torch.eye(4, dtype=torch.float64)[:, :4]
    z1 = z[:2]
    # positive view equals the opposite embedding, so pos - opp = 0 and the clamp applies
    pb = PairBatch(z1, z1.clone(), z_opp=z1.clone(), t=1.0)
    sims = z1 @ z1.T
    den = math.exp(1.0) + math.exp(float(sims[0, 1])) * 2
    assert cobra_loss(pb).item() == pytest.approx(4 * -math.log(1e-8 / den), rel=1e-9)


def test_opposite_monotone_sweep():
    a = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    b = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
    z1 = torch.stack([a, b])
    values = []
    for theta in np.linspace(math.pi, 0.2, 15):
        o = torch.tensor([math.cos(theta), 0.0, math.sin(theta)], dtype=torch.float64)
        opp = torch.stack([o, b])
        values.append(cobra_loss(PairBatch(z1, z1.clone(), z_opp=opp, t=0.5)).item())
    assert all(y >= x - 1e-12 for x, y in zip(values, values[1:]))


@pytest.mark.parametrize("fn", [nt_xent, cobra_loss, opposite_mass])
def test_permutation_invariance(fn):
    pb = random_pb(7, n=6)
    perm = torch.tensor([3, 1, 5, 0, 2, 4])
    pp = PairBatch(pb.z1[perm], pb.z2[perm], z_opp=pb.z_opp[perm], z_adv=pb.z_adv[perm], t=pb.t)
    assert fn(pp).item() == pytest.approx(fn(pb).item(), abs=1e-6)


@pytest.mark.parametrize("t", [0.07, 0.2, 0.5, 1.0])
def test_losses_finite(t):
    pb = random_pb(1, t=t)
    for v in (nt_xent(pb), cobra_loss(pb), opposite_mass(pb)):
        assert torch.isfinite(v)


def test_opposite_mass_closed_form():
    z = torch.eye(4, dtype=torch.float64)
    z1 = z[:2]
    pb = PairBatch(z1, z1.clone(), z_opp=z1.clone(), t=1.0)
    # each of 4 anchors: denominator = e (positive) + 1 + 1 (other sample's views); opposite term = e
    e = math.e
    assert opposite_mass(pb).item() == pytest.approx(4 * e / (4 * (e + 2) + 4 * e), rel=1e-12)


def test_opposite_mass_orders_by_separation():
    z = torch.eye(4, dtype=torch.float64)
    z1 = z[:2]
    far = PairBatch(z1, z1.clone(), z_opp=z[2:], t=1.0)
    near = PairBatch(z1, z1.clone(), z_opp=z1.clone(), t=1.0)
    assert 0 < opposite_mass(far).item() < opposite_mass(near).item() < 1


def test_cls_loss_values():
    y = torch.tensor([0.0, 1.0, 1.0, 0.0], dtype=torch.float64)
    assert cls_loss(torch.full((4,), 0.5, dtype=torch.float64), y).item() == pytest.approx(math.log(2))
    assert cls_loss(y.clone(), y).item() < 2e-7
    p = torch.tensor([0.1, 0.8, 0.35, 0.6], dtype=torch.float64)
    assert cls_loss(p, y).item() == pytest.approx(bce_loop(p.tolist(), y.tolist()), rel=1e-9)


def test_cls_loss_rejects_bad_labels():
    with pytest.raises(ValueError):
        cls_loss(torch.rand(3), torch.tensor([0.0, 2.0, 1.0]))


def test_total_is_sum_of_parts():
    pb = random_pb(2)
    p = torch.rand(4, dtype=torch.float64)
    y = torch.tensor([0.0, 0.0, 1.0, 1.0], dtype=torch.float64)
    both = total_loss(pb, p, y)
    assert both.item() == pytest.approx(cobra_loss(pb).item() + cls_loss(p, y).item(), abs=1e-9)
    assert total_loss(pb, p, y, cls_weight=0.0).item() == pytest.approx(cobra_loss(pb).item(), abs=0)


def test_errors():
    z = torch.eye(2, dtype=torch.float64)
    with pytest.raises(ValueError):
        nt_xent(PairBatch(z[:1], z[:1]))
    with pytest.raises(ValueError):
        nt_xent(PairBatch(z, z, t=0.0))
    with pytest.raises(ValueError):
        cobra_loss(PairBatch(z, z))


def _fd_check(f, tensors, h=1e-5):
    """Max relative error between autograd and central differences over all inputs."""
    tensors = [t.detach().clone().requires_grad_(True) for t in tensors]
    f(*tensors).backward()
    worst = 0.0
    for t in tensors:
        g = t.grad.detach().clone()
        num = torch.zeros_like(g)
        flat = t.detach().view(-1)
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + h
            up = f(*tensors).item()
            flat[k] = orig - h
            dn = f(*tensors).item()
            flat[k] = orig
            num.view(-1)[k] = (up - dn) / (2 * h)
        err = ((g - num).abs() / (num.abs().clamp_min(1e-3))).max().item()
        worst = max(worst, err)
    return worst


def grad_cases(n_cases=20, seed=0):
    rng = np.random.default_rng(seed)
    for c in range(n_cases):
        n = int(rng.integers(2, 5)) * 2
        d = 5
        z1, z2, za, zo = (torch.from_numpy(rng.normal(size=(n, d))) for _ in range(4))
        p = torch.from_numpy(rng.uniform(0.05, 0.95, size=2 * n))
        y = torch.from_numpy(np.r_[np.zeros(n), np.ones(n)])
        yield z1, z2, za, zo, p, y


def _pb(z1, z2, za, zo):
    n = F.normalize
    return PairBatch(n(z1, dim=1), n(z2, dim=1), z_opp=n(zo, dim=1), z_adv=n(za, dim=1), t=0.5)


def test_gradients_against_finite_differences():
    worst = 0.0
    for z1, z2, za, zo, p, y in grad_cases(5):
        worst = max(worst, _fd_check(lambda a, b, c: nt_xent(_pb(a, b, c, zo)), [z1, z2, za]))
        worst = max(worst, _fd_check(lambda a, b, c, o: cobra_loss(_pb(a, b, c, o), opposite_weight=0.3),
                                     [z1, z2, za, zo]))
        worst = max(worst, _fd_check(lambda q: cls_loss(q, y), [p]))
    assert worst < 1e-4
