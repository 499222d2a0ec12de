import numpy as np
import pytest
import torch
import torch.nn.functional as F

from cobra_ad.attacks import AttackConfig
from cobra_ad.evalkit import (Condition, EvalReport, FeatureBank, anomaly_score, anomaly_score_A,
                              anomaly_score_Aprime, aupr, auroc, build_feature_bank, compute_metrics, fpr_at_tpr,
                              run_protocol)
from cobra_ad.nets import CobraNet, ModelConfig
from oracles import auroc_pairs, average_precision_sweep, fpr95_sweep


def random_scores(rng, n=50, ties=False):
    labels = rng.integers(0, 2, size=n)
    labels[:2] = [0, 1]
    scores = rng.normal(size=n) + labels
    if ties:
        scores = np.round(scores, 1)
    return scores, labels


@pytest.mark.parametrize("seed", range(20))
def test_metrics_match_bruteforce(seed):
    rng = np.random.default_rng(seed)
    s, y = random_scores(rng, ties=seed % 2 == 0)
    assert auroc(s, y) == pytest.approx(auroc_pairs(s, y), abs=1e-9)
    assert aupr(s, y) == pytest.approx(average_precision_sweep(list(s), list(y)), abs=1e-9)
    assert fpr_at_tpr(s, y) == pytest.approx(fpr95_sweep(list(s), list(y)), abs=1e-9)


def test_metric_extremes():
    y = np.array([0, 0, 0, 1, 1])
    assert compute_metrics(np.array([0, 1, 2, 3, 4.0]), y)[0] == 1.0
    assert compute_metrics(np.array([0, 1, 2, 3, 4.0]), y)[2] == 0.0
    assert auroc(np.ones(5), y) == 0.5


def test_auroc_invariant_to_monotone_maps():
    rng = np.random.default_rng(3)
    s, y = random_scores(rng, 80)
    base = auroc(s, y)
    assert auroc(np.exp(s), y) == pytest.approx(base, abs=1e-12)
    assert auroc(3 * s - 7, y) == pytest.approx(base, abs=1e-12)


def test_fpr95_monotone_when_adding_detected_anomaly():
    rng = np.random.default_rng(5)
    s, y = random_scores(rng, 60)
    before = fpr_at_tpr(s, y)
    after = fpr_at_tpr(np.r_[s, s.max() + 1], np.r_[y, 1])
    assert after <= before


def test_metrics_need_both_classes():
    with pytest.raises(ValueError):
        auroc(np.ones(3), np.zeros(3))
    with pytest.raises(ValueError):
        aupr(np.ones(3), np.array([0, 2, 1]))


@pytest.fixture(scope="module")
def tiny():
    torch.manual_seed(0)
    model = CobraNet(ModelConfig(input_shape=(1, 32, 32), widths=(4, 8, 8, 8), proj_dim=8)).eval()
    g = torch.Generator().manual_seed(1)
    train = torch.rand(5, 1, 32, 32, generator=g)
    test = torch.rand(12, 1, 32, 32, generator=g)
    labels = np.r_[np.zeros(6), np.ones(6)].astype(int)
    return model, train, test, labels


def test_bank_properties(tiny):
    model, train, _, _ = tiny
    bank = build_feature_bank(model, train)
    assert len(bank) == 5
    assert torch.allclose(bank.embeddings.norm(dim=1), torch.ones(5), atol=1e-5)
    assert torch.equal(bank.embeddings, build_feature_bank(model, train).embeddings)
    assert len(build_feature_bank(model, train[:1])) == 1
    with pytest.raises(ValueError):
        build_feature_bank(model, train[:0])


def test_score_A(tiny):
    model, train, test, _ = tiny
    bank = build_feature_bank(model, train)
    with torch.no_grad():
        a_train = anomaly_score_A(bank, model, train)
        a = anomaly_score_A(bank, model, test).double()
        z = model(test).z.double()
    assert torch.allclose(a_train, -torch.ones(5), atol=1e-6)
    e = bank.embeddings.double()
    brute = torch.tensor([-max(float(z[i] @ e[j]) for j in range(len(e))) for i in range(len(z))],
                         dtype=torch.float64)
    assert torch.allclose(a, brute, rtol=1e-6, atol=1e-7)
    assert a.min() >= -1 - 1e-6 and a.max() <= 1 + 1e-6


def test_score_A_orthogonal_bank_is_zero(tiny):
    model, _, test, _ = tiny
    with torch.no_grad():
        z = model(test[:1]).z
    basis = torch.linalg.svd(z).Vh[1:3]  # rows orthogonal to z
    bank = FeatureBank(F.normalize(basis, dim=1), "x", "y")
    with torch.no_grad():
        assert abs(anomaly_score_A(bank, model, test[:1]).item()) < 1e-6


def test_score_variants(tiny):
    model, train, test, _ = tiny
    bank = build_feature_bank(model, train)
    with torch.no_grad():
        a = anomaly_score("A", bank, model, test)
        ap = anomaly_score_Aprime(model, test)
        both = anomaly_score("A_plus", bank, model, test)
    assert torch.allclose(both, a + ap, atol=1e-6)
    assert ap.min() >= 0 and ap.max() <= 1
    with pytest.raises(ValueError):
        anomaly_score("B", bank, model, test)


def test_Aprime_from_logits(tiny):
    model, _, test, _ = tiny
    head = model.head
    with torch.no_grad():
        head.weight.zero_()
        head.bias.copy_(torch.tensor([0.0, 0.0]))
        assert torch.allclose(anomaly_score_Aprime(model, test), torch.full((12,), 0.5))
        head.bias.copy_(torch.tensor([-10.0, 10.0]))
        assert anomaly_score_Aprime(model, test).min() > 0.9999


def test_protocol_clean_only(tiny, tmp_path):
    torch.manual_seed(0)
    model = CobraNet(ModelConfig(input_shape=(1, 32, 32), widths=(4, 8, 8, 8), proj_dim=8))
    _, train, test, labels = tiny
    bank = build_feature_bank(model, train)
    rep = run_protocol(model, bank, test, labels, [Condition()], ["A", "A_prime"], protocol={"kind": "t"})
    assert [(r.condition, r.score_variant) for r in rep.records] == [("clean", "A"), ("clean", "A_prime")]
    for r in rep.records:
        assert 0 <= r.auroc <= 1 and 0 <= r.aupr <= 1 and 0 <= r.fpr95 <= 1
        assert r.n_normal == 6 and r.n_anomaly == 6
    rep.save(tmp_path)
    back = EvalReport.load(tmp_path)
    assert back.metrics() == rep.metrics()
    assert (tmp_path / "report.csv").read_text().count("\n") == 3


def test_protocol_zero_budget_equals_clean(tiny):
    model, train, test, labels = tiny
    bank = build_feature_bank(model, train)
    rep = run_protocol(model, bank, test, labels, [Condition(), Condition("pgd", AttackConfig(epsilon=0.0))])
    m = rep.metrics()
    assert m[("pgd-10x1-linf-eps=0/255", "A")] == m[("clean", "A")]


def test_protocol_attack_lowers_auroc(tiny):
    model, train, test, labels = tiny
    bank = build_feature_bank(model, train)
    conds = [Condition("pgd", AttackConfig(epsilon=0.1, steps=10)), Condition("fgsm", AttackConfig(epsilon=0.1)),
             Condition("blackbox", AttackConfig(epsilon=0.1), queries=50)]
    rep = run_protocol(model, bank, test, labels, conds, transcripts=True)
    assert rep.records[0].condition == "clean"
    clean = rep.get("clean").auroc
    assert rep.get("pgd-10x1-linf-eps=25.5/255").auroc <= clean
    assert len(rep.transcripts) == 4
    # parameters are left trainable after evaluation
    assert all(p.requires_grad for p in model.parameters())


def test_condition_validation():
    with pytest.raises(ValueError):
        Condition("cw")
    assert Condition("blackbox").queries == 1000
    assert Condition("fgsm", {"epsilon": 2 / 255}).label == "fgsm-eps=2/255"
