import numpy as np
import pytest

from babverify import bab, datagen, oracle
from babverify.model import BaseNetwork, InputDomain, Layer, PropertySpec, merge_property
from babverify.serialization import dumps

from conftest import shift_output, tiny_problem


def _ramp_template(center=0.8):
    # outputs (x, 0.5): label 0 beats label 1 exactly when x >= 0.5
    base = BaseNetwork([Layer.dense([[1.0]], [0.0]), Layer.dense([[1.0], [0.0]], [0.0, 0.5])])
    return PropertySpec(base, 0, 1, [center], 1.0, clip=(0.0, 1.0))


def test_zero_ambiguity_single_lp():
    net = datagen.random_network([3, 6, 1], 0.0, seed=1, center=np.full(3, 0.5), eps_ref=0.05)
    dom = InputDomain(np.full(3, 0.45), np.full(3, 0.55))
    assert datagen.ambiguous_fraction(net, dom) == 0.0
    res = bab.verify(net, dom, bab.BabConfig())
    assert res.branches == 0 and res.status in (bab.VERIFIED, bab.FALSIFIED)


def test_same_seed_same_network():
    a = datagen.random_network([4, 8, 8, 1], 0.5, seed=9)
    b = datagen.random_network([4, 8, 8, 1], 0.5, seed=9)
    assert dumps(a.to_json()) == dumps(b.to_json())


def test_ambiguity_target_reached():
    center = np.full(4, 0.5)
    net = datagen.random_network([4, 16, 16, 1], 0.5, seed=2, center=center, eps_ref=0.1)
    frac = datagen.ambiguous_fraction(net, InputDomain(center - 0.1, center + 0.1))
    assert 0.4 <= frac <= 0.6


def test_unreachable_ambiguity_target():
    with pytest.raises(ValueError):
        datagen.random_network([2, 1, 1], 0.5, seed=0)


def test_binary_search_finds_radius():
    cfg = bab.BabConfig(max_branches=50)
    rec = datagen.binary_search_epsilon(_ramp_template(), 0.01, 0.6, 0.01, cfg)
    assert abs(rec.epsilon - 0.3) <= 0.01
    net, dom = merge_property(PropertySpec(_ramp_template().network, 0, 1, [0.8], rec.epsilon, (0.0, 1.0)))
    assert bab.verify(net, dom, cfg).status == bab.VERIFIED
    net, dom = merge_property(PropertySpec(_ramp_template().network, 0, 1, [0.8], rec.epsilon + 0.02, (0.0, 1.0)))
    assert bab.verify(net, dom, cfg).status in (bab.FALSIFIED, bab.TIMEOUT)


def test_binary_search_single_call_when_interval_is_tol(monkeypatch):
    calls = []
    real = bab.verify

    def counting(*a, **k):
        calls.append(1)
        return real(*a, **k)

    monkeypatch.setattr(datagen.bab, "verify", counting)
    datagen.binary_search_epsilon(_ramp_template(), 0.1, 0.11, 0.01, bab.BabConfig())
    assert len(calls) <= 1


def test_binary_search_errors():
    with pytest.raises(ValueError):
        datagen.binary_search_epsilon(_ramp_template(), 0.5, 0.1, 0.01, bab.BabConfig())
    with pytest.raises(ValueError):
        datagen.binary_search_epsilon(_ramp_template(center=0.2), 0.05, 0.3, 0.01, bab.BabConfig())


def test_difficulty_tiers():
    assert datagen.difficulty_tier(10, 100) == "easy"
    assert datagen.difficulty_tier(50, 100) == "medium"
    assert datagen.difficulty_tier(90, 100) == "hard"
    assert datagen.difficulty_tier(5, None) == "easy"


def _problems(n, margin=0.005, sizes=(3, 6, 6, 1)):
    out = []
    for i in range(n):
        net, dom = tiny_problem(60 + i, sizes=sizes)
        shift_output(net, margin - oracle.exhaustive_verify(net, dom).minimum)
        out.append(datagen.Problem(f"p{i}", net, dom))
    return out


def test_branch_dataset_labels_in_unit_interval():
    probs = _problems(3)
    cfg = bab.BabConfig(backend="lp", batch_size=2)
    samples = datagen.gen_branch_dataset(probs, cfg, B=5, q=2, seed=1)
    assert samples
    for s in samples:
        assert np.all(s.m >= 0.0) and np.all(s.m <= 1.0 + 1e-12) and len(s.m) == len(s.candidates)


def test_branch_dataset_short_property():
    net = BaseNetwork([Layer.dense([[1.0]], [0.0]), Layer.dense([[1.0], [0.0]], [0.0, 0.5])])
    vnet, dom = merge_property(PropertySpec(net, 0, 1, [0.8], 0.1, (0.0, 1.0)))
    samples = datagen.gen_branch_dataset([datagen.Problem("x", vnet, dom)], bab.BabConfig(), B=20, q=10)
    assert len(samples) <= 1


def test_branch_dataset_deterministic():
    probs = _problems(2)
    cfg = bab.BabConfig(batch_size=2, supg_steps=20)
    runs = [[dumps(s.to_json()) for s in datagen.gen_branch_dataset(probs, cfg, B=4, q=3, seed=5)] for _ in range(2)]
    assert runs[0] == runs[1]


def test_bound_dataset_first_round():
    probs = _problems(2)
    cfg = bab.BabConfig(batch_size=2, supg_steps=20)
    samples = datagen.gen_bound_dataset(probs, cfg, rounds=1, per_property=10, supg_steps=20)
    assert samples
    nets = {p.network_path: p.net for p in probs}
    for s in samples:
        assert [r.shape for r in s.parent_rho] == [(n,) for n in nets[s.network_path].hidden_sizes]
        assert np.isfinite(s.q_supg)
    with pytest.raises(ValueError):
        datagen.gen_bound_dataset(probs, cfg, rounds=2, per_property=5)


def test_stratified_covers_quartiles():
    depths = [0] * 40 + [1] * 5 + [2] * 5 + [3] * 40
    pick = datagen._stratified(depths, 4, np.random.default_rng(0))
    assert sorted({depths[i] for i in pick}) == [0, 1, 2, 3]
    assert datagen._stratified([1, 2], 5, np.random.default_rng(0)) == [0, 1]
