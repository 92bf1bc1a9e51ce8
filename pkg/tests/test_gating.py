import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tandem import autodiff as ad
from tandem.gating import GateBank, fuse, gate_report, gumbel, harden, sample_gates


def bank(logits=(0.0, 0.0, 0.0), tau=1.0):
    b = GateBank(tau)
    for l, v in zip(b.logits, logits):
        l.data = np.float64(v)
    return b


def test_deterministic_examples():
    g = sample_gates(bank(), mode="eval_deterministic")
    assert [x.item() for x in g] == [0.5, 0.5, 0.5]
    g = sample_gates(bank((2.0, 0.0, 0.0)), mode="eval_deterministic")
    assert g[0].item() == pytest.approx(0.8807970779778823, abs=1e-15)


def test_bad_temperature_and_mode():
    with pytest.raises(ValueError):
        GateBank(0.0)
    b = bank()
    b.temperature = -1.0
    with pytest.raises(ValueError):
        sample_gates(b, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_gates(bank(), np.random.default_rng(0), mode="sometimes")


def exceedance(logit, draws=100_000, seed=0):
    b = bank((logit, logit, logit), tau=0.01)
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(draws // 3 + 1):
        hits += sum(g.item() > 0.5 for g in sample_gates(b, rng))
    return hits / (3 * (draws // 3 + 1))


@pytest.mark.parametrize("logit", [-1.0, 0.0, 1.0])
def test_gumbel_exceedance_matches_cdf(logit):
    p = 1 - math.exp(-math.exp(logit))
    n = 3 * (30_000 // 3 + 1)
    est = exceedance(logit, 30_000, seed=int(logit * 10) + 50)
    assert abs(est - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_gradient_reaches_logits_in_both_modes():
    for mode, rng in (("train_stochastic", np.random.default_rng(1)), ("eval_deterministic", None)):
        b = bank((0.3, -0.2, 1.0))
        with ad.Tape() as tape:
            g = sample_gates(b, rng, mode)
            out = ad.add(ad.add(g[0], g[1]), g[2])
        grads = ad.grad(out, b.logits, tape)
        for x, gr in zip(g, grads):
            assert gr == pytest.approx(x.item() * (1 - x.item()), rel=1e-12)


def test_harden_examples():
    np.testing.assert_array_equal(harden([0.7, 0.3, 0.5]), [1.0, 0.0, 0.0])


def test_fuse_examples():
    phis = [np.array([2.0, 2.0]), np.array([1.0, 1.0]), np.array([9.0, 9.0])]
    np.testing.assert_array_equal(fuse(phis, (0.5, 1.0, 0.0)).data, [1, 1, 1, 1, 0, 0])
    np.testing.assert_array_equal(fuse(phis, (1.0, 1.0, 1.0)).data, np.concatenate(phis))
    np.testing.assert_array_equal(fuse(phis, (0.0, 0.0, 0.0)).data, np.zeros(6))
    with pytest.raises(ad.ShapeError):
        fuse([np.ones(2), np.ones(3)], (1.0, 1.0))


def test_gate_report_examples():
    single = gate_report([{"backbone": "ode", "variant": "tandem", "missing_rate": 0.0,
                           "gates": {"raw": 0.5, "path": 0.5, "latent": 0.5}}])
    assert [(r["stream"], r["mean"], r["sd"]) for r in single] == [
        ("raw", 0.5, 0.0), ("path", 0.5, 0.0), ("latent", 0.5, 0.0)]
    runs = [{"backbone": "ode", "variant": "tandem", "missing_rate": 0.3,
             "gates": {"raw": 0.1, "path": 0.2, "latent": z}} for z in (0.8, 0.9)]
    latent = [r for r in gate_report(runs) if r["stream"] == "latent"][0]
    assert latent["mean"] == pytest.approx(0.85)
    assert latent["sd"] == pytest.approx(0.0707, abs=1e-4)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), lo=st.floats(-5, 5), delta=st.floats(1e-3, 5),
       tau=st.floats(0.05, 5))
def test_monotone_in_logit(seed, lo, delta, tau):
    a = sample_gates(bank((lo, lo, lo), tau), np.random.default_rng(seed))
    b = sample_gates(bank((lo + delta,) * 3, tau), np.random.default_rng(seed))
    for x, y in zip(a, b):
        assert y.item() >= x.item()
        if 1e-12 < x.item() < 1 - 1e-12:
            assert y.item() > x.item()


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_fuse_is_linear_in_each_stream(seed, a, b):
    rng = np.random.default_rng(seed)
    gates = rng.random(3)
    p, q = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    others = [rng.normal(size=4), rng.normal(size=4)]
    mixed = fuse([a * p[0] + b * q[0]] + others, gates).data
    split = a * fuse([p[0]] + others, gates).data + b * fuse([q[0]] + others, gates).data
    np.testing.assert_allclose(mixed[:4], split[:4], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(sig=st.lists(st.floats(1e-6, 1 - 1e-6), min_size=3, max_size=3))
def test_harden_keeps_the_selected_streams(sig):
    h = harden(sig)
    assert set(np.flatnonzero(h)) == {i for i, s in enumerate(sig) if s > 0.5}


def test_gumbel_draws_are_finite():
    g = gumbel(np.random.default_rng(0), 100_000)
    assert np.all(np.isfinite(g))
    # mean of the standard Gumbel is the Euler-Mascheroni constant
    assert abs(g.mean() - 0.5772156649) < 3 * (math.pi / math.sqrt(6)) / math.sqrt(g.size)


def test_vector_draws_share_the_scalar_law():
    b = bank((-1.0, 0.0, 1.0), tau=0.01)
    gates = sample_gates(b, np.random.default_rng(7), size=60_000)
    assert all(g.shape == (60_000,) for g in gates)
    for g, logit in zip(gates, (-1.0, 0.0, 1.0)):
        p = 1 - math.exp(-math.exp(logit))
        assert abs((g.data > 0.5).mean() - p) <= 3 * math.sqrt(p * (1 - p) / 60_000)
