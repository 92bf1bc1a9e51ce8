import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tandem import autodiff as ad
from tandem.data import TimeSeriesSample
from tandem.interpolation import build_control_path
from tandem.nde import (InitialStateNet, IntegrationError, VectorFieldMLP, brownian_increments,
                        init_state, integrate_cde, integrate_ode, integrate_sde)


def decay(t, z):
    return ad.scale(z, -1.0)


def zero(t, z):
    return ad.scale(z, 0.0)


def euler_error(n):
    traj = integrate_ode(decay, ad.tensor([1.0]), np.linspace(0, 1, n + 1))
    return abs(traj.final.data[0] - math.exp(-1))


def test_zero_field_keeps_state():
    z0 = ad.tensor([0.3, -1.2])
    traj = integrate_ode(zero, z0, np.linspace(0, 1, 7))
    assert np.array_equal(traj.states.data, np.tile(z0.data, (7, 1)))


def test_linear_decay_accuracy_and_order():
    assert euler_error(100) <= 0.01
    errs = [euler_error(n) for n in (50, 100, 200)]
    order = np.polyfit(np.log([1 / 50, 1 / 100, 1 / 200]), np.log(errs), 1)[0]
    assert 0.8 <= order <= 1.2


def test_trajectory_shape_and_initial_state():
    rng = np.random.default_rng(0)
    f = VectorFieldMLP(3, 3, 2, 8, rng)
    z0 = ad.tensor(rng.normal(size=(4, 3)))
    traj = integrate_ode(f, z0, np.linspace(0, 1, 6))
    assert traj.states.shape == (4, 6, 3)
    assert np.array_equal(traj.states.data[:, 0], z0.data)
    assert np.array_equal(traj.states.data[:, -1], traj.final.data)


def test_per_sample_grids():
    rng = np.random.default_rng(1)
    f = VectorFieldMLP(2, 2, 1, 4, rng)
    grids = np.array([[0.0, 0.5, 1.0], [0.0, 0.2, 1.0]])
    z0 = rng.normal(size=(2, 2))
    batched = integrate_ode(f, ad.tensor(z0), grids).final.data
    for i in range(2):
        single = integrate_ode(f, ad.tensor(z0[i:i + 1]), grids[i]).final.data
        np.testing.assert_allclose(batched[i], single[0], rtol=0, atol=1e-15)


def test_non_finite_state_names_step():
    def blow_up(t, z):
        return ad.scale(z, 1e308)
    with np.errstate(over="ignore"), pytest.raises(IntegrationError, match="step"):
        integrate_ode(blow_up, ad.tensor([10.0]), np.linspace(0, 1, 5))


def test_vector_field_output_bounded_and_counted():
    rng = np.random.default_rng(2)
    for n_l in (1, 2, 3, 4):
        for n_h in (16, 32):
            f = VectorFieldMLP(5, 7, n_l, n_h, rng)
            assert f.parameter_count() == VectorFieldMLP.count(5, 7, n_l, n_h)
            expected = (6 + 1) * n_h + (n_l - 1) * (n_h + 1) * n_h + (n_h + 1) * 7
            assert f.parameter_count() == expected
            out = f(0.3, ad.tensor(rng.normal(size=(3, 5)) * 3)).data
            assert np.all(np.abs(out) < 1)
            # saturates to +-1 in floating point, never beyond
            assert np.all(np.abs(f(0.3, ad.tensor(np.full((1, 5), 1e6))).data) <= 1)


def test_cde_identity_matrix_and_linear_path():
    d_z, d = 2, 3
    F = np.zeros((d_z, d))
    F[0, 0] = F[1, 1] = 1.0
    F[0, 2] = 1.0

    def field(t, z):
        return ad.constant(F)

    grid = np.linspace(0, 1, 11)
    X = np.tile(grid[:, None], (1, d))
    z0 = np.array([0.5, -0.5])
    traj = integrate_cde(field, ad.tensor(z0), X, grid)
    np.testing.assert_allclose(traj.final.data, z0 + F.sum(axis=1), atol=1e-12)


def test_cde_constant_path_leaves_state():
    rng = np.random.default_rng(3)
    f = VectorFieldMLP(3, 6, 2, 8, rng, matrix_cols=2)
    grid = np.linspace(0, 1, 9)
    X = np.full((9, 2), 4.2)
    z0 = ad.tensor(rng.normal(size=3))
    traj = integrate_cde(f, z0, X, grid)
    assert np.array_equal(traj.final.data, z0.data)


def test_cde_with_time_control_reproduces_ode():
    ode_field = VectorFieldMLP(4, 4, 2, 16, np.random.default_rng(5))
    cde_field = VectorFieldMLP(4, 4, 2, 16, np.random.default_rng(5), matrix_cols=1)
    grid = np.sort(np.r_[0.0, np.random.default_rng(6).uniform(0, 1, 20), 1.0])
    z0 = ad.tensor(np.random.default_rng(7).normal(size=(3, 4)))
    a = integrate_ode(ode_field, z0, grid).states.data
    b = integrate_cde(cde_field, z0, grid[:, None], grid).states.data
    assert np.max(np.abs(a - b)) <= 1e-12


def test_cde_accepts_control_paths():
    rng = np.random.default_rng(8)
    t = np.linspace(0, 1, 6)
    s = TimeSeriesSample(rng.normal(size=(6, 2)), np.ones((6, 2)), t, 1)
    f = VectorFieldMLP(3, 6, 1, 8, rng, matrix_cols=2)
    z0 = ad.tensor(np.zeros(3))
    path = build_control_path(s)
    a = integrate_cde(f, z0, path, t).final.data
    b = integrate_cde(f, z0, path(t), t).final.data
    assert np.array_equal(a, b)
    with pytest.raises(ad.ShapeError):
        integrate_cde(f, z0, np.zeros((6, 3)), t)


def test_sde_zero_diffusion_equals_ode_bitwise():
    rng = np.random.default_rng(9)
    f = VectorFieldMLP(3, 3, 2, 8, rng)
    grid = np.linspace(0, 1, 15)
    z0 = ad.tensor(rng.normal(size=(2, 3)))
    ode = integrate_ode(f, z0, grid).states.data
    sde = integrate_sde(f, zero, z0, grid, np.random.default_rng(123)).states.data
    assert np.array_equal(ode, sde)


def test_sde_seed_determinism():
    rng = np.random.default_rng(10)
    f, g = VectorFieldMLP(3, 3, 1, 8, rng), VectorFieldMLP(3, 3, 1, 8, rng)
    grid = np.linspace(0, 1, 10)
    z0 = ad.tensor(np.ones(3))
    a = integrate_sde(f, g, z0, grid, np.random.default_rng(4)).states.data
    b = integrate_sde(f, g, z0, grid, np.random.default_rng(4)).states.data
    assert np.array_equal(a, b)


def test_brownian_variance_monte_carlo():
    def one(t, z):
        return ad.constant(np.ones(z.shape))

    grid = np.linspace(0, 1, 21)
    n = 10_000
    z = integrate_sde(zero, one, ad.tensor(np.zeros((n, 1))), grid,
                      np.random.default_rng(11)).final.data[:, 0]
    var = z.var(ddof=1)
    # sd of the sample variance of N(0, 1) draws is sqrt(2 / (n - 1))
    assert abs(var - 1.0) <= 3 * math.sqrt(2 / (n - 1))


def test_brownian_increment_shapes():
    dB = brownian_increments(np.random.default_rng(0), np.linspace(0, 1, 5), (2, 3))
    assert dB.shape == (4, 2, 3)
    dB = brownian_increments(np.random.default_rng(0), np.tile(np.linspace(0, 1, 5), (2, 1)), (2, 3))
    assert dB.shape == (4, 2, 3)


def test_init_state_examples():
    rng = np.random.default_rng(12)
    net = InitialStateNet(2, 5, rng)
    net.linear.weight.data[:] = 0.0
    s = TimeSeriesSample(rng.normal(size=(4, 2)), np.ones((4, 2)), np.linspace(0, 1, 4), 1)
    assert np.array_equal(init_state(net, s).data, net.linear.bias.data)
    net = InitialStateNet(2, 5, rng)
    assert init_state(net, s).shape == (5,)
    masked = TimeSeriesSample(s.values + np.r_[[[0.0, 0.0]], np.ones((3, 2))], s.mask, s.times, 1)
    assert np.array_equal(init_state(net, s).data, init_state(net, masked).data)


def fd_check(build, params, tol=1e-3, h=1e-6):
    with ad.Tape() as tape:
        out = build()
    grads = ad.grad(out, params, tape)
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = build().item()
            flat[i] = old - h
            down = build().item()
            flat[i] = old
            num = (up - down) / (2 * h)
            assert abs(num - g.reshape(-1)[i]) <= tol * max(1.0, abs(num)), (num, g.reshape(-1)[i])


@pytest.mark.parametrize("kind", ["ode", "cde", "sde"])
def test_gradients_through_solver(kind):
    rng = np.random.default_rng(13)
    grid = np.linspace(0, 1, 8)
    z0 = ad.tensor(rng.normal(size=(2, 3)))
    if kind == "cde":
        f = VectorFieldMLP(3, 6, 2, 5, rng, matrix_cols=2)
        X = rng.normal(size=(2, 8, 2))
        run = lambda: integrate_cde(f, z0, X, grid)
    elif kind == "ode":
        f = VectorFieldMLP(3, 3, 2, 5, rng)
        run = lambda: integrate_ode(f, z0, grid)
    else:
        f, g = VectorFieldMLP(3, 3, 1, 5, rng), VectorFieldMLP(3, 3, 1, 5, rng)
        dB = brownian_increments(rng, grid, (2, 3))
        run = lambda: integrate_sde(f, g, z0, grid, dB)
    params = [z0] + list(f.named_parameters().values())
    fd_check(lambda: ad.sum_(ad.tanh(run().final)), params)


@settings(max_examples=30, deadline=None)
@given(z0=st.floats(-3, 3), n=st.integers(2, 60))
def test_linear_decay_is_geometric(z0, n):
    grid = np.linspace(0, 1, n + 1)
    out = integrate_ode(decay, ad.tensor([z0]), grid).final.data[0]
    assert out == pytest.approx(z0 * np.prod(1 - np.diff(grid)), rel=1e-12, abs=1e-300)
