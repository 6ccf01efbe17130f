import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfg_forge.core import (
    EnsembleNets,
    Inputs,
    LawStats,
    ProblemSpec,
    SampleBatch,
    TimeGrid,
    draw_inputs,
    fbsde_loss,
    fbsde_value_and_grad,
    inner_lr,
    law_stats,
    simulate_paths,
    train_fbsde,
)
from mfg_forge.errors import ContractError, NumericalError
from mfg_forge.rec import PenaltyFunction, build_rec_spec, table12_params

from conftest import central_diff, max_rel_err


def scalar_spec(M=1, T=1.0, sigma=0.5, drift=0.0, terminal=None, K=1, x0=0.3):
    """d_X = d_Y = d_W = 1 toy spec with constant coefficients."""
    return ProblemSpec(
        K=K,
        d_x=1,
        d_y=1,
        d_w=1,
        grid=TimeGrid(T, M),
        forward_drift=lambda k, t, x, law, y: x * 0.0 + drift,
        backward_drift=lambda k, t, x, law, y: y * 0.0,
        diffusion=lambda k, t: np.array([[sigma]]),
        terminal_map=terminal or (lambda k, xT: np.zeros((np.shape(xT)[0], 1))),
        initial_sampler=lambda k, rng, n: x0 + 0.1 * rng.standard_normal((n, 1)),
    )


def rec_spec(**kw):
    params = table12_params(**kw)
    return build_rec_spec(params, PenaltyFunction(0.0, [0.205], [0.9])), params


# -- TimeGrid / LawStats ---------------------------------------------------
def test_time_grid():
    g = TimeGrid(1.0, 52)
    assert abs(g.dt * g.M - g.T) < 1e-12
    assert np.allclose(np.diff(g.points), g.dt, rtol=0, atol=1e-15)
    with pytest.raises(ContractError):
        TimeGrid(1.0, 0)


def test_law_stats_examples():
    ls = law_stats([np.full((4, 2), 0.7)], [np.full((4, 1), -1.0)])
    assert np.all(ls.mean_x[0] == 0.7) and np.all(ls.mean_y[0] == -1.0)
    ls = law_stats([np.array([[0.1], [0.3]])], [np.zeros((2, 1))])
    assert abs(ls.mean_x[0][0] - 0.2) < 1e-15
    with pytest.raises(ContractError):
        law_stats([np.zeros((0, 1))], [np.zeros((0, 1))])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 40))
def test_property_law_stats_permutation(seed, n):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(n, 2)), rng.normal(size=(n, 3))
    p = rng.permutation(n)
    a, b = law_stats([x], [y]), law_stats([x[p]], [y[p]])
    assert np.allclose(a.mean_x[0], b.mean_x[0], rtol=0, atol=1e-14)
    assert np.allclose(a.mean_y[0], b.mean_y[0], rtol=0, atol=1e-14)


# -- simulate_paths --------------------------------------------------------
def test_single_euler_step():
    spec = scalar_spec(M=1, sigma=0.5)
    nets = EnsembleNets.build(spec, (4,), seed=3)
    b = simulate_paths(spec, nets, [6], seed=1)
    x0, y0, z, dw = b.X[0][:, 0], b.Y[0][:, 0], b.Z[0][:, 0, 0, 0], b.dW[0][:, 0]
    assert np.allclose(b.X[0][:, 1], x0 + 0.5 * dw, rtol=0, atol=1e-15)
    assert np.allclose(b.Y[0][:, 1], y0 + z[:, None] * dw, rtol=0, atol=1e-15)


def test_degenerate_rec_dynamics_exact():
    spec, params = rec_spec(sigma=[0.0, 0.0])
    nets = EnsembleNets.build(spec, (8,), zero=True)
    b = simulate_paths(spec, nets, [32, 32], seed=5)
    for k in range(2):
        xi = b.X[k][:, 0, 0]
        assert np.max(np.abs(b.X[k][:, -1, 0] - (xi + params.h[k] * params.T))) < 1e-12
        assert np.all(b.X[k][:, :, 1] == 0.0)


def test_batch_shapes_and_initial_conditions():
    spec, params = rec_spec(dt=0.125)
    nets = EnsembleNets.build(spec, (6,), seed=2)
    b = simulate_paths(spec, nets, [5, 7], seed=9)
    assert b.counts == (5, 7)
    assert b.X[1].shape == (7, 9, 2) and b.Y[1].shape == (7, 9, 2)
    assert b.Z[0].shape == (5, 8, 2, 2) and b.dW[0].shape == (5, 8, 2)
    assert np.all(b.X[0][:, 0, 1] == 0.0)


def test_determinism():
    spec, _ = rec_spec(dt=0.25)
    nets = EnsembleNets.build(spec, (6,), seed=2)
    a = simulate_paths(spec, nets, [16, 16], seed=42)
    b = simulate_paths(spec, nets, [16, 16], seed=42)
    c = simulate_paths(spec, nets, [16, 16], seed=43)
    for k in range(2):
        assert np.array_equal(a.X[k], b.X[k]) and np.array_equal(a.Y[k], b.Y[k])
    assert not np.array_equal(a.X[0], c.X[0])


def test_noise_statistics():
    spec, _ = rec_spec()
    counts = [2000, 2000]
    inp = draw_inputs(spec, counts, seed=11)
    dt = spec.grid.dt
    for k in range(2):
        dW = inp.dW[k]
        n = dW.shape[0] * dW.shape[1]
        assert np.all(np.abs(dW.mean(axis=(0, 1))) < 4 * np.sqrt(dt) / np.sqrt(n))
        assert np.allclose(dW.var(axis=(0, 1)), dt, rtol=0.05)


def test_yx_has_no_dt_drift():
    spec, _ = rec_spec(dt=0.125)
    nets = EnsembleNets.build(spec, (6,), seed=4)
    b = simulate_paths(spec, nets, [9, 9], seed=3)
    for k in range(2):
        dy = np.diff(b.Y[k][:, :, 0], axis=1)
        zdw = np.einsum("nmj,nmj->nm", b.Z[k][:, :, 0, :], b.dW[k])
        assert np.max(np.abs(dy - zdw)) < 1e-14


def test_capacity_increment_exact():
    spec, params = rec_spec(dt=0.125)
    nets = EnsembleNets.build(spec, (6,), seed=4)
    b = simulate_paths(spec, nets, [9, 9], seed=3)
    for k in range(2):
        dc = np.diff(b.X[k][:, :, 1], axis=1)
        expect = -(b.Y[k][:, :-1, 1] / params.beta[k]) * spec.grid.dt
        assert np.max(np.abs(dc - expect)) < 1e-15


def test_law_override_reproduces_batch():
    spec, _ = rec_spec(dt=0.125)
    nets = EnsembleNets.build(spec, (6,), seed=4)
    a = simulate_paths(spec, nets, [9, 11], seed=3)
    b = simulate_paths(spec, nets, [9, 11], seed=3, law_override=a.law)
    for k in range(2):
        assert np.array_equal(a.X[k], b.X[k]) and np.array_equal(a.Y[k], b.Y[k])


def test_exchangeability():
    spec, _ = rec_spec(dt=0.125)
    nets = EnsembleNets.build(spec, (6,), seed=4)
    inp = draw_inputs(spec, [10, 10], seed=8)
    p = np.random.default_rng(0).permutation(10)
    perm = Inputs([x[p] for x in inp.x0], [d[p] for d in inp.dW])
    a = simulate_paths(spec, nets, [10, 10], 0, inputs=inp)
    b = simulate_paths(spec, nets, [10, 10], 0, inputs=perm)
    for k in range(2):
        assert np.allclose(a.X[k][p], b.X[k], rtol=0, atol=1e-13)
        assert np.allclose(a.Y[k][p], b.Y[k], rtol=0, atol=1e-13)


def test_blow_up_names_timestep():
    spec = scalar_spec(M=4, drift=np.inf)
    nets = EnsembleNets.build(spec, (2,), seed=0)
    with pytest.raises(NumericalError, match="timestep 1"):
        simulate_paths(spec, nets, [3], seed=0)


def test_mismatched_nets_rejected():
    spec, _ = rec_spec(dt=0.25)
    other, _ = rec_spec(dt=0.125)
    nets = EnsembleNets.build(other, (4,))
    with pytest.raises(ContractError):
        simulate_paths(spec, nets, [4, 4], seed=0)
    with pytest.raises(ContractError):
        simulate_paths(spec, EnsembleNets.build(spec, (4,)), [4, 0], seed=0)


# -- fbsde_loss ------------------------------------------------------------
def _batch_with_terminal(xT_list, yT_list):
    X = [np.stack([np.zeros_like(x), x], axis=1) for x in xT_list]
    Y = [np.stack([np.zeros_like(y), y], axis=1) for y in yT_list]
    return SampleBatch(X, Y, [], [], LawStats([], []), TimeGrid(1.0, 1))


def test_fbsde_loss_examples():
    zero_target = scalar_spec(K=1)
    b = _batch_with_terminal([np.zeros((1, 1))], [np.zeros((1, 1))])
    assert fbsde_loss(b, zero_target) == 0.0

    spec2 = ProblemSpec(1, 1, 2, 1, TimeGrid(1.0, 1), None, None, None,
                        lambda k, xT: np.zeros((np.shape(xT)[0], 2)), None)
    b = _batch_with_terminal([np.zeros((1, 1))], [np.array([[0.1, -0.2]])])
    assert abs(fbsde_loss(b, spec2) - 0.05) < 1e-15

    two = scalar_spec(K=2)
    b = _batch_with_terminal([np.zeros((2, 1)), np.zeros((1, 1))], [np.array([[1.0], [3.0]]), np.array([[2.0]])])
    assert abs(fbsde_loss(b, two) - (5.0 + 4.0) / 2) < 1e-14


def test_fbsde_loss_non_finite():
    b = _batch_with_terminal([np.zeros((1, 1))], [np.array([[np.nan]])])
    with pytest.raises(NumericalError):
        fbsde_loss(b, scalar_spec())


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 10))
def test_property_loss_nonnegative(seed, n):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=(n, 1)) * rng.integers(0, 2)
    b = _batch_with_terminal([rng.normal(size=(n, 1))], [y])
    loss = fbsde_loss(b, scalar_spec())
    assert loss >= 0 and (loss == 0) == bool(np.all(y == 0))


def test_gradient_matches_fd():
    spec, _ = rec_spec(dt=0.25)
    nets = EnsembleNets.build(spec, (3,), seed=6)
    inp = draw_inputs(spec, [5, 5], seed=2)
    _, g = fbsde_value_and_grad(spec, nets, inp)

    def f(theta):
        return fbsde_loss(simulate_paths(spec, EnsembleNets(theta, nets.slots, nets.K, nets.M), None, 0, inputs=inp), spec)

    idx = np.random.default_rng(0).choice(len(nets.theta), 40, replace=False)

    def f_sub(v):
        th = nets.theta.copy()
        th[idx] = v
        return f(th)

    ref = central_diff(f_sub, nets.theta[idx])
    assert max_rel_err(g[idx], ref, floor=1e-6) < 1e-4


def test_loss_consistent_with_batch():
    spec, _ = rec_spec(dt=0.25)
    nets = EnsembleNets.build(spec, (3,), seed=6)
    inp = draw_inputs(spec, [5, 7], seed=2)
    v, _ = fbsde_value_and_grad(spec, nets, inp)
    assert abs(v - fbsde_loss(simulate_paths(spec, nets, None, 0, inputs=inp), spec)) < 1e-14


# -- train_fbsde -----------------------------------------------------------
def test_train_infinite_tol_stops_after_one():
    spec, _ = rec_spec(dt=0.25)
    nets = EnsembleNets.build(spec, (4,), seed=1)
    out = train_fbsde(spec, nets, [8, 8], 10, np.inf, seed=0)
    assert len(out.history) == 1 and out.adam.t == 1


def test_train_degenerate_zero_loss():
    spec = scalar_spec(M=3)
    nets = EnsembleNets.build(spec, (4,), zero=True)
    out = train_fbsde(spec, nets, [8], 5, 1e-12, seed=0)
    assert out.history == [0.0]


def test_train_reduces_loss_and_is_deterministic():
    spec, _ = rec_spec(dt=0.25)
    nets = EnsembleNets.build(spec, (8,), seed=1)
    a = train_fbsde(spec, nets, [32, 32], 60, 0.0, seed=3)
    b = train_fbsde(spec, nets, [32, 32], 60, 0.0, seed=3)
    assert a.history == b.history and np.array_equal(a.nets.theta, b.nets.theta)
    assert len(a.history) == 60
    assert np.mean(a.history[-10:]) < np.mean(a.history[:10])
    assert not np.array_equal(nets.theta, a.nets.theta)  # input untouched, output moved


def test_train_rejects_zero_steps():
    spec, _ = rec_spec(dt=0.25)
    with pytest.raises(ContractError):
        train_fbsde(spec, EnsembleNets.build(spec, (4,)), [4, 4], 0, 1.0, seed=0)


def test_inner_lr_schedule():
    assert inner_lr(0, 1e-2, 500, 3e-4, hold=1000) == 1e-2
    assert inner_lr(999, 1e-2, 500, 3e-4, hold=1000) == 1e-2
    assert abs(inner_lr(1500, 1e-2, 500, 3e-4, hold=1000) - 1e-3) < 1e-15
    assert inner_lr(10**6, 1e-2, 500, 3e-4, hold=1000) == 3e-4
    assert inner_lr(123, 1e-3, None, 1e-5) == 1e-3
