import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfg_forge.core import EnsembleNets, simulate_paths
from mfg_forge.diagnostics import clearing_residual_path
from mfg_forge.errors import ConfigError
from mfg_forge.rec import (
    PenaltyFunction,
    build_rec_spec,
    equilibrium_price,
    optimal_controls,
    penalty_derivative,
    penalty_eval,
    price_path,
    rec_backward_drift,
    rec_forward_drift,
    running_cost,
    table12_params,
)

TABLE3_KNOTS = np.round(np.arange(0.8, 1.17, 0.04), 2)
TABLE3_WEIGHTS = np.array([0.0193, 0.0483, 0.0050, 0.0025, 0.0014, 0.0018, 0.1097, 0.0101, 0.0077, 0.0063])
SINGLE = PenaltyFunction(0.0, [0.205], [0.9])


# -- PenaltyFunction -------------------------------------------------------
def test_penalty_single_knot():
    assert penalty_eval(SINGLE, 1.2) == 0.0
    assert abs(penalty_eval(SINGLE, 0.7) - 0.041) < 1e-15


def test_penalty_table3():
    g = PenaltyFunction(0.0, TABLE3_WEIGHTS, TABLE3_KNOTS)
    oracle = sum(w * max(R - 0.8, 0.0) for w, R in zip(TABLE3_WEIGHTS, TABLE3_KNOTS))
    assert abs(penalty_eval(g, 0.8) - oracle) < 1e-15
    assert abs(penalty_eval(g, 0.8) - 0.0371) < 5e-5


def test_penalty_derivative_examples():
    assert penalty_derivative(SINGLE, 0.5) == -0.205
    assert penalty_derivative(SINGLE, 0.95) == 0.0
    assert penalty_derivative(SINGLE, 0.9) == -0.205  # left branch at the knot
    g = PenaltyFunction(0.0, TABLE3_WEIGHTS, TABLE3_KNOTS)
    assert abs(penalty_derivative(g, 1.0) + 0.1356) < 1e-12


def test_penalty_phi0_above_knots():
    g = PenaltyFunction(-0.3, [0.1, 0.2], [0.8, 0.9])
    assert penalty_eval(g, 5.0) == -0.3
    assert g.hat().phi0 == 0.0 and np.array_equal(g.hat().weights, g.weights)


def test_penalty_call_orientation_mirrors():
    put = PenaltyFunction(0.0, [0.3], [1.0])
    call = PenaltyFunction(0.0, [0.3], [-1.0], "call")
    for x in (-2.0, -1.0, 0.4):
        assert penalty_eval(call, -x) == penalty_eval(put, x)
        assert penalty_derivative(call, -x) == -penalty_derivative(put, x)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(phi0=0, weights=[-0.1], knots=[0.9]),
        dict(phi0=0, weights=[0.1, 0.1], knots=[0.9, 0.9]),
        dict(phi0=0, weights=[0.1], knots=[0.8, 0.9]),
        dict(phi0=0, weights=[], knots=[]),
        dict(phi0=0, weights=[0.1], knots=[0.9], orientation="straddle"),
    ],
)
def test_penalty_invalid(kwargs):
    with pytest.raises(ConfigError):
        PenaltyFunction(**kwargs)


penalties = st.integers(1, 6).flatmap(
    lambda n: st.tuples(
        st.floats(-1, 1),
        st.lists(st.floats(0, 2), min_size=n, max_size=n),
        st.lists(st.floats(-2, 2), min_size=n, max_size=n, unique=True).map(sorted),
    )
)


@settings(max_examples=60, deadline=None)
@given(pen=penalties, xs=st.lists(st.floats(-3, 3), min_size=3, max_size=3, unique=True).map(sorted))
def test_property_convex_nonincreasing(pen, xs):
    phi0, w, R = pen
    if np.any(np.diff(R) <= 1e-9):
        return
    g = PenaltyFunction(phi0, w, R)
    x1, x2, x3 = xs
    g1, g2, g3 = (float(penalty_eval(g, x)) for x in xs)
    lam = (x3 - x2) / (x3 - x1)
    assert g2 <= lam * g1 + (1 - lam) * g3 + 1e-12
    assert g1 >= g2 - 1e-12 >= g3 - 2e-12
    assert abs(float(penalty_eval(g, max(R) + 1.0)) - phi0) < 1e-12


@settings(max_examples=60, deadline=None)
@given(pen=penalties, x=st.floats(-3, 3))
def test_property_derivative_matches_fd(pen, x):
    phi0, w, R = pen
    h = 1e-6
    if np.any(np.diff(R) <= 1e-9) or np.min(np.abs(np.asarray(R) - x)) < 10 * h:
        return
    g = PenaltyFunction(phi0, w, R)
    fd = (penalty_eval(g, x + h) - penalty_eval(g, x - h)) / (2 * h)
    assert abs(fd - penalty_derivative(g, x)) < 1e-6


# -- RecParams -------------------------------------------------------------
def test_table12_defaults():
    p = table12_params()
    assert p.K == 2 and p.M == 52 and p.lam == 6.0 and p.R0 == 0.0
    assert np.allclose(p.init_std, np.sqrt(0.1))
    assert np.allclose(table12_params(eta_is_std=True).init_std, 0.1)


@pytest.mark.parametrize(
    "override",
    [dict(pi=[0.5, 0.6]), dict(pi=[0.0, 1.0]), dict(gamma=[0.0, 1.0]), dict(sigma=[-0.1, 0.1]),
     dict(lam=0.0), dict(h=[0.2]), dict(dt=0.3)],
)
def test_params_invalid(override):
    with pytest.raises(ConfigError):
        table12_params(**override)


# -- price, drifts, controls, costs ---------------------------------------
def test_equilibrium_price_examples():
    p = table12_params()
    assert abs(equilibrium_price([-0.2, -0.2], p) - 0.2) < 1e-15
    p1 = table12_params(pi=[1.0], h=[0.2], sigma=[0.1], zeta=[1.0], gamma=[2.0], beta=[1.0], v=[0.5], eta=[0.1])
    assert abs(equilibrium_price([0.37], p1) + 0.37) < 1e-15
    a = np.array([0.25 / 1.25, 0.75 / 1.75])
    oracle = -(a @ [-0.1, -0.3]) / a.sum()
    assert abs(equilibrium_price([-0.1, -0.3], p) - oracle) < 1e-15
    assert abs(oracle - 0.23636) < 1e-5


def test_forward_drift_examples():
    p = table12_params()
    dx, dc = rec_forward_drift(0, 0.7, 0.0, 0.0, 0.0, p)
    assert dx == 0.2 and dc == 0.0
    dx, _ = rec_forward_drift(1, 0.7, 0.0, -0.1, 0.1, p)
    oracle = 0.5 + (1 / 1.25 + 1 / 1.75) * 0.1 - 0.1 / 1.75
    assert abs(dx - oracle) < 1e-15 and abs(dx - 0.58) < 1e-12
    _, dc = rec_forward_drift(0, 0.7, 0.0, 0.0, 0.0, p, y_c=-0.3)
    assert abs(dc - 0.3) < 1e-15


def test_backward_drift_examples():
    assert rec_backward_drift(0, 0.0) == (0.0, 0.0)
    a, b = rec_backward_drift(1, -0.2)
    assert a == 0.0 and b == 0.2
    a, _ = rec_backward_drift(0, np.linspace(-1, 1, 5))
    assert np.all(a == 0.0)


def test_optimal_controls_examples():
    p = table12_params()
    S = 0.23
    _, _, trade = optimal_controls(-S, 0.0, S, 0, p)
    assert trade == 0.0  # indifference: marginal inventory value offsets the price
    alpha, _, _ = optimal_controls(-0.3, 0.0, S, 1, p)
    assert alpha == 0.0
    _, g_rent, _ = optimal_controls(-0.205, 0.0, 0.0, 1, p)
    assert abs(g_rent - 0.164) < 1e-15


def test_trade_minimizes_instantaneous_cost():
    p = table12_params()
    y_x, S = -0.15, 0.21
    _, _, trade = optimal_controls(y_x, 0.0, S, 1, p)
    cost = lambda G: 0.5 * p.gamma[1] * G**2 + (S + y_x) * G
    assert cost(trade) < cost(trade + 1e-3) and cost(trade) < cost(trade - 1e-3)


def test_drift_consistent_with_controls():
    # x-drift = h - rental... = h + g_rent + Gamma + c
    p = table12_params()
    y_x, y_c, S, c = -0.12, -0.05, 0.2, 0.03
    alpha, g_rent, trade = optimal_controls(y_x, y_c, S, 0, p)
    dx, dc = rec_forward_drift(0, 0.5, c, y_x, S, p, y_c)
    assert abs(dx - (p.h[0] + g_rent + trade + c)) < 1e-15
    assert abs(dc - alpha) < 1e-15


def test_running_cost_examples():
    p = table12_params()
    assert running_cost((0.0, 0.0, 0.0), 0.3, 0, p) == 0.0
    p2 = table12_params(zeta=[2.0, 1.25])
    assert running_cost((0.0, 1.0, 0.0), 0.0, 0, p2) == 1.0
    p3 = table12_params(zeta=[1.25, 1.25], gamma=[1.75, 1.75])
    val = running_cost((0.1, 0.2, -0.3), 0.2, 0, p3)
    assert abs(val - 0.04875) < 1e-15


# -- assembled spec --------------------------------------------------------
def test_spec_terminal_diffusion_initial():
    p = table12_params()
    spec = build_rec_spec(p, SINGLE)
    out = spec.terminal_map(0, np.array([[1.2, 0.0], [0.5, 0.1]]))
    assert np.array_equal(out, [[0.0, 0.0], [-0.205, 0.0]])
    for k in range(2):
        assert np.all(spec.diffusion(k, 0.3)[1] == 0.0)
        assert spec.diffusion(k, 0.3)[0, 0] == p.sigma[k]
    x0 = spec.initial_sampler(1, np.random.default_rng(0), 20000)
    assert np.all(x0[:, 1] == 0.0)
    assert abs(x0[:, 0].mean() - 0.2) < 0.01 and abs(x0[:, 0].var() - 0.1) < 0.005


def test_spec_price_matches_formula():
    p = table12_params(dt=0.125)
    spec = build_rec_spec(p, SINGLE)
    nets = EnsembleNets.build(spec, (6,), seed=3)
    b = simulate_paths(spec, nets, [13, 17], seed=1)
    S = price_path(b, p)
    for m in range(b.grid.M + 1):
        assert abs(S[m] - equilibrium_price([b.Y[0][:, m, 0].mean(), b.Y[1][:, m, 0].mean()], p)) < 1e-14


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n1=st.integers(1, 30), n2=st.integers(1, 30))
def test_property_market_clears(seed, n1, n2):
    p = table12_params(dt=0.125)
    spec = build_rec_spec(p, SINGLE)
    nets = EnsembleNets.build(spec, (6,), seed=seed)
    b = simulate_paths(spec, nets, [n1, n2], seed=seed)
    assert np.max(np.abs(clearing_residual_path(b, p))) < 1e-10
