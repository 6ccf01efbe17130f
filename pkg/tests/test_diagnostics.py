import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfg_forge.core import EnsembleNets, LawStats, SampleBatch, TimeGrid, simulate_paths
from mfg_forge.diagnostics import (
    HIST_BINS,
    clearing_residual_path,
    control_summaries,
    curve_argmin,
    evaluate_principal_loss,
    grid_search_single_knot,
    market_clearing_residual,
    negativity_report,
    price_constancy,
    terminal_histograms,
    terminal_percentiles,
)
from mfg_forge.principal import PrincipalConfig
from mfg_forge.rec import PenaltyFunction, build_rec_spec, price_path, table12_params

PARAMS = table12_params(dt=0.125)
SPEC = build_rec_spec(PARAMS, PenaltyFunction(0.0, [0.2], [0.9]))


def make_batch(Y, xT=None, M=8, T=1.0):
    """Batch from explicit adjoint paths ``Y[k]`` of shape (n, M+1, 2)."""
    X = []
    for k, y in enumerate(Y):
        x = np.zeros_like(y)
        if xT is not None:
            x[:, -1, 0] = xT[k]
        X.append(x)
    law = LawStats([x.mean(axis=0) for x in X], [y.mean(axis=0) for y in Y])
    return SampleBatch(X, list(Y), [], [], law, TimeGrid(T, M))


@pytest.fixture(scope="module")
def sim_batch():
    nets = EnsembleNets.build(SPEC, (6,), seed=2)
    return simulate_paths(SPEC, nets, [40, 60], seed=7)


# -- clearing and price ----------------------------------------------------
def test_clearing_residual_simulated(sim_batch):
    assert market_clearing_residual(sim_batch, PARAMS) < 1e-10


def test_clearing_residual_price_perturbation(sim_batch):
    S = price_path(sim_batch, PARAMS).copy()
    S[3] += 0.1
    path = clearing_residual_path(sim_batch, PARAMS, S)
    expect = 0.1 * np.sum(PARAMS.pi / PARAMS.gamma)
    assert abs(abs(path[3]) - expect) < 1e-12
    assert abs(market_clearing_residual(sim_batch, PARAMS, S) - expect) < 1e-12


def test_clearing_single_population():
    p1 = table12_params(pi=[1.0], h=[0.2], sigma=[0.1], zeta=[1.0], gamma=[2.0], beta=[1.0], v=[0.5], eta=[0.1], dt=0.125)
    Y = np.zeros((5, 9, 2))
    Y[:, :, 0] = -0.3
    assert market_clearing_residual(make_batch([Y]), p1) == 0.0


def test_price_constancy_zero_nets():
    nets = EnsembleNets.build(SPEC, (6,), zero=True)
    b = simulate_paths(SPEC, nets, [10, 10], seed=1)
    assert price_constancy(b, PARAMS) == 0.0


def test_price_constancy_permutation(sim_batch):
    p = np.random.default_rng(0).permutation(40)
    b = make_batch([sim_batch.Y[0][p], sim_batch.Y[1]])
    ref = make_batch([sim_batch.Y[0], sim_batch.Y[1]])
    assert abs(price_constancy(b, PARAMS) - price_constancy(ref, PARAMS)) < 1e-15


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_property_clearing_any_adjoints(seed):
    rng = np.random.default_rng(seed)
    Y = [rng.normal(size=(int(rng.integers(1, 20)), 9, 2)) for _ in range(2)]
    assert market_clearing_residual(make_batch(Y), PARAMS) < 1e-10


# -- percentiles -----------------------------------------------------------
def test_percentiles_examples():
    Y = [np.zeros((4, 9, 2)), np.zeros((3, 9, 2))]
    b = make_batch(Y, xT=[np.array([1.0, 2.0, 3.0, 4.0]), np.full(3, 0.7)])
    pct = terminal_percentiles(b, (10, 50, 90))
    assert pct[0, 1] == 2.5
    assert np.allclose(pct[1], 0.7, rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        terminal_percentiles(b, (0, 50))
    with pytest.raises(ValueError):
        terminal_percentiles(b, (50, 100))


def _brute_quantile(x, q):
    s = np.sort(x)
    h = (len(s) - 1) * q / 100.0
    lo = int(np.floor(h))
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (h - lo) * (s[hi] - s[lo])


@settings(max_examples=50, deadline=None)
@given(xs=st.lists(st.floats(-5, 5), min_size=1, max_size=15), q=st.floats(0.5, 99.5))
def test_property_percentile_oracle(xs, q):
    x = np.array(xs)
    b = make_batch([np.zeros((len(x), 9, 2))], xT=[x])
    assert abs(terminal_percentiles(b, (q,))[0, 0] - _brute_quantile(x, q)) < 1e-9


# -- control summaries and negativity -------------------------------------
def test_control_summaries_zero():
    b = make_batch([np.zeros((3, 9, 2)), np.zeros((2, 9, 2))])
    for row in control_summaries(b, PARAMS):
        for v in row.values():
            assert np.all(v == 0.0)


def test_control_summaries_constant_rental_and_terminal_expansion():
    # Y^X = -0.25 in both populations: S = 0.25, Gamma = 0, g_rent = 0.25 / zeta
    Y = [np.zeros((3, 9, 2)), np.zeros((4, 9, 2))]
    for y in Y:
        y[:, :, 0] = -0.25
        y[:, :-1, 1] = -0.1  # Y^C_T = 0
    summ = control_summaries(make_batch(Y), PARAMS)
    for k, row in enumerate(summ):
        r = 0.25 / PARAMS.zeta[k]
        assert np.allclose(row["rental_rate"], r, rtol=0, atol=1e-15)
        assert abs(row["rental_total"][-1] - r * PARAMS.T) < 1e-14
        assert row["expansion_rate"][-1] == 0.0
        assert np.allclose(row["trading_rate"], 0.0, rtol=0, atol=1e-15)


def test_negativity_examples():
    Y = [-np.abs(np.random.default_rng(0).normal(size=(5, 9, 2)))]
    p1 = table12_params(pi=[1.0], h=[0.2], sigma=[0.1], zeta=[1.0], gamma=[2.0], beta=[1.0], v=[0.5], eta=[0.1], dt=0.125)
    assert negativity_report(make_batch(Y), p1)[0] == 0.0
    # 100 (sample, step) pairs with one positive Y^C -> one negative expansion rate
    Y = [np.full((10, 10, 2), -0.1)]
    Y[0][3, 4, 1] = 0.2
    p2 = table12_params(pi=[1.0], h=[0.2], sigma=[0.1], zeta=[1.0], gamma=[2.0], beta=[1.0], v=[0.5], eta=[0.1], dt=1 / 9)
    assert negativity_report(make_batch(Y, M=9), p2)[0] == 0.01


def test_negativity_permutation(sim_batch):
    p = np.random.default_rng(1).permutation(60)
    a = negativity_report(make_batch([sim_batch.Y[0], sim_batch.Y[1][p]]), PARAMS)
    b = negativity_report(make_batch([sim_batch.Y[0], sim_batch.Y[1]]), PARAMS)
    assert np.array_equal(a, b) and np.all((a >= 0) & (a <= 1))


def test_histograms(sim_batch):
    hist = terminal_histograms(sim_batch)
    assert len(hist) == 2
    for k, (counts, edges) in enumerate(hist):
        assert len(counts) == HIST_BINS and counts.sum() == sim_batch.counts[k]
        assert np.array_equal(edges, hist[0][1])


# -- principal-loss evaluation and grid search ----------------------------
def test_evaluate_principal_loss_se_scaling():
    nets = EnsembleNets.build(SPEC, (6,), seed=2)
    pc = PrincipalConfig.from_params(PARAMS, [0.9])
    _, se1, l1 = evaluate_principal_loss(PARAMS, pc, [0.2], nets, [16, 16], 50, seed=0)
    _, se4, l4 = evaluate_principal_loss(PARAMS, pc, [0.2], nets, [16, 16], 200, seed=1)
    assert len(l1) == 50 and len(l4) == 200
    assert 0.35 < se4 / se1 < 0.7  # about 1/2 for four times the batches


def test_grid_single_point_and_flagging():
    nets = EnsembleNets.build(SPEC, (6,), seed=2)
    curve = grid_search_single_knot(PARAMS, 0.9, [0.2], nets=nets, counts=[16, 16], n_train=3, tol_f=1e-12,
                                    n_batches=3, seed=0)
    assert len(curve) == 1 and curve[0].flagged and curve[0].w == 0.2
    assert np.isfinite(curve[0].mean) and np.isfinite(curve[0].se)


def test_grid_sorted_and_argmin():
    nets = EnsembleNets.build(SPEC, (6,), seed=2)
    curve = grid_search_single_knot(PARAMS, 0.9, [0.3, 0.1, 0.2], nets=nets, counts=[16, 16], n_train=2,
                                    tol_f=np.inf, n_batches=2, seed=0)
    assert [p.w for p in curve] == [0.1, 0.2, 0.3]
    assert not any(p.flagged for p in curve)
    assert curve_argmin(curve).mean == min(p.mean for p in curve)
