"""Equilibrium checks and experiment-reproduction helpers for REC batches."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from mfg_forge.core import EnsembleNets, SampleBatch, simulate_paths, train_fbsde
from mfg_forge.principal import PrincipalConfig, principal_sample_loss
from mfg_forge.rec import PenaltyFunction, RecParams, batch_controls, build_rec_spec, price_path
from mfg_forge.seeds import seed_derivation

log = logging.getLogger(__name__)

DEFAULT_PERCENTILES = (10, 25, 50, 75, 90)
HIST_BINS = 31


def clearing_residual_path(batch: SampleBatch, params: RecParams, S: np.ndarray | None = None) -> np.ndarray:
    """``sum_k pi_k * mean_l Gamma`` at every grid point."""
    if S is None:
        S = price_path(batch, params)
    total = np.zeros(batch.grid.M + 1)
    for k, (_, _, trade) in enumerate(batch_controls(batch, params, S)):
        total += params.pi[k] * trade.mean(axis=0)
    return total


def market_clearing_residual(batch: SampleBatch, params: RecParams, S: np.ndarray | None = None) -> float:
    return float(np.max(np.abs(clearing_residual_path(batch, params, S))))


def price_constancy(batch: SampleBatch, params: RecParams) -> float:
    S = price_path(batch, params)
    return float(np.max(np.abs(S - S[0])))


def terminal_percentiles(batch: SampleBatch, percentiles=DEFAULT_PERCENTILES) -> np.ndarray:
    """``(K, len(percentiles))`` table of terminal inventory quantiles (linear interpolation)."""
    q = np.asarray(percentiles, dtype=np.float64)
    if np.any(q <= 0) or np.any(q >= 100):
        raise ValueError("percentiles must lie strictly between 0 and 100")
    return np.array([np.percentile(x[:, -1, 0], q, method="linear") for x in batch.X])


def control_summaries(batch: SampleBatch, params: RecParams) -> list[dict[str, np.ndarray]]:
    """Per population: mean rates over time and mean cumulative totals.

    Cumulative totals use the trapezoid rule on each path, then average.
    """
    dt = batch.grid.dt
    out = []
    for alpha, g_rent, trade in batch_controls(batch, params):
        row = {}
        for name, rate in (("expansion", alpha), ("rental", g_rent), ("trading", trade)):
            cum = np.zeros_like(rate)
            cum[:, 1:] = np.cumsum(0.5 * dt * (rate[:, 1:] + rate[:, :-1]), axis=1)
            row[f"{name}_rate"] = rate.mean(axis=0)
            row[f"{name}_total"] = cum.mean(axis=0)
        out.append(row)
    return out


def negativity_report(batch: SampleBatch, params: RecParams) -> np.ndarray:
    """Fraction of (sample, timestep) pairs with negative expansion or rental rate."""
    fracs = []
    for alpha, g_rent, _ in batch_controls(batch, params):
        fracs.append(float(np.mean((alpha < 0) | (g_rent < 0))))
    return np.array(fracs)


def terminal_histograms(batch: SampleBatch, bins: int = HIST_BINS) -> list[tuple[np.ndarray, np.ndarray]]:
    """Histogram (counts, edges) of terminal inventory per population on a shared range."""
    allx = np.concatenate([x[:, -1, 0] for x in batch.X])
    edges = np.linspace(allx.min(), allx.max(), bins + 1) if allx.max() > allx.min() else np.linspace(allx.min() - 0.5, allx.min() + 0.5, bins + 1)
    return [(np.histogram(x[:, -1, 0], bins=edges)[0], edges) for x in batch.X]


def evaluate_principal_loss(
    params: RecParams,
    pconfig: PrincipalConfig,
    w,
    nets: EnsembleNets,
    counts,
    n_batches: int,
    seed: int,
) -> tuple[float, float, np.ndarray]:
    """Mean and standard error of the sample principal loss over fresh batches."""
    spec = build_rec_spec(params, PenaltyFunction(0.0, w, pconfig.knots))
    losses = np.array([
        principal_sample_loss(simulate_paths(spec, nets, counts, seed_derivation(seed, f"evalbatch/{b}")), w, pconfig, params)
        for b in range(n_batches)
    ])
    se = float(losses.std(ddof=1) / np.sqrt(n_batches)) if n_batches > 1 else float("nan")
    return float(losses.mean()), se, losses


@dataclass
class GridPoint:
    w: float
    mean: float
    se: float
    fbsde_loss: float
    flagged: bool


# per-point budget: warm starts need less than a cold solve but more than N_F
GRID_STEPS = 1000


def grid_search_single_knot(
    params: RecParams,
    knot: float,
    grid,
    *,
    nets: EnsembleNets,
    counts,
    n_train: int,
    tol_f: float,
    n_batches: int,
    seed: int,
    lr: float = 1e-2,
    lr_hold: int = 1000,
    lr_decay_steps: float | None = 500.0,
    lr_min: float = 3e-4,
) -> list[GridPoint]:
    """Principal-loss curve over single-knot weights.

    The inner problem is re-solved at each weight in ascending order with up
    to ``n_train`` steps, warm-starting from the previous grid point's
    networks. Each point gets a fresh optimizer and restarts the step-size
    schedule; only the first (cold) point keeps the ``lr_hold`` phase. A point
    whose inner training never reaches ``tol_f`` is flagged but still reported.
    """
    pconfig = PrincipalConfig.from_params(params, [knot])
    curve = []
    for i, w in enumerate(np.sort(np.asarray(grid, dtype=np.float64))):
        spec = build_rec_spec(params, PenaltyFunction(0.0, [w], [knot]))
        out = train_fbsde(spec, nets, counts, n_train, tol_f, seed_derivation(seed, f"grid/train/{i}"),
            lr=lr, lr_hold=lr_hold if i == 0 else 0, lr_decay_steps=lr_decay_steps, lr_min=lr_min,
        )
        nets = out.nets
        last = out.history[-1]
        mean, se, _ = evaluate_principal_loss(params, pconfig, [w], nets, counts, n_batches, seed_derivation(seed, f"grid/eval/{i}"))
        flagged = not last < tol_f
        if flagged:
            log.warning("grid point w=%.4f: inner loss %.3e did not reach %.1e", w, last, tol_f)
        curve.append(GridPoint(float(w), mean, se, float(last), flagged))
    return curve


def curve_argmin(curve: list[GridPoint]) -> GridPoint:
    return min(curve, key=lambda p: p.mean)


