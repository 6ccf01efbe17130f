"""Run-directory layout and CSV writers.

Every file here is a pure function of a checkpointed :class:`RunState`
(plus the batch that state regenerates), so re-exporting a checkpoint
reproduces the bundle byte for byte. Floats use 17 significant digits.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from mfg_forge.checkpoint import RunState
from mfg_forge.config import RunConfig, serialize_config
from mfg_forge.core import SampleBatch
from mfg_forge.diagnostics import (
    DEFAULT_PERCENTILES,
    control_summaries,
    market_clearing_residual,
    negativity_report,
    price_constancy,
    terminal_histograms,
    terminal_percentiles,
)
from mfg_forge.errors import CheckpointError
from mfg_forge.principal import psi
from mfg_forge.rec import price_path


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path: Path, header, rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(header)
            for row in rows:
                wr.writerow([fmt(v) for v in row])
    except OSError as exc:
        raise CheckpointError(f"cannot write {path}: {exc.strerror}") from None


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64).reshape(len(rows) - 1, len(rows[0]))


def write_trajectories(out: Path, state: RunState) -> None:
    n = state.n_knots
    ucols = [f"u_{i + 1}" for i in range(n)] + [f"w_{i + 1}" for i in range(n)]
    write_csv(out / "u_trajectory.csv", ["step", *ucols],
              ([s, *u, *psi(u)] for s, u in enumerate(state.u_trajectory)))
    write_csv(out / "principal_loss.csv", ["outer_step", "incumbent_loss", "surrogate_prediction"],
              ([int(r[0]), r[1], r[2]] for r in state.principal_trajectory))
    write_csv(out / "candidate_fbsde.csv", ["outer_step", "candidate", "iterations", "final_loss"],
              ([int(r[0]), int(r[1]), int(r[2]), r[3]] for r in state.fbsde_trajectory))
    write_csv(out / "fbsde_loss.csv", ["iteration", "loss"], enumerate(state.final_fbsde_history))
    write_csv(out / "buffer.csv", ["index", "outer_step", "loss", *(f"u_{i + 1}" for i in range(n))],
              ([i, int(s), l, *u] for i, (u, l, s) in enumerate(zip(state.buffer_u, state.buffer_loss, state.buffer_step))))


def write_batch_files(out: Path, cfg: RunConfig, batch: SampleBatch) -> dict:
    """Price path, per-population controls and inventories, percentiles, histograms.

    Returns the scalar diagnostics for the summary.
    """
    params = cfg.params
    ts = batch.grid.points
    S = price_path(batch, params)
    write_csv(out / "price_path.csv", ["step", "t", "S"], ([m, ts[m], S[m]] for m in range(len(ts))))
    for k, summ in enumerate(control_summaries(batch, params)):
        cols = ["expansion_rate", "expansion_total", "rental_rate", "rental_total", "trading_rate", "trading_total"]
        write_csv(out / f"controls_{k + 1}.csv", ["step", "t", *cols],
                  ([m, ts[m], *(summ[c][m] for c in cols)] for m in range(len(ts))))
        write_csv(out / f"terminal_inventory_{k + 1}.csv", ["sample", "x_T"], enumerate(batch.X[k][:, -1, 0]))
    pct = terminal_percentiles(batch, DEFAULT_PERCENTILES)
    write_csv(out / "percentiles.csv", ["population", *(f"p{q}" for q in DEFAULT_PERCENTILES)],
              ([k + 1, *pct[k]] for k in range(batch.K)))
    hist_rows = []
    for k, (counts, edges) in enumerate(terminal_histograms(batch)):
        hist_rows += [[k + 1, b, edges[b], edges[b + 1], int(c)] for b, c in enumerate(counts)]
    write_csv(out / "terminal_histogram.csv", ["population", "bin", "left", "right", "count"], hist_rows)
    return batch_diagnostics(cfg, batch)


def batch_diagnostics(cfg: RunConfig, batch: SampleBatch) -> dict:
    pct = terminal_percentiles(batch, DEFAULT_PERCENTILES)
    return {
        "clearing_residual": market_clearing_residual(batch, cfg.params),
        "price_deviation": price_constancy(batch, cfg.params),
        "negativity": negativity_report(batch, cfg.params),
        "median_x_T": pct[:, DEFAULT_PERCENTILES.index(50)],
    }


def summary_text(cfg: RunConfig, state: RunState, diag: dict, runtimes: dict | None = None) -> str:
    losses = state.final_losses
    mean = float(losses.mean()) if len(losses) else float("nan")
    se = float(losses.std(ddof=1) / np.sqrt(len(losses))) if len(losses) > 1 else float("nan")
    last = state.final_fbsde_history[-1] if len(state.final_fbsde_history) else float("nan")

    def vec(a):
        return "[" + ", ".join(fmt(x) for x in np.ravel(a)) + "]"

    lines = [
        f"phase = {state.phase}",
        f"outer_steps = {state.outer_step}",
        f"principal_steps = {state.j}",
        f"knots = {vec(cfg.knots)}",
        f"u = {vec(state.u)}",
        f"w = {vec(psi(state.u))}",
        f"phi0 = {fmt(state.phi0)}",
        f"loss_mean = {fmt(mean)}",
        f"loss_se = {fmt(se)}",
        f"loss_batches = {len(losses)}",
        f"final_fbsde_loss = {fmt(last)}",
        f"final_fbsde_iterations = {len(state.final_fbsde_history)}",
        f"clearing_residual = {fmt(diag['clearing_residual'])}",
        f"price_deviation = {fmt(diag['price_deviation'])}",
        f"negativity = {vec(diag['negativity'])}",
        f"median_x_T = {vec(diag['median_x_T'])}",
    ]
    for key in sorted(runtimes or {}):
        lines.append(f"runtime_{key} = {runtimes[key]:.3f}")
    return "\n".join(lines) + "\n"


def write_bundle(out, cfg: RunConfig, state: RunState, batch: SampleBatch, runtimes: dict | None = None) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.cfg").write_text(serialize_config(cfg))
    except OSError as exc:
        raise CheckpointError(f"cannot write to output directory {out}: {exc.strerror}") from None
    write_trajectories(out, state)
    diag = write_batch_files(out, cfg, batch)
    try:
        (out / "summary").write_text(summary_text(cfg, state, diag, runtimes))
    except OSError as exc:
        raise CheckpointError(f"cannot write {out / 'summary'}: {exc.strerror}") from None
    return out
