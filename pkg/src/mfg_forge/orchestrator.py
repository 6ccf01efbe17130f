"""The outer principal-agent loop with checkpointing and resume.

Every random draw comes from a labelled stream of the master seed, so a run
resumed from a checkpoint follows the same path as an uninterrupted one:

    ball/<n>          candidate sampling at outer step n
    inner/<n>/<i>     inner training of candidate i
    eval/<n>/<i>      fresh batch for that candidate's principal loss
    surrogate/<n>     surrogate minibatches
    final/train, final/eval, final/0   last inner solve, evaluation, export batch
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from mfg_forge.autodiff.adam import AdamState
from mfg_forge.checkpoint import RunState, checkpoint_load, checkpoint_save
from mfg_forge.config import RunConfig, parse_config_text, serialize_config
from mfg_forge.core import EnsembleNets, SampleBatch, simulate_paths, train_fbsde
from mfg_forge.diagnostics import evaluate_principal_loss
from mfg_forge.errors import CheckpointError, ContractError, NumericalError
from mfg_forge.principal import (
    MemoryBuffer,
    agent_value_estimate,
    epsilon_update,
    phi0_recover,
    principal_grad_step,
    principal_sample_loss,
    psi,
    psi_inverse,
    sample_ball,
    surrogate_fit,
    surrogate_init,
    surrogate_predict,
    surrogate_spec,
)
from mfg_forge.rec import PenaltyFunction, build_rec_spec
from mfg_forge.seeds import seed_derivation

log = logging.getLogger(__name__)

THREADS_ENV = "MFG_FORGE_THREADS"


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ContractError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


@dataclass
class RunResult:
    u: np.ndarray
    w: np.ndarray
    phi0: float
    loss_mean: float
    loss_se: float
    fbsde_history: np.ndarray
    u_trajectory: np.ndarray
    principal_trajectory: np.ndarray
    fbsde_trajectory: np.ndarray
    state: RunState
    final_batch: SampleBatch | None = None
    runtimes: dict = field(default_factory=dict)

    @property
    def outer_steps(self) -> int:
        return self.state.outer_step


def _penalty_spec(cfg: RunConfig, w):
    return build_rec_spec(cfg.params, PenaltyFunction(0.0, w, cfg.knots))


def _train(cfg: RunConfig, spec, theta, slots, adam, n_steps, seed):
    a = cfg.algo
    nets = EnsembleNets(theta, slots, cfg.params.K, cfg.params.M)
    return train_fbsde(
        spec, nets, cfg.counts, n_steps, a.TOL_F, seed,
        lr=a.lr_inner, lr_hold=a.lr_inner_hold, lr_decay_steps=a.lr_inner_decay_steps, lr_min=a.lr_inner_min, adam=adam,
    )


def initial_state(cfg: RunConfig) -> tuple[RunState, dict]:
    """Fresh state for ``cfg``; also returns the network slot table."""
    a = cfg.algo
    spec = _penalty_spec(cfg, psi(cfg.u0))
    nets = EnsembleNets.build(spec, cfg.hidden, cfg.activation, seed=seed_derivation(a.seed, "nets"))
    sspec = surrogate_spec(cfg.n_knots, cfg.hidden, cfg.activation, seed_derivation(a.seed, "surrogate/init"))
    upsilon = surrogate_init(sspec)
    state = RunState(
        config_text=serialize_config(cfg),
        n_knots=cfg.n_knots,
        eps=a.eps0,
        u=cfg.u0.copy(),
        upsilon=upsilon,
        theta=nets.theta,
        adam_inner=AdamState.zeros(len(nets.theta), lr=a.lr_inner),
        adam_u=AdamState.zeros(cfg.n_knots, lr=a.lr_principal),
        adam_upsilon=AdamState.zeros(len(upsilon), lr=a.lr_surrogate),
        u_trajectory=cfg.u0[None, :].copy(),
    )
    return state, nets.slots


def slots_for(cfg: RunConfig) -> dict:
    spec = _penalty_spec(cfg, psi(cfg.u0))
    return EnsembleNets.build(spec, cfg.hidden, cfg.activation, zero=True).slots


def _buffer_from(state: RunState, capacity: int) -> MemoryBuffer:
    buf = MemoryBuffer(capacity)
    for u, loss, step in zip(state.buffer_u, state.buffer_loss, state.buffer_step):
        buf.add(u, loss, step)
    buf.inserted = state.buffer_inserted
    return buf


def _evaluate_candidate(cfg, slots, theta, adam, u, n, i):
    """Train the inner problem at ``psi(u)`` and score it on a fresh batch."""
    w = psi(u)
    spec = _penalty_spec(cfg, w)
    out = _train(cfg, spec, theta, slots, adam, cfg.algo.N_F, seed_derivation(cfg.algo.seed, f"inner/{n}/{i}"))
    batch = simulate_paths(spec, out.nets, cfg.counts, seed_derivation(cfg.algo.seed, f"eval/{n}/{i}"))
    loss = principal_sample_loss(batch, w, cfg.principal(), cfg.params)
    if not np.isfinite(loss):
        raise NumericalError(f"principal loss is not finite for candidate {i} at outer step {n}")
    return out, loss


def outer_step(cfg: RunConfig, state: RunState, slots: dict, *, parallel: bool = False) -> bool:
    """One pass of the outer loop. Mutates ``state``; returns True when the stopping rule fires."""
    a = cfg.algo
    n = state.outer_step
    buf = _buffer_from(state, a.buffer_capacity)
    cands = sample_ball(state.u, state.eps, a.N_S, seed_derivation(a.seed, f"ball/{n}"))
    rows = []
    incumbent_loss = np.nan

    def record(i, out, loss):
        nonlocal incumbent_loss
        buf.add(cands[i], loss, n)
        rows.append([n, i, len(out.history), out.history[-1]])
        if i == 0:
            incumbent_loss = loss

    if parallel:
        theta0, adam0 = state.theta, state.adam_inner

        def job(i):
            try:
                return _evaluate_candidate(cfg, slots, theta0.copy(), replace(adam0), cands[i], n, i)
            except NumericalError as exc:
                return exc

        with ThreadPoolExecutor(max_workers=worker_count()) as pool:
            results = list(pool.map(job, range(len(cands))))
        for i, res in enumerate(results):
            if isinstance(res, NumericalError):
                log.warning("outer step %d: candidate %d skipped (%s)", n, i, res)
                continue
            out, loss = res
            record(i, out, loss)
            if i == 0:
                state.theta, state.adam_inner = out.nets.theta, out.adam
    else:
        for i, u in enumerate(cands):
            try:
                out, loss = _evaluate_candidate(cfg, slots, state.theta, state.adam_inner, u, n, i)
            except NumericalError as exc:
                log.warning("outer step %d: candidate %d skipped (%s)", n, i, exc)
                continue
            record(i, out, loss)
            state.theta, state.adam_inner = out.nets.theta, out.adam
    if not rows:
        raise NumericalError(f"every candidate at outer step {n} failed in inner training")

    sspec = surrogate_spec(cfg.n_knots, cfg.hidden, cfg.activation)
    if not state.fitted:
        # start the output bias at the buffer mean so early fits chase shape, not level
        state.upsilon = state.upsilon.copy()
        state.upsilon[-1] = float(np.mean(buf.arrays()[1]))
        state.fitted = True
    state.upsilon, state.adam_upsilon = surrogate_fit(
        buf, state.upsilon, sspec, a.N_A, a.N_B, seed_derivation(a.seed, f"surrogate/{n}"), adam=state.adam_upsilon
    )
    u_prev = state.u.copy()
    if a.N_P > 0:
        state.u, state.adam_u, _ = principal_grad_step(state.upsilon, sspec, state.u, a.N_P, adam=state.adam_u)
    state.j += a.N_P
    state.eps = epsilon_update(state.eps, n, decay=a.eps_decay, eps_min=a.eps_min)
    pred = float(surrogate_predict(state.upsilon, sspec, state.u)[0])

    state.buffer_u, state.buffer_loss = buf.arrays()
    state.buffer_u = state.buffer_u.reshape(len(buf), cfg.n_knots)
    state.buffer_step = np.array([r.step for r in buf], dtype=np.int64)
    state.buffer_inserted = buf.inserted
    state.u_trajectory = np.vstack([state.u_trajectory, state.u[None, :]])
    state.principal_trajectory = np.vstack([state.principal_trajectory, [[n, incumbent_loss, pred]]])
    state.fbsde_trajectory = np.vstack([state.fbsde_trajectory, np.array(rows, dtype=np.float64)])
    state.outer_step = n + 1
    return bool(np.linalg.norm(state.u - u_prev) < a.TOL)


def finalize(cfg: RunConfig, state: RunState, slots: dict) -> SampleBatch:
    """Inner solve at the final weights, loss estimate over fresh batches, offset recovery."""
    a = cfg.algo
    w = psi(state.u)
    spec = _penalty_spec(cfg, w)
    out = _train(cfg, spec, state.theta, slots, state.adam_inner, a.N_F, seed_derivation(a.seed, "final/train"))
    state.theta, state.adam_inner = out.nets.theta, out.adam
    state.final_fbsde_history = np.asarray(out.history, dtype=np.float64)
    _, _, losses = evaluate_principal_loss(
        cfg.params, cfg.principal(), w, out.nets, cfg.counts, a.N_eval, seed_derivation(a.seed, "final/eval")
    )
    state.final_losses = losses
    batch = final_batch(cfg, state, slots)
    state.phi0 = phi0_recover(agent_value_estimate(batch, PenaltyFunction(0.0, w, cfg.knots), cfg.params), cfg.principal())
    state.phase = "finished"
    return batch


def final_batch(cfg: RunConfig, state: RunState, slots: dict) -> SampleBatch:
    spec = _penalty_spec(cfg, psi(state.u))
    nets = EnsembleNets(state.theta, slots, cfg.params.K, cfg.params.M)
    return simulate_paths(spec, nets, cfg.counts, seed_derivation(cfg.algo.seed, "final/0"))


def result_from_state(cfg: RunConfig, state: RunState, batch: SampleBatch | None = None, runtimes=None) -> RunResult:
    losses = state.final_losses
    mean = float(losses.mean()) if len(losses) else float("nan")
    se = float(losses.std(ddof=1) / np.sqrt(len(losses))) if len(losses) > 1 else float("nan")
    return RunResult(
        u=state.u.copy(),
        w=psi(state.u),
        phi0=state.phi0,
        loss_mean=mean,
        loss_se=se,
        fbsde_history=state.final_fbsde_history,
        u_trajectory=state.u_trajectory,
        principal_trajectory=state.principal_trajectory,
        fbsde_trajectory=state.fbsde_trajectory,
        state=state,
        final_batch=batch,
        runtimes=dict(runtimes or {}),
    )


def checkpoint_path(out_dir, step: int | None) -> Path:
    name = "final.ckpt" if step is None else f"step_{step:05d}.ckpt"
    return Path(out_dir) / "checkpoints" / name


def run_pa_optimization(
    cfg: RunConfig,
    out_dir=None,
    *,
    resume: RunState | None = None,
    parallel: bool = False,
    stop_after: int | None = None,
) -> RunResult:
    """Run the outer loop to its stopping rule (or ``N_O`` steps) and finalize.

    ``resume`` continues from a checkpointed state of the same configuration.
    ``stop_after`` halts after that many outer steps in total without
    finalizing, which is how interrupted runs are produced in tests.
    """
    t0 = time.perf_counter()
    slots = slots_for(cfg)
    if resume is not None:
        if resume.config_text != serialize_config(cfg):
            raise CheckpointError("checkpoint was written for a different configuration")
        state = resume
    else:
        state, _ = initial_state(cfg)
    a = cfg.algo
    while state.phase == "running" and state.outer_step < a.N_O:
        if stop_after is not None and state.outer_step >= stop_after:
            break
        stop = outer_step(cfg, state, slots, parallel=parallel)
        n = state.outer_step
        log.info("outer step %d: u=%s eps=%.4g", n, np.array2string(state.u, precision=4), state.eps)
        if stop:
            state.phase = "stopped"
        if out_dir is not None and (n % a.checkpoint_every == 0 or stop):
            checkpoint_save(state, checkpoint_path(out_dir, n))
    if state.phase == "running" and state.outer_step >= a.N_O:
        state.phase = "stopped"
    t_outer = time.perf_counter() - t0
    batch = None
    if state.phase == "stopped":
        batch = finalize(cfg, state, slots)
        if out_dir is not None:
            checkpoint_save(state, checkpoint_path(out_dir, None))
    elif state.phase == "finished":
        batch = final_batch(cfg, state, slots)
    runtimes = {"outer_seconds": t_outer, "total_seconds": time.perf_counter() - t0}
    return result_from_state(cfg, state, batch, runtimes)


def load_run(path) -> tuple[RunConfig, RunState]:
    state = checkpoint_load(path)
    return parse_config_text(state.config_text, f"{path} (embedded config)"), state


@dataclass
class InnerResult:
    history: np.ndarray
    nets: EnsembleNets
    batch: SampleBatch
    w: np.ndarray
    state: RunState


SOLVE_INNER_STEPS = 2000


def solve_inner(cfg: RunConfig, w=None, n_steps: int = SOLVE_INNER_STEPS) -> InnerResult:
    """Inner training only, at fixed weights (``cfg.w0`` by default).

    A cold start needs far more than the per-visit ``N_F`` budget, so the
    step budget is separate; training still stops early at ``TOL_F``.
    """
    a = cfg.algo
    state, slots = initial_state(cfg)
    state.u = psi_inverse(cfg.w0 if w is None else np.asarray(w, dtype=np.float64))
    # round-trip through u so a re-export from the checkpoint sees the same weights
    w = psi(state.u)
    spec = _penalty_spec(cfg, w)
    out = _train(cfg, spec, state.theta, slots, state.adam_inner, n_steps, seed_derivation(a.seed, "solve/train"))
    state.theta, state.adam_inner = out.nets.theta, out.adam
    state.final_fbsde_history = np.asarray(out.history, dtype=np.float64)
    state.phase = "finished"
    batch = final_batch(cfg, state, slots)
    state.phi0 = phi0_recover(agent_value_estimate(batch, PenaltyFunction(0.0, w, cfg.knots), cfg.params), cfg.principal())
    return InnerResult(state.final_fbsde_history, out.nets, batch, w, state)
