"""``mfg-forge`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure,
3 I/O error (missing files, unreadable or corrupt checkpoints).
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from mfg_forge.checkpoint import checkpoint_save
from mfg_forge.config import knot_grid, parse_config, with_overrides
from mfg_forge.core import EnsembleNets
from mfg_forge.diagnostics import GRID_STEPS, curve_argmin, grid_search_single_knot
from mfg_forge.errors import CheckpointError, ConfigError, ContractError, NumericalError
from mfg_forge.export import batch_diagnostics, fmt, write_bundle, write_csv
from mfg_forge.orchestrator import (
    SOLVE_INNER_STEPS,
    checkpoint_path,
    final_batch,
    load_run,
    run_pa_optimization,
    slots_for,
    solve_inner,
)
from mfg_forge.rec import PenaltyFunction, build_rec_spec
from mfg_forge.seeds import seed_derivation

log = logging.getLogger("mfg_forge")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", metavar="PATH", required=config_required, help="run configuration file")
    p.add_argument("--seed", type=int, metavar="N", help="override the master seed")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--knots", metavar="START:STEP:COUNT", help="override the knot grid")
    p.add_argument("--quiet", action="store_true", help="only log warnings and errors")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mfg-forge", description="Principal-agent mean-field game solver for REC markets.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("optimize", help="full outer optimization of the penalty weights")
    _common(p, config_required=False)
    p.add_argument("--resume", metavar="PATH", help="continue from a checkpoint")
    p.add_argument("--parallel", action="store_true", help="evaluate ball candidates concurrently")
    p.add_argument("--timings", action="store_true", help="record wall-clock runtimes in the summary")

    p = sub.add_parser("solve-inner", help="inner training at the configured initial weights")
    _common(p)
    p.add_argument("--w", metavar="W", help="comma-separated weights (default: config w0)")
    p.add_argument("--steps", type=int, default=SOLVE_INNER_STEPS, metavar="N",
                   help=f"training step budget (default {SOLVE_INNER_STEPS}; stops early at TOL_F)")
    p.add_argument("--timings", action="store_true", help="record wall-clock runtimes in the summary")

    p = sub.add_parser("grid-search", help="single-knot principal loss curve")
    _common(p)
    p.add_argument("--grid", metavar="START:STEP:COUNT", default="0.05:0.025:15", help="weights to evaluate")
    p.add_argument("--batches", type=int, default=100, metavar="N", help="fresh batches per grid point")
    p.add_argument("--steps", type=int, default=GRID_STEPS, metavar="N",
                   help=f"training step budget per grid point (default {GRID_STEPS}; stops early at TOL_F)")

    p = sub.add_parser("diagnose", help="equilibrium checks on a checkpoint")
    p.add_argument("checkpoint", metavar="CHECKPOINT")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("export", help="re-emit the CSV bundle from a checkpoint")
    p.add_argument("checkpoint", metavar="CHECKPOINT")
    p.add_argument("--out", metavar="DIR", required=True)
    p.add_argument("--quiet", action="store_true")
    return parser


def _load_cfg(args):
    cfg = parse_config(args.config)
    knots = knot_grid(args.knots) if getattr(args, "knots", None) else None
    return with_overrides(cfg, seed=args.seed, knots=knots)


def _need_out(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command}: --out DIR is required")
    return Path(args.out)


def cmd_optimize(args) -> int:
    out = _need_out(args)
    resume = None
    if args.resume:
        cfg, resume = load_run(args.resume)
        if args.config or args.seed is not None or args.knots:
            log.warning("--resume uses the configuration stored in the checkpoint; --config/--seed/--knots ignored")
    elif args.config:
        cfg = _load_cfg(args)
    else:
        raise UsageError("optimize: one of --config or --resume is required")
    res = run_pa_optimization(cfg, out, resume=resume, parallel=args.parallel)
    write_bundle(out, cfg, res.state, res.final_batch, res.runtimes if args.timings else None)
    print(f"w = {np.array2string(res.w, precision=4)}  loss = {res.loss_mean:.4f} +/- {res.loss_se:.4f}  phi0 = {res.phi0:.4f}")
    return EXIT_OK


def cmd_solve_inner(args) -> int:
    out = _need_out(args)
    cfg = _load_cfg(args)
    w = None
    if args.w:
        try:
            w = np.array([float(t) for t in args.w.split(",")])
        except ValueError:
            raise UsageError(f"--w: cannot parse {args.w!r}") from None
        if len(w) != cfg.n_knots:
            raise UsageError(f"--w has {len(w)} entries, config has {cfg.n_knots} knots")
    t0 = time.perf_counter()
    if args.steps < 1:
        raise UsageError("--steps must be at least 1")
    res = solve_inner(cfg, w, args.steps)
    runtimes = {"total_seconds": time.perf_counter() - t0} if args.timings else None
    checkpoint_save(res.state, checkpoint_path(out, None))
    write_bundle(out, cfg, res.state, res.batch, runtimes)
    last = res.history[-1]
    print(f"iterations = {len(res.history)}  final loss = {last:.3e}  (TOL_F = {cfg.algo.TOL_F:g})")
    return EXIT_OK


def cmd_grid_search(args) -> int:
    out = _need_out(args)
    cfg = _load_cfg(args)
    if cfg.n_knots != 1:
        raise ConfigError(f"grid-search needs a single knot, config has {cfg.n_knots}")
    grid = knot_grid(args.grid)
    if args.batches < 2:
        raise UsageError("--batches must be at least 2 for a standard error")
    if args.steps < 1:
        raise UsageError("--steps must be at least 1")
    a = cfg.algo
    spec = build_rec_spec(cfg.params, PenaltyFunction(0.0, [grid[0]], cfg.knots))
    nets = EnsembleNets.build(spec, cfg.hidden, cfg.activation, seed=seed_derivation(a.seed, "nets"))
    curve = grid_search_single_knot(
        cfg.params, float(cfg.knots[0]), grid, nets=nets, counts=cfg.counts, n_train=args.steps, tol_f=a.TOL_F,
        n_batches=args.batches, seed=a.seed,
        lr=a.lr_inner, lr_hold=a.lr_inner_hold, lr_decay_steps=a.lr_inner_decay_steps, lr_min=a.lr_inner_min,
    )
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "grid_search.csv", ["w", "loss_mean", "loss_se", "fbsde_loss", "flagged"],
              ([p.w, p.mean, p.se, p.fbsde_loss, int(p.flagged)] for p in curve))
    best = curve_argmin(curve)
    print(f"minimum at w = {best.w:.4f}: loss = {best.mean:.4f} +/- {best.se:.4f}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    cfg, state = load_run(args.checkpoint)
    batch = final_batch(cfg, state, slots_for(cfg))
    diag = batch_diagnostics(cfg, batch)
    print(f"phase = {state.phase}, outer steps = {state.outer_step}")
    print(f"clearing residual = {fmt(diag['clearing_residual'])}")
    print(f"price deviation = {fmt(diag['price_deviation'])}")
    for k, (neg, med) in enumerate(zip(diag["negativity"], diag["median_x_T"])):
        print(f"population {k + 1}: median X_T = {med:.4f}, negative-control fraction = {neg:.4f}")
    return EXIT_OK


def cmd_export(args) -> int:
    cfg, state = load_run(args.checkpoint)
    batch = final_batch(cfg, state, slots_for(cfg))
    write_bundle(Path(args.out), cfg, state, batch)
    return EXIT_OK


COMMANDS = {
    "optimize": cmd_optimize,
    "solve-inner": cmd_solve_inner,
    "grid-search": cmd_grid_search,
    "diagnose": cmd_diagnose,
    "export": cmd_export,
}


def cli_main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ContractError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
