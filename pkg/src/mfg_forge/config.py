"""Run configuration: sectioned ``key = value`` text files.

Layout::

    [compliance]   dt, T, K, lambda, R0, eta_is_std
    [population.k] pi, h, sigma, zeta, gamma, beta, v, eta    (k = 1..K)
    [knots]        R = [...], w0 = [...]
    [algo]         N_O, N_S, N_F, N_A, N_P, N_B, N_paths, N_eval, TOL, TOL_F,
                   eps0, eps_decay, eps_min, lr_inner, lr_inner_hold, lr_inner_decay_steps,
                   lr_inner_min, lr_surrogate, lr_principal, buffer_capacity, checkpoint_every, seed
    [nets]         hidden, activation

Numbers accept ``a/b`` fractions; lists are bracketed and comma separated.
Floats are written with 17 significant digits so files round-trip exactly.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from mfg_forge.autodiff.nn import ACTIVATIONS
from mfg_forge.errors import ConfigError
from mfg_forge.principal import PrincipalConfig, psi_inverse
from mfg_forge.rec import RecParams

POP_KEYS = ("pi", "h", "sigma", "zeta", "gamma", "beta", "v", "eta")
COMPLIANCE_KEYS = ("dt", "T", "K", "lambda", "R0", "eta_is_std")
KNOT_KEYS = ("R", "w0")
NET_KEYS = ("hidden", "activation")


@dataclass
class AlgoConfig:
    N_O: int = 200
    N_S: int = 16
    N_F: int = 200
    N_A: int = 100
    N_P: int = 5
    N_B: int = 64
    N_paths: tuple[int, ...] = (512,)
    N_eval: int = 10
    TOL: float = 1e-3
    TOL_F: float = 1e-3
    eps0: float = 0.5
    eps_decay: float = 0.95
    eps_min: float | None = None
    lr_inner: float = 1e-2
    lr_inner_hold: int = 1000
    lr_inner_decay_steps: float = 500.0
    lr_inner_min: float = 3e-4
    lr_surrogate: float = 1e-3
    lr_principal: float = 1e-2
    buffer_capacity: int = 2048
    checkpoint_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.eps_min is None:
            self.eps_min = 0.01 * self.eps0


ALGO_INT = ("N_O", "N_S", "N_F", "N_A", "N_P", "N_B", "N_eval", "lr_inner_hold", "buffer_capacity", "checkpoint_every", "seed")
ALGO_FLOAT = ("TOL", "TOL_F", "eps0", "eps_decay", "eps_min", "lr_inner", "lr_inner_decay_steps", "lr_inner_min", "lr_surrogate", "lr_principal")


@dataclass
class RunConfig:
    params: RecParams
    knots: np.ndarray
    w0: np.ndarray
    algo: AlgoConfig = field(default_factory=AlgoConfig)
    hidden: tuple[int, ...] = (32, 32)
    activation: str = "tanh"

    def __post_init__(self):
        self.knots = np.atleast_1d(np.asarray(self.knots, dtype=np.float64))
        self.w0 = np.broadcast_to(np.asarray(self.w0, dtype=np.float64), self.knots.shape).copy()
        self.validate()

    @property
    def n_knots(self) -> int:
        return len(self.knots)

    @property
    def counts(self) -> tuple[int, ...]:
        n = self.algo.N_paths
        if len(n) == 1:
            return tuple(n) * self.params.K
        return tuple(n)

    @property
    def u0(self) -> np.ndarray:
        return psi_inverse(self.w0)

    def principal(self) -> PrincipalConfig:
        return PrincipalConfig.from_params(self.params, self.knots)

    def validate(self) -> None:
        a = self.algo
        for name in ("N_O", "N_S", "N_F", "N_A", "N_B", "N_eval", "buffer_capacity", "checkpoint_every"):
            if getattr(a, name) < 1:
                raise ConfigError(f"algo.{name} must be >= 1")
        if a.N_P < 0:
            raise ConfigError("algo.N_P must be >= 0")
        if a.N_S < self.n_knots:
            raise ConfigError(f"algo.N_S={a.N_S} must be at least the number of knots ({self.n_knots})")
        if not (a.TOL > 0 and a.TOL_F > 0):
            raise ConfigError("TOL and TOL_F must be positive")
        if not a.eps0 > 0 or not (0 < a.eps_decay <= 1) or a.eps_min < 0:
            raise ConfigError("eps0 > 0, 0 < eps_decay <= 1 and eps_min >= 0 required")
        if a.lr_inner_hold < 0:
            raise ConfigError("algo.lr_inner_hold must be >= 0")
        if a.lr_inner_decay_steps < 0:
            raise ConfigError("algo.lr_inner_decay_steps must be >= 0 (0 keeps the rate constant)")
        for name in ("lr_inner", "lr_inner_min", "lr_surrogate", "lr_principal"):
            if not getattr(a, name) > 0:
                raise ConfigError(f"algo.{name} must be positive")
        if len(a.N_paths) not in (1, self.params.K) or any(n < 1 for n in a.N_paths):
            raise ConfigError(f"N_paths needs 1 or K={self.params.K} positive entries")
        if np.any(np.diff(self.knots) <= 0):
            raise ConfigError("knots R must be strictly increasing")
        if np.any(self.w0 <= 0):
            raise ConfigError("initial weights w0 must be positive")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"nets.activation must be one of {ACTIVATIONS}")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError("nets.hidden must be a non-empty list of positive widths")

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and serialize_config(self) == serialize_config(other)


# -- value parsing ---------------------------------------------------------
def _num(text: str, key: str) -> float:
    s = text.strip()
    try:
        if "/" in s:
            a, b = s.split("/", 1)
            return float(a) / float(b)
        return float(s)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"{key}: cannot parse number {text!r}") from None


def _int(text: str, key: str) -> int:
    v = _num(text, key)
    if v != int(v):
        raise ConfigError(f"{key}: expected an integer, got {text!r}")
    return int(v)


def _list(text: str, key: str) -> list[str]:
    s = text.strip()
    if s.startswith("[") and s.endswith("]"):
        s = s[1:-1]
    return [p for p in (t.strip() for t in s.split(",")) if p]


def _bool(text: str, key: str) -> bool:
    s = text.strip().lower()
    if s in ("true", "yes", "1"):
        return True
    if s in ("false", "no", "0"):
        return False
    raise ConfigError(f"{key}: expected true/false, got {text!r}")


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _fmt_list(xs) -> str:
    return "[" + ", ".join(_fmt(x) for x in xs) + "]"


def knot_grid(spec: str) -> np.ndarray:
    """``start:step:count`` -> evenly spaced knots."""
    try:
        start, step, count = spec.split(":")
        return float(start) + float(step) * np.arange(int(count))
    except ValueError:
        raise ConfigError(f"knots: expected start:step:count, got {spec!r}") from None


def parse_config_text(text: str, source: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None

    sections = cp.sections()
    for s in sections:
        if s not in ("compliance", "knots", "algo", "nets") and not s.startswith("population."):
            raise ConfigError(f"unknown section [{s}]")
    if "compliance" not in cp:
        raise ConfigError("missing [compliance] section")

    comp = cp["compliance"]
    for key in comp:
        if key not in COMPLIANCE_KEYS:
            raise ConfigError(f"unknown key compliance.{key}")
    K = _int(comp.get("K", "0"), "compliance.K")
    pops = sorted((s for s in sections if s.startswith("population.")), key=lambda s: s.split(".", 1)[1])
    if K and len(pops) != K:
        raise ConfigError(f"compliance.K={K} but {len(pops)} [population.k] sections found")
    if not pops:
        raise ConfigError("no [population.k] sections")
    expected = [f"population.{i + 1}" for i in range(len(pops))]
    if sorted(pops) != sorted(expected):
        raise ConfigError(f"population sections must be numbered 1..K, got {pops}")
    pop_vals = {key: [] for key in POP_KEYS}
    for name in expected:
        sec = cp[name]
        for key in sec:
            if key not in POP_KEYS:
                raise ConfigError(f"unknown key {name}.{key}")
        for key in POP_KEYS:
            if key not in sec:
                raise ConfigError(f"missing key {name}.{key}")
            pop_vals[key].append(_num(sec[key], f"{name}.{key}"))

    for key in ("dt", "T", "lambda", "R0"):
        if key not in comp:
            raise ConfigError(f"missing key compliance.{key}")
    params = RecParams(
        **pop_vals,
        T=_num(comp["T"], "compliance.T"),
        dt=_num(comp["dt"], "compliance.dt"),
        lam=_num(comp["lambda"], "compliance.lambda"),
        R0=_num(comp["R0"], "compliance.R0"),
        eta_is_std=_bool(comp.get("eta_is_std", "false"), "compliance.eta_is_std"),
    )

    if "knots" not in cp or "R" not in cp["knots"]:
        raise ConfigError("missing key knots.R")
    for key in cp["knots"]:
        if key not in KNOT_KEYS:
            raise ConfigError(f"unknown key knots.{key}")
    kraw = cp["knots"]["R"].strip()
    if ":" in kraw and not kraw.startswith("["):
        knots = knot_grid(kraw)
    else:
        knots = np.array([_num(t, "knots.R") for t in _list(kraw, "knots.R")])
    if "w0" in cp["knots"]:
        w0 = np.array([_num(t, "knots.w0") for t in _list(cp["knots"]["w0"], "knots.w0")])
        if len(w0) == 1:
            w0 = np.full(len(knots), w0[0])
        if len(w0) != len(knots):
            raise ConfigError(f"knots.w0 has {len(w0)} entries, expected {len(knots)}")
    else:
        w0 = np.full(len(knots), 0.1)

    algo_kw = {}
    if "algo" in cp:
        for key, raw in cp["algo"].items():
            if key in ALGO_INT:
                algo_kw[key] = _int(raw, f"algo.{key}")
            elif key in ALGO_FLOAT:
                algo_kw[key] = _num(raw, f"algo.{key}")
            elif key == "N_paths":
                algo_kw[key] = tuple(_int(t, "algo.N_paths") for t in _list(raw, "algo.N_paths"))
            else:
                raise ConfigError(f"unknown key algo.{key}")
    algo = AlgoConfig(**algo_kw)

    hidden, activation = (32, 32), "tanh"
    if "nets" in cp:
        for key in cp["nets"]:
            if key not in NET_KEYS:
                raise ConfigError(f"unknown key nets.{key}")
        if "hidden" in cp["nets"]:
            hidden = tuple(_int(t, "nets.hidden") for t in _list(cp["nets"]["hidden"], "nets.hidden"))
        activation = cp["nets"].get("activation", activation).strip()

    return RunConfig(params, knots, w0, algo, hidden, activation)


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config file {path}: {exc.strerror}") from None
    return parse_config_text(text, str(path))


def serialize_config(cfg: RunConfig) -> str:
    p = cfg.params
    lines = [
        "[compliance]",
        f"dt = {_fmt(p.dt)}",
        f"T = {_fmt(p.T)}",
        f"K = {p.K}",
        f"lambda = {_fmt(p.lam)}",
        f"R0 = {_fmt(p.R0)}",
        f"eta_is_std = {'true' if p.eta_is_std else 'false'}",
        "",
    ]
    for k in range(p.K):
        lines.append(f"[population.{k + 1}]")
        for key in POP_KEYS:
            lines.append(f"{key} = {_fmt(getattr(p, key)[k])}")
        lines.append("")
    lines += ["[knots]", f"R = {_fmt_list(cfg.knots)}", f"w0 = {_fmt_list(cfg.w0)}", "", "[algo]"]
    a = cfg.algo
    for f in fields(AlgoConfig):
        val = getattr(a, f.name)
        if f.name == "N_paths":
            lines.append(f"N_paths = [{', '.join(str(int(n)) for n in val)}]")
        elif f.name in ALGO_INT:
            lines.append(f"{f.name} = {int(val)}")
        else:
            lines.append(f"{f.name} = {_fmt(val)}")
    lines += ["", "[nets]", f"hidden = [{', '.join(str(h) for h in cfg.hidden)}]", f"activation = {cfg.activation}", ""]
    return "\n".join(lines)


def with_overrides(cfg: RunConfig, *, seed: int | None = None, knots=None) -> RunConfig:
    algo = replace(cfg.algo, seed=seed) if seed is not None else cfg.algo
    if knots is not None:
        knots = np.asarray(knots, dtype=np.float64)
        w0 = cfg.w0 if len(cfg.w0) == len(knots) else np.full(len(knots), float(cfg.w0[0]))
        return RunConfig(cfg.params, knots, w0, algo, cfg.hidden, cfg.activation)
    return RunConfig(cfg.params, cfg.knots, cfg.w0, algo, cfg.hidden, cfg.activation)
