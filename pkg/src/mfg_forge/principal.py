"""Outer problem: penalty weights, loss estimation, and the surrogate net.

Weights live in unconstrained coordinates ``u``; ``w = softplus(u)`` keeps
every emitted weight strictly positive. The surrogate maps ``u`` through
softplus and a small dense net to a predicted principal loss, and the
principal steps on ``u`` follow that net's input gradient.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from mfg_forge.autodiff import tape
from mfg_forge.autodiff.adam import AdamState, adam_step
from mfg_forge.autodiff.nn import NetSpec, net_forward, net_init
from mfg_forge.core import SampleBatch
from mfg_forge.errors import ConfigError, ContractError, NumericalError
from mfg_forge.rec import PenaltyFunction, RecParams, batch_controls, penalty_eval, price_path, running_cost

UTILITIES = ("identity", "power", "exponential")


@dataclass
class PrincipalConfig:
    knots: np.ndarray
    pi: np.ndarray
    lam: float = 6.0
    Pi: np.ndarray | None = None
    R0: np.ndarray | float = 0.0
    utility: str = "identity"
    utility_param: float = 1.0

    def __post_init__(self):
        self.knots = np.atleast_1d(np.asarray(self.knots, dtype=np.float64))
        self.pi = np.atleast_1d(np.asarray(self.pi, dtype=np.float64))
        if self.Pi is None:
            self.Pi = self.pi[None, :].copy()
        self.Pi = np.atleast_2d(np.asarray(self.Pi, dtype=np.float64))
        self.R0 = np.broadcast_to(np.asarray(self.R0, dtype=np.float64), (self.Pi.shape[0],)).copy()
        if self.Pi.shape[1] != len(self.pi):
            raise ConfigError(f"Pi has {self.Pi.shape[1]} columns, expected K={len(self.pi)}")
        if np.any(self.Pi < 0) or np.any(self.Pi.sum(axis=1) <= 0):
            raise ConfigError("Pi must be nonnegative with no zero rows")
        if self.utility not in UTILITIES:
            raise ConfigError(f"utility must be one of {UTILITIES}, got {self.utility!r}")
        if np.any(np.diff(self.knots) <= 0):
            raise ConfigError("knots must be strictly increasing")

    @property
    def n_knots(self) -> int:
        return len(self.knots)

    @classmethod
    def from_params(cls, params: RecParams, knots, **kw) -> "PrincipalConfig":
        return cls(knots=knots, pi=params.pi, lam=params.lam, R0=params.R0, **kw)


def utility(x, config: PrincipalConfig):
    x = np.asarray(x, dtype=np.float64)
    if config.utility == "identity":
        return x
    if config.utility == "exponential":
        a = config.utility_param
        return (1.0 - np.exp(-a * x)) / a
    if np.any(x <= 0):
        raise NumericalError("power utility needs positive terminal inventory")
    return x**config.utility_param


def psi(u):
    """Softplus, evaluated without overflow for large ``|u|``."""
    u = np.asarray(u, dtype=np.float64)
    return np.maximum(u, 0.0) + np.log1p(np.exp(-np.abs(u)))


def psi_inverse(w):
    w = np.asarray(w, dtype=np.float64)
    if np.any(w <= 0):
        raise ContractError("softplus image is (0, inf); got a nonpositive weight")
    return w + np.log(-np.expm1(-w))


def running_cost_integral(f, dt: float) -> float | np.ndarray:
    """Trapezoid rule over the last axis of ``f`` on a uniform grid."""
    f = np.asarray(f, dtype=np.float64)
    return dt * (f[..., 1:-1].sum(axis=-1) + 0.5 * (f[..., 0] + f[..., -1]))


def per_sample_running_costs(batch: SampleBatch, params: RecParams) -> list[np.ndarray]:
    S = price_path(batch, params)
    out = []
    for k, ctrl in enumerate(batch_controls(batch, params, S)):
        f = running_cost(ctrl, S[None, :], k, params)
        out.append(running_cost_integral(f, batch.grid.dt))
    return out


def agent_value_estimate(batch: SampleBatch, g_hat: PenaltyFunction, params: RecParams) -> np.ndarray:
    """Mean running cost plus terminal penalty (``phi0`` excluded) per population."""
    costs = per_sample_running_costs(batch, params)
    return np.array([np.mean(costs[k] + penalty_eval(g_hat, batch.X[k][:, -1, 0])) for k in range(batch.K)])


def constraint_term(V_hat, config: PrincipalConfig) -> float:
    V_hat = np.asarray(V_hat, dtype=np.float64)
    return float(np.max((config.Pi @ V_hat - config.R0) / config.Pi.sum(axis=1)))


def reformulated_loss(V_hat, xT: Sequence[np.ndarray], g_hat: PenaltyFunction, config: PrincipalConfig) -> float:
    """Constraint-folded principal objective from agent values and terminal samples."""
    tail = 0.0
    for k, x in enumerate(xT):
        tail += config.pi[k] * np.mean(-utility(x, config) - config.lam * penalty_eval(g_hat, x))
    return config.lam * constraint_term(V_hat, config) + float(tail)


def principal_sample_loss(batch: SampleBatch, w, config: PrincipalConfig, params: RecParams) -> float:
    g_hat = PenaltyFunction(0.0, w, config.knots)
    V_hat = agent_value_estimate(batch, g_hat, params)
    return reformulated_loss(V_hat, [x[:, -1, 0] for x in batch.X], g_hat, config)


def phi0_recover(V_hat, config: PrincipalConfig) -> float:
    """Largest offset that keeps every reservation constraint satisfied."""
    V_hat = np.asarray(V_hat, dtype=np.float64)
    return float(np.min((config.R0 - config.Pi @ V_hat) / config.Pi.sum(axis=1)))


def original_objective(phi0: float, V_hat, xT, g_hat: PenaltyFunction, config: PrincipalConfig) -> float:
    """Objective with explicit offset; ``inf`` when the constraint is violated."""
    V = np.asarray(V_hat, dtype=np.float64) + phi0
    if np.any(config.Pi @ V > config.R0 + 1e-12):
        return np.inf
    total = 0.0
    for k, x in enumerate(xT):
        total += config.pi[k] * np.mean(-utility(x, config) - config.lam * (phi0 + penalty_eval(g_hat, x)))
    return float(total)


def sample_ball(u, eps: float, n_samples: int, seed: int) -> np.ndarray:
    """``u`` itself followed by ``n_samples - 1`` uniform draws from the eps-ball."""
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    if eps < 0:
        raise ContractError(f"eps must be nonnegative, got {eps}")
    if n_samples < 1:
        raise ContractError("need at least one sample")
    d = u.size
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_samples - 1, d))
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    radii = eps * rng.random((n_samples - 1, 1)) ** (1.0 / d)
    return np.vstack([u[None, :], u + dirs / norms * radii])


class Record(NamedTuple):
    u: np.ndarray
    loss: float
    step: int


class MemoryBuffer:
    """Bounded FIFO of ``(u, loss, outer step)`` records."""

    def __init__(self, capacity: int = 2048):
        if capacity < 1:
            raise ContractError("buffer capacity must be positive")
        self.capacity = capacity
        self._items: deque[Record] = deque(maxlen=capacity)
        self.inserted = 0

    def add(self, u, loss: float, step: int) -> None:
        self._items.append(Record(np.array(u, dtype=np.float64), float(loss), int(step)))
        self.inserted += 1

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i) -> Record:
        return self._items[i]

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        U = np.array([r.u for r in self._items])
        L = np.array([r.loss for r in self._items])
        return U, L

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        if not self._items:
            raise ContractError("memory buffer is empty")
        U, L = self.arrays()
        idx = rng.integers(0, len(U), size=n)
        return U[idx], L[idx]


def surrogate_spec(n_knots: int, hidden=(32, 32), activation: str = "tanh", seed: int = 0) -> NetSpec:
    return NetSpec((n_knots, *hidden, 1), activation, seed)


def surrogate_init(spec: NetSpec) -> np.ndarray:
    return net_init(spec).values


def surrogate_predict(upsilon, spec: NetSpec, U) -> np.ndarray:
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    return net_forward(upsilon, spec, psi(U))[:, 0]


def _surrogate_on_tape(upsilon, spec: NetSpec, u):
    return net_forward(upsilon, spec, tape.softplus(u))


@dataclass
class PrincipalState:
    u: np.ndarray
    upsilon: np.ndarray
    eps: float
    j: int = 0
    adam_u: AdamState | None = None
    adam_upsilon: AdamState | None = None
    fitted: bool = False

    @property
    def w(self) -> np.ndarray:
        return psi(self.u)


def surrogate_fit(
    buffer: MemoryBuffer,
    upsilon,
    spec: NetSpec,
    n_steps: int,
    batch_size: int,
    seed: int,
    *,
    adam: AdamState | None = None,
    lr: float = 1e-3,
) -> tuple[np.ndarray, AdamState]:
    """``n_steps`` Adam steps on the batch MSE between surrogate and stored losses."""
    if len(buffer) == 0:
        raise ContractError("cannot fit the surrogate on an empty buffer")
    upsilon = np.asarray(upsilon, dtype=np.float64)
    if adam is None:
        adam = AdamState.zeros(len(upsilon), lr=lr)
    rng = np.random.default_rng(seed)
    for _ in range(n_steps):
        U, L = buffer.sample(batch_size, rng)
        W = psi(U)

        def mse(theta):
            pred = net_forward(theta, spec, W)[:, 0]
            r = pred - L
            return tape.square(r).mean()

        _, grad = tape.value_and_grad(mse, upsilon)
        adam, upsilon = adam_step(adam, upsilon, grad)
    return upsilon, adam


def surrogate_value_and_grad(upsilon, spec: NetSpec, u) -> tuple[float, np.ndarray]:
    """Surrogate prediction at ``u`` and its gradient with respect to ``u``."""
    upsilon = np.asarray(upsilon, dtype=np.float64)
    return tape.value_and_grad(lambda v: _surrogate_on_tape(upsilon, spec, v).sum(), np.asarray(u, dtype=np.float64))


def principal_grad_step(
    upsilon,
    spec: NetSpec,
    u,
    n_steps: int,
    *,
    adam: AdamState | None = None,
    lr: float = 1e-2,
) -> tuple[np.ndarray, AdamState, list[float]]:
    """``n_steps`` Adam steps on ``u`` down the surrogate; returns ``(u, adam, predictions)``."""
    u = np.array(u, dtype=np.float64)
    if adam is None:
        adam = AdamState.zeros(len(u), lr=lr)
    preds = []
    for _ in range(n_steps):
        val, g = surrogate_value_and_grad(upsilon, spec, u)
        if not np.all(np.isfinite(g)):
            raise NumericalError("surrogate input gradient is not finite")
        preds.append(val)
        adam, u = adam_step(adam, u, g)
    return u, adam, preds


def epsilon_update(eps: float, step: int = 0, *, decay: float = 0.95, eps_min: float = 0.0) -> float:
    if not eps > 0:
        raise ContractError(f"eps must be positive, got {eps}")
    return max(eps_min, decay * eps)
