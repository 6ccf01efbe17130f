"""Renewable Energy Certificate market model.

State per agent: inventory ``x`` and capacity ``c``; adjoints ``(Y^X, Y^C)``.
Noise channel 0 drives inventory, channel 1 is the independent channel that
only the capacity adjoint's martingale term sees.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mfg_forge.core import ProblemSpec, SampleBatch, TimeGrid
from mfg_forge.errors import ConfigError


@dataclass
class PenaltyFunction:
    """Piecewise-linear terminal cost ``phi0 + sum_j w_j (R_j - x)^+`` (put)."""

    phi0: float
    weights: np.ndarray
    knots: np.ndarray
    orientation: str = "put"

    def __post_init__(self):
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        self.knots = np.atleast_1d(np.asarray(self.knots, dtype=np.float64))
        self.phi0 = float(self.phi0)
        if self.weights.shape != self.knots.shape or self.knots.size < 1:
            raise ConfigError(f"weights {self.weights.shape} and knots {self.knots.shape} must match and be non-empty")
        if np.any(self.weights < 0):
            raise ConfigError("penalty weights must be nonnegative")
        if np.any(np.diff(self.knots) <= 0):
            raise ConfigError("penalty knots must be strictly increasing")
        if self.orientation not in ("put", "call"):
            raise ConfigError(f"orientation must be 'put' or 'call', got {self.orientation!r}")

    def hat(self) -> "PenaltyFunction":
        """Same slopes with ``phi0 = 0``."""
        return PenaltyFunction(0.0, self.weights.copy(), self.knots.copy(), self.orientation)


def penalty_eval(g: PenaltyFunction, x):
    x = np.asarray(x, dtype=np.float64)
    if g.orientation == "put":
        legs = np.maximum(g.knots - x[..., None], 0.0)
    else:
        legs = np.maximum(x[..., None] - g.knots, 0.0)
    return g.phi0 + legs @ g.weights


def penalty_derivative(g: PenaltyFunction, x):
    """Left-branch derivative: a put leg is active for ``x <= R_j``."""
    x = np.asarray(x, dtype=np.float64)
    if g.orientation == "put":
        return -((x[..., None] <= g.knots) @ g.weights)
    return (x[..., None] >= g.knots) @ g.weights


@dataclass
class RecParams:
    pi: np.ndarray
    h: np.ndarray
    sigma: np.ndarray
    zeta: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    v: np.ndarray
    eta: np.ndarray
    T: float = 1.0
    dt: float = 1.0 / 52.0
    lam: float = 6.0
    R0: float = 0.0
    eta_is_std: bool = False

    def __post_init__(self):
        for name in ("pi", "h", "sigma", "zeta", "gamma", "beta", "v", "eta"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64)))
        self.validate()

    @property
    def K(self) -> int:
        return len(self.pi)

    @property
    def M(self) -> int:
        return int(round(self.T / self.dt))

    def validate(self) -> None:
        K = len(self.pi)
        for name in ("h", "sigma", "zeta", "gamma", "beta", "v", "eta"):
            if len(getattr(self, name)) != K:
                raise ConfigError(f"{name} has {len(getattr(self, name))} entries, expected K={K}")
        if np.any(self.pi <= 0) or abs(self.pi.sum() - 1.0) > 1e-9:
            raise ConfigError("pi must sum to 1 with positive entries")
        for name in ("zeta", "gamma", "beta"):
            if np.any(getattr(self, name) <= 0):
                raise ConfigError(f"{name} must be positive")
        if np.any(self.sigma < 0):
            raise ConfigError("sigma must be nonnegative")
        if np.any(self.eta < 0):
            raise ConfigError("eta must be nonnegative")
        if not self.lam > 0:
            raise ConfigError("lambda must be positive")
        if not (self.T > 0 and self.dt > 0):
            raise ConfigError("T and dt must be positive")
        if abs(self.M * self.dt - self.T) > 1e-12:
            raise ConfigError(f"T={self.T} is not an integer multiple of dt={self.dt}")

    @property
    def init_std(self) -> np.ndarray:
        return self.eta if self.eta_is_std else np.sqrt(self.eta)


def table12_params(**overrides) -> RecParams:
    """Two-population parameters of the reference REC experiments."""
    base = dict(
        pi=[0.25, 0.75],
        h=[0.2, 0.5],
        sigma=[0.1, 0.15],
        zeta=[1.75, 1.25],
        gamma=[1.25, 1.75],
        beta=[1.0, 1.0],
        v=[0.6, 0.2],
        eta=[0.1, 0.1],
        T=1.0,
        dt=1.0 / 52.0,
        lam=6.0,
        R0=0.0,
    )
    base.update(overrides)
    return RecParams(**base)


def price_weights(params: RecParams) -> np.ndarray:
    """Coefficients ``c_k`` with ``S = sum_k c_k E[Y^X_k]``."""
    a = params.pi / params.gamma
    return -a / a.sum()


def equilibrium_price(mean_yx, params: RecParams):
    """Market-clearing price from per-population means of ``Y^X``."""
    return np.asarray(mean_yx, dtype=np.float64) @ price_weights(params)


def rec_forward_drift(k: int, x, c, y_x, S, params: RecParams, y_c=0.0):
    dx = params.h[k] - (1.0 / params.zeta[k] + 1.0 / params.gamma[k]) * y_x - S / params.gamma[k] + c
    dc = -y_c / params.beta[k]
    return dx, dc


def rec_backward_drift(k: int, y_x):
    return np.zeros_like(np.asarray(y_x, dtype=np.float64)), -np.asarray(y_x, dtype=np.float64)


def optimal_controls(y_x, y_c, S, k: int, params: RecParams):
    """Expansion, rental, and trading rates ``(alpha, g_rent, Gamma)``.

    ``Gamma = -(Y^X + S) / gamma`` minimizes ``gamma/2 Gamma^2 + (S + Y^X) Gamma``;
    this is the sign that the forward drift and the clearing price assume.
    """
    alpha = -np.asarray(y_c) / params.beta[k]
    g_rent = -np.asarray(y_x) / params.zeta[k]
    trade = -(np.asarray(y_x) + S) / params.gamma[k]
    return alpha, g_rent, trade


def running_cost(controls, S, k: int, params: RecParams):
    alpha, g_rent, trade = controls
    return (
        0.5 * params.zeta[k] * g_rent**2
        + 0.5 * params.gamma[k] * trade**2
        + 0.5 * params.beta[k] * alpha**2
        + S * trade
    )


def build_rec_spec(params: RecParams, g: PenaltyFunction) -> ProblemSpec:
    """Assemble the 2-state / 2-adjoint / 2-noise MV-FBSDE for the REC market."""
    K = params.K
    grid = TimeGrid(params.T, params.M)
    cw = price_weights(params)
    # drift = x @ A_x + y @ A_y + const + S * e_S   (row vectors over (x, c))
    A_x = np.array([[0.0, 0.0], [1.0, 0.0]])
    A_y = [np.array([[-(1.0 / params.zeta[k] + 1.0 / params.gamma[k]), 0.0], [0.0, -1.0 / params.beta[k]]]) for k in range(K)]
    const = [np.array([params.h[k], 0.0]) for k in range(K)]
    e_S = [np.array([-1.0 / params.gamma[k], 0.0]) for k in range(K)]
    B_y = np.array([[0.0, -1.0], [0.0, 0.0]])
    e_yx = np.array([1.0, 0.0])
    sig = [np.diag([params.sigma[k], 0.0]) for k in range(K)]
    std = params.init_std

    def price(law):
        S = None
        for j in range(K):
            term = (law.mean_y[j] @ e_yx) * cw[j]
            S = term if S is None else S + term
        return S

    def forward_drift(k, t, x, law, y):
        return x @ A_x + y @ A_y[k] + const[k] + price(law) * e_S[k]

    def backward_drift(k, t, x, law, y):
        return y @ B_y

    def diffusion(k, t):
        return sig[k]

    def terminal_map(k, xT):
        xT = np.asarray(xT)
        out = np.zeros((xT.shape[0], 2))
        out[:, 0] = penalty_derivative(g, xT[:, 0])
        return out

    def initial_sampler(k, rng, n):
        out = np.zeros((n, 2))
        out[:, 0] = params.v[k] + std[k] * rng.standard_normal(n)
        return out

    return ProblemSpec(
        K=K,
        d_x=2,
        d_y=2,
        d_w=2,
        grid=grid,
        forward_drift=forward_drift,
        backward_drift=backward_drift,
        diffusion=diffusion,
        terminal_map=terminal_map,
        initial_sampler=initial_sampler,
        meta={"penalty": g, "params": params},
    )


def price_path(batch: SampleBatch, params: RecParams) -> np.ndarray:
    """Clearing price at every grid point from the batch's mean ``Y^X``."""
    mean_yx = np.stack([my[:, 0] for my in batch.law.mean_y], axis=1)
    return mean_yx @ price_weights(params)


def batch_controls(batch: SampleBatch, params: RecParams, S: np.ndarray | None = None):
    """Per population ``(alpha, g_rent, Gamma)``, each of shape ``(n_k, M+1)``."""
    if S is None:
        S = price_path(batch, params)
    out = []
    for k in range(batch.K):
        y = batch.Y[k]
        out.append(optimal_controls(y[:, :, 0], y[:, :, 1], S[None, :], k, params))
    return out
