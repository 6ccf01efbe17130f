from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from mfg_forge.autodiff.nn import ParamVector
from mfg_forge.errors import ContractError, NumericalError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 1e-3, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr, **kw)


def adam_step(state: AdamState, params, grads) -> tuple[AdamState, object]:
    """One bias-corrected adaptive-moment update.

    Returns fresh state and parameters; the inputs are left untouched. The
    parameter container type (ParamVector or array) is preserved.
    """
    theta = params.values if isinstance(params, ParamVector) else np.asarray(params, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != theta.shape or state.m.shape != theta.shape:
        raise ContractError(f"shape mismatch: params {theta.shape}, grads {g.shape}, moments {state.m.shape}")
    if not np.all(np.isfinite(g)):
        bad = int(np.flatnonzero(~np.isfinite(g))[0])
        raise NumericalError(f"non-finite gradient at index {bad} (adam step {state.t + 1})")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_theta = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = replace(state, m=m, v=v, t=t)
    if isinstance(params, ParamVector):
        return new_state, ParamVector(new_theta, dict(params.layout))
    return new_state, new_theta
