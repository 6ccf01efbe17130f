"""Dense feed-forward networks stored as flat parameter vectors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from mfg_forge.autodiff import tape
from mfg_forge.autodiff.tape import Var
from mfg_forge.errors import ConfigError, ContractError

ACTIVATIONS = ("tanh", "relu", "sigmoid")

_ACT_NUMPY = {
    "tanh": np.tanh,
    "relu": lambda z: np.maximum(z, 0.0),
    "sigmoid": tape._sigmoid,
}


@dataclass(frozen=True)
class NetSpec:
    layer_widths: tuple[int, ...]
    activation: str = "tanh"
    init_seed: int = 0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ConfigError(f"layer_widths needs at least 2 entries, got {list(widths)}")
        if any(w < 1 for w in widths):
            raise ConfigError(f"layer_widths must be positive, got {list(widths)}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def n_inputs(self) -> int:
        return self.layer_widths[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(a * b + b for a, b in zip(w[:-1], w[1:]))

    def layout(self) -> dict[tuple[int, str], tuple[int, int]]:
        out = {}
        pos = 0
        for layer, (a, b) in enumerate(zip(self.layer_widths[:-1], self.layer_widths[1:])):
            out[(layer, "weight")] = (pos, pos + a * b)
            pos += a * b
            out[(layer, "bias")] = (pos, pos + b)
            pos += b
        return out


@dataclass
class ParamVector:
    values: np.ndarray
    layout: dict[tuple[int, str], tuple[int, int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.values)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), dict(self.layout))


def net_init(spec: NetSpec) -> ParamVector:
    """Uniform(+-1/sqrt(fan_in)) weights and zero biases, seeded by ``spec.init_seed``."""
    rng = np.random.default_rng(spec.init_seed)
    layout = spec.layout()
    values = np.zeros(spec.n_params)
    for layer, (a, b) in enumerate(zip(spec.layer_widths[:-1], spec.layer_widths[1:])):
        lo, hi = layout[(layer, "weight")]
        bound = np.sqrt(1.0 / a)
        values[lo:hi] = rng.uniform(-bound, bound, size=a * b)
    return ParamVector(values, layout)


def _raw(params):
    return params.values if isinstance(params, ParamVector) else params


def net_forward(params, spec: NetSpec, x, offset: int = 0):
    """Apply the network to ``x`` of shape ``(d_in,)`` or ``(n, d_in)``.

    ``params`` may be a :class:`ParamVector`, a flat array, or a flat
    :class:`Var` holding several nets back to back (``offset`` selects this
    one). Plain arrays in give plain arrays out; any Var input gives a Var.
    """
    theta = _raw(params)
    if np.shape(x)[-1] != spec.n_inputs:
        raise ContractError(f"input dim {np.shape(x)[-1]} does not match first width {spec.n_inputs}")
    if len(theta) < offset + spec.n_params:
        raise ContractError(f"parameter vector too short: {len(theta)} < {offset + spec.n_params}")
    widths = spec.layer_widths
    n_layers = len(widths) - 1
    if not isinstance(theta, Var) and not isinstance(x, Var):
        act = _ACT_NUMPY[spec.activation]
        h = np.asarray(x, dtype=np.float64)
        pos = offset
        for layer, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            W = theta[pos : pos + a * b].reshape(a, b)
            pos += a * b
            h = h @ W + theta[pos : pos + b]
            pos += b
            if layer < n_layers - 1:
                h = act(h)
        return h
    theta = tape.as_var(theta)
    h = tape.as_var(x)
    pos = offset
    for layer, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        h = tape.dense(h, theta, pos, a, b, spec.activation if layer < n_layers - 1 else None)
        pos += a * b + b
    return h


def grad_params(loss_eval: Callable[[Var], Var], params) -> np.ndarray:
    """Gradient of a scalar computation with respect to a flat parameter vector."""
    return value_and_grad_params(loss_eval, params)[1]


def value_and_grad_params(loss_eval: Callable[[Var], Var], params) -> tuple[float, np.ndarray]:
    return tape.value_and_grad(loss_eval, _raw(params))


def grad_input(params, spec: NetSpec, x) -> np.ndarray:
    """d(output)/dx for a scalar-output network at a single input point."""
    if spec.n_outputs != 1:
        raise ContractError(f"grad_input needs a scalar-output net, last width is {spec.n_outputs}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.n_inputs,):
        raise ContractError(f"expected input of shape ({spec.n_inputs},), got {x.shape}")
    theta = np.asarray(_raw(params), dtype=np.float64)
    _, g = tape.value_and_grad(lambda v: net_forward(theta, spec, v).sum(), x)
    return g
