"""Discretized McKean-Vlasov FBSDE engine for K coupled sub-populations.

Forward states ``X`` and adjoints ``Y`` advance by Euler steps on a uniform
grid. At every step the coefficient maps see the cross-sample means of all
populations (:class:`LawStats`), so populations move in lockstep. ``Y_0`` comes
from a per-population network and each step's ``Z`` from a per-step network
fed with the population's standardized ``(X, Y)`` cross-section; training
pushes ``Y_T`` onto the terminal map.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np

from mfg_forge.autodiff import tape
from mfg_forge.autodiff.adam import AdamState, adam_step
from mfg_forge.autodiff.nn import NetSpec, net_forward, net_init
from mfg_forge.autodiff.tape import Var
from mfg_forge.errors import ContractError, NumericalError
from mfg_forge.seeds import seed_derivation

log = logging.getLogger(__name__)

STD_FLOOR = 1e-2


@dataclass(frozen=True)
class TimeGrid:
    T: float
    M: int

    def __post_init__(self):
        if self.M < 1 or not self.T > 0:
            raise ContractError(f"time grid needs M >= 1 and T > 0, got M={self.M}, T={self.T}")

    @property
    def dt(self) -> float:
        return self.T / self.M

    @property
    def points(self) -> np.ndarray:
        return np.arange(self.M + 1) * self.dt


@dataclass
class LawStats:
    """Cross-sample means per population; ``mean_x[k]`` has shape ``(steps, d_X)``.

    The coefficient maps receive one time slice of this (see :meth:`at`).
    Only first moments are carried; higher moments could be added as extra
    fields without changing the map signatures.
    """

    mean_x: list
    mean_y: list

    def at(self, m: int) -> "LawStats":
        return LawStats([mx[m] for mx in self.mean_x], [my[m] for my in self.mean_y])


@dataclass
class ProblemSpec:
    """A K-population MV-FBSDE.

    Coefficient maps receive batched arrays (or tape Vars during training):
    ``x`` of shape ``(n, d_X)``, ``y`` of shape ``(n, d_Y)``, and a
    :class:`LawStats` slice whose entries have shapes ``(d_X,)``/``(d_Y,)``.
    """

    K: int
    d_x: int
    d_y: int
    d_w: int
    grid: TimeGrid
    forward_drift: Callable
    backward_drift: Callable
    diffusion: Callable  # (k, t) -> (d_X, d_W) array
    terminal_map: Callable  # (k, x_T) -> (n, d_Y)
    initial_sampler: Callable  # (k, rng, n) -> (n, d_X)
    meta: dict = field(default_factory=dict)


@dataclass
class EnsembleNets:
    """Per-population ``Y_0`` net and ``M`` step nets, packed in one flat vector.

    ``slots[(k, 0)]`` is the ``Y_0`` net of population ``k``; ``slots[(k, m)]``
    for ``m = 1..M`` is the ``Z`` net used on the step ending at ``t_m``.
    """

    theta: np.ndarray
    slots: dict[tuple[int, int], tuple[int, NetSpec]]
    K: int
    M: int

    def copy(self) -> "EnsembleNets":
        return EnsembleNets(self.theta.copy(), dict(self.slots), self.K, self.M)

    @classmethod
    def build(
        cls,
        spec: ProblemSpec,
        hidden: Sequence[int] = (32, 32),
        activation: str = "tanh",
        seed: int = 0,
        zero: bool = False,
    ) -> "EnsembleNets":
        slots = {}
        chunks = []
        pos = 0
        for k in range(spec.K):
            for m in range(spec.grid.M + 1):
                if m == 0:
                    widths = (spec.d_x, *hidden, spec.d_y)
                else:
                    widths = (spec.d_x + spec.d_y, *hidden, spec.d_y * spec.d_w)
                ns = NetSpec(widths, activation, seed_derivation(seed, f"net/{k}/{m}"))
                p = np.zeros(ns.n_params) if zero else net_init(ns).values
                slots[(k, m)] = (pos, ns)
                chunks.append(p)
                pos += ns.n_params
        return cls(np.concatenate(chunks), slots, spec.K, spec.grid.M)

    def check(self, spec: ProblemSpec) -> None:
        if self.K != spec.K or self.M != spec.grid.M:
            raise ContractError(f"nets built for K={self.K}, M={self.M}; spec has K={spec.K}, M={spec.grid.M}")
        for k in range(spec.K):
            _, y0 = self.slots[(k, 0)]
            if y0.n_inputs != spec.d_x or y0.n_outputs != spec.d_y:
                raise ContractError(f"Y0 net of population {k} has dims {y0.layer_widths}")
            for m in range(1, spec.grid.M + 1):
                _, z = self.slots[(k, m)]
                if z.n_inputs != spec.d_x + spec.d_y or z.n_outputs != spec.d_y * spec.d_w:
                    raise ContractError(f"Z net ({k}, {m}) has dims {z.layer_widths}")


@dataclass
class SampleBatch:
    """Simulated paths. Per population ``k``:

    ``X[k]``: ``(n_k, M+1, d_X)``; ``Y[k]``: ``(n_k, M+1, d_Y)``;
    ``Z[k]``: ``(n_k, M, d_Y, d_W)`` (entry ``m-1`` drives step ``m``);
    ``dW[k]``: ``(n_k, M, d_W)``.
    """

    X: list
    Y: list
    Z: list
    dW: list
    law: LawStats
    grid: TimeGrid
    penalty: object = None

    @property
    def K(self) -> int:
        return len(self.X)

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(x.shape[0] for x in self.X)


class Inputs(NamedTuple):
    x0: list
    dW: list


def law_stats(xs: Sequence, ys: Sequence) -> LawStats:
    """Per-population cross-sample means of one cross-section.

    ``xs[k]`` has shape ``(n_k, d_X)``; works on arrays and tape Vars.
    """
    mx, my = [], []
    for k, (x, y) in enumerate(zip(xs, ys)):
        if np.shape(x)[0] < 1:
            raise ContractError(f"population {k} has no samples")
        mx.append(x.mean(axis=0))
        my.append(y.mean(axis=0))
    return LawStats(mx, my)


def draw_inputs(spec: ProblemSpec, counts: Sequence[int], seed: int) -> Inputs:
    """Initial states and Brownian increments (variance dt per component)."""
    if len(counts) != spec.K or any(int(n) < 1 for n in counts):
        raise ContractError(f"need {spec.K} positive sample counts, got {list(counts)}")
    x0, dW = [], []
    sd = np.sqrt(spec.grid.dt)
    for k, n in enumerate(counts):
        rng = np.random.default_rng(seed_derivation(seed, f"paths/{k}"))
        x0.append(np.asarray(spec.initial_sampler(k, rng, int(n)), dtype=np.float64).reshape(int(n), spec.d_x))
        dW.append(rng.standard_normal((int(n), spec.grid.M, spec.d_w)) * sd)
    return Inputs(x0, dW)


def rollout(spec: ProblemSpec, theta, slots, inputs: Inputs, law_override: LawStats | None = None):
    """Euler scheme over the whole grid. Returns per-step lists of X, Y, Z, law.

    ``theta`` may be a tape Var, in which case everything returned is on the
    tape. With ``law_override`` the coefficient maps see the supplied means
    instead of the live cross-section.
    """
    dt = spec.grid.dt
    ts = spec.grid.points
    K, M = spec.K, spec.grid.M
    xs = [inputs.x0[k] for k in range(K)]
    ys = []
    for k in range(K):
        off, ns = slots[(k, 0)]
        ys.append(net_forward(theta, ns, xs[k], offset=off))
    X_path = [[x] for x in xs]
    Y_path = [[y] for y in ys]
    Z_path = [[] for _ in range(K)]
    laws = []
    for m in range(1, M + 1):
        live = law_stats(xs, ys)
        laws.append(live)
        law = law_override.at(m - 1) if law_override is not None else live
        t = ts[m - 1]
        new_x, new_y = [], []
        for k in range(K):
            x, y = xs[k], ys[k]
            n = np.shape(x)[0]
            dw = inputs.dW[k][:, m - 1, :]
            off, ns = slots[(k, m)]
            z = net_forward(theta, ns, _standardize(_concat(x, y)), offset=off)
            z = z.reshape(n, spec.d_y, spec.d_w)
            sigma = np.asarray(spec.diffusion(k, t), dtype=np.float64)
            fx = spec.forward_drift(k, t, x, law, y)
            fy = spec.backward_drift(k, t, x, law, y)
            new_x.append(x + fx * dt + dw @ sigma.T)
            new_y.append(y + fy * dt + (z * dw[:, None, :]).sum(axis=2))
            Z_path[k].append(z)
        xs, ys = new_x, new_y
        for k in range(K):
            X_path[k].append(xs[k])
            Y_path[k].append(ys[k])
            val = xs[k].value if isinstance(xs[k], Var) else xs[k]
            yval = ys[k].value if isinstance(ys[k], Var) else ys[k]
            if not (np.all(np.isfinite(val)) and np.all(np.isfinite(yval))):
                raise NumericalError(f"non-finite state in population {k} at timestep {m} (t={ts[m]:.6g})")
    laws.append(law_stats(xs, ys))
    return X_path, Y_path, Z_path, laws


def _concat(x, y):
    if isinstance(x, Var) or isinstance(y, Var):
        return tape.concat([x, y], axis=1)
    return np.concatenate([x, y], axis=1)


def _standardize(inp):
    # Cross-sectional standardization of z-net inputs, differentiated through
    # the mean and spread. The floor keeps degenerate laws (e.g. zero initial
    # capacity) finite and smooth.
    n = np.shape(inp)[0]
    if isinstance(inp, Var):
        c = inp - tape.sum_(inp, axis=0) * (1.0 / n)
        var = tape.sum_(tape.square(c), axis=0) * (1.0 / n)
        return c * tape.power(var + STD_FLOOR**2, -0.5)
    c = inp - np.sum(inp, axis=0) * (1.0 / n)
    var = np.sum(c * c, axis=0) * (1.0 / n)
    return c * (var + STD_FLOOR**2) ** -0.5


def _val(v):
    return v.value if isinstance(v, Var) else np.asarray(v)


def _assemble(spec, inputs, X_path, Y_path, Z_path, laws, penalty) -> SampleBatch:
    X = [np.stack([_val(v) for v in X_path[k]], axis=1) for k in range(spec.K)]
    Y = [np.stack([_val(v) for v in Y_path[k]], axis=1) for k in range(spec.K)]
    Z = [np.stack([_val(v) for v in Z_path[k]], axis=1) for k in range(spec.K)]
    law = LawStats(
        [np.stack([_val(l.mean_x[k]) for l in laws]) for k in range(spec.K)],
        [np.stack([_val(l.mean_y[k]) for l in laws]) for k in range(spec.K)],
    )
    return SampleBatch(X, Y, Z, [np.asarray(d) for d in inputs.dW], law, spec.grid, penalty)


def simulate_paths(
    spec: ProblemSpec,
    nets: EnsembleNets,
    counts: Sequence[int],
    seed: int,
    *,
    inputs: Inputs | None = None,
    law_override: LawStats | None = None,
) -> SampleBatch:
    """Simulate one synchronized batch; deterministic given ``seed`` (or ``inputs``)."""
    nets.check(spec)
    if inputs is None:
        inputs = draw_inputs(spec, counts, seed)
    X_path, Y_path, Z_path, laws = rollout(spec, nets.theta, nets.slots, inputs, law_override)
    return _assemble(spec, inputs, X_path, Y_path, Z_path, laws, spec.meta.get("penalty"))


def fbsde_loss(batch: SampleBatch, spec: ProblemSpec) -> float:
    """(1/K) sum_k (1/n_k) ||Y_T - terminal_map(X_T)||^2."""
    total = 0.0
    for k in range(batch.K):
        target = np.asarray(spec.terminal_map(k, batch.X[k][:, -1, :]))
        resid = batch.Y[k][:, -1, :] - target
        total += np.sum(resid * resid) / resid.shape[0]
    loss = total / batch.K
    if not np.isfinite(loss):
        raise NumericalError("FBSDE loss is not finite")
    return float(loss)


def _loss_on_tape(spec: ProblemSpec, theta: Var, slots, inputs: Inputs):
    X_path, Y_path, Z_path, laws = rollout(spec, theta, slots, inputs)
    total = None
    for k in range(spec.K):
        xT, yT = X_path[k][-1], Y_path[k][-1]
        target = np.asarray(spec.terminal_map(k, _val(xT)))
        r = yT - target
        term = tape.square(r).sum() * (1.0 / r.shape[0])
        total = term if total is None else total + term
    return total * (1.0 / spec.K), (X_path, Y_path, Z_path, laws)


def fbsde_value_and_grad(spec: ProblemSpec, nets: EnsembleNets, inputs: Inputs) -> tuple[float, np.ndarray]:
    leaf = Var(nets.theta.copy(), requires_grad=True)
    loss, _ = _loss_on_tape(spec, leaf, nets.slots, inputs)
    loss.backward()
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
    return float(loss.value), np.asarray(grad)


def inner_lr(t: int, lr0: float, decay_steps: float | None, lr_min: float, hold: int = 0) -> float:
    """``lr0`` for ``hold`` steps, then shrinking tenfold every ``decay_steps`` steps, floored at ``lr_min``.

    ``decay_steps`` of ``None`` or 0 gives a constant rate.
    """
    if not decay_steps or t < hold:
        return lr0
    return max(lr_min, lr0 * 0.1 ** ((t - hold) / decay_steps))


class TrainOutcome(NamedTuple):
    nets: EnsembleNets
    history: list
    adam: AdamState


def train_fbsde(
    spec: ProblemSpec,
    nets: EnsembleNets,
    counts: Sequence[int],
    n_steps: int,
    tol: float,
    seed: int,
    *,
    lr: float = 1e-2,
    lr_hold: int = 1000,
    lr_decay_steps: float | None = 500.0,
    lr_min: float = 3e-4,
    adam: AdamState | None = None,
) -> TrainOutcome:
    """Adam on all ensemble parameters jointly, fresh noise every iteration.

    Stops after ``n_steps`` iterations or as soon as the loss drops below
    ``tol``. The loss recorded at iteration ``i`` is the pre-update loss of
    that iteration's batch. The step size follows :func:`inner_lr` on the
    optimizer's own step counter, so a warm-started ``adam`` keeps decaying.
    """
    if n_steps < 1:
        raise ContractError(f"n_steps must be >= 1, got {n_steps}")
    nets.check(spec)
    if adam is None:
        adam = AdamState.zeros(len(nets.theta), lr=lr)
    theta = nets.theta
    history: list[float] = []
    for i in range(n_steps):
        inputs = draw_inputs(spec, counts, seed_derivation(seed, f"iter/{i}"))
        loss, grad = fbsde_value_and_grad(spec, EnsembleNets(theta, nets.slots, nets.K, nets.M), inputs)
        if not np.isfinite(loss):
            raise NumericalError(f"FBSDE loss became non-finite at iteration {i}; last good parameters kept")
        history.append(loss)
        adam = replace(adam, lr=inner_lr(adam.t, lr, lr_decay_steps, lr_min, lr_hold))
        adam, theta = adam_step(adam, theta, grad)
        if loss < tol:
            break
    return TrainOutcome(EnsembleNets(theta, nets.slots, nets.K, nets.M), history, adam)
