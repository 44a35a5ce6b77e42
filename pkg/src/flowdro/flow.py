"""Velocity-field networks, unit-time flow blocks and chains of blocks.

A block maps x to the time-1 solution of dx/dt = f(x, t; theta) using a
fixed Euler or RK4 discretization with S substeps. The same arithmetic is
available on numpy arrays (fast evaluation) and on an autodiff tape
(training by backpropagation through the unrolled integrator).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Sequence, Union

import numpy as np

from .autodiff import ParamStore, Tape, load_checkpoint, save_checkpoint
from .errors import NonFiniteError, ShapeError
from .measures import EmpiricalMeasure
from .rng import make_rng

METHODS = ("euler", "rk4")
MANIFEST_VERSION = 1


def _softplus(x, beta):
    return np.logaddexp(0.0, beta * x) / beta


class VelocityField:
    """MLP f(x, t) with output dimension equal to the input dimension.

    With time conditioning the first layer sees t as an extra input
    coordinate (stored as the separate weight row ``wt``). The last layer
    starts at zero so a fresh field generates the identity map.
    """

    def __init__(self, d, hidden=(32, 32), activation="softplus", beta=20.0,
                 time_conditioning=False, seed=0, store=None):
        if activation not in ("softplus", "tanh"):
            raise ValueError(f"activation must be softplus or tanh, got {activation!r}")
        self.d = int(d)
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        self.beta = float(beta)
        self.time_conditioning = bool(time_conditioning)
        self.n_evals = 0
        widths = self.widths
        if store is not None:
            self.store = store
            self._check_store()
            return
        rng = make_rng(seed)
        self.store = ParamStore()
        n_layers = len(widths) - 1
        for i in range(n_layers):
            a, b = widths[i], widths[i + 1]
            if i == n_layers - 1:
                self.store.add(f"W{i}", np.zeros((a, b)))
            else:
                self.store.add(f"W{i}", rng.standard_normal((a, b)) / np.sqrt(a))
            self.store.add(f"b{i}", np.zeros(b))
        if self.time_conditioning:
            self.store.add("wt", rng.standard_normal(widths[1]) if n_layers > 1 else np.zeros(widths[1]))

    @property
    def widths(self):
        return (self.d,) + self.hidden + (self.d,)

    @property
    def n_layers(self):
        return len(self.widths) - 1

    def _check_store(self):
        for i in range(self.n_layers):
            a, b = self.widths[i], self.widths[i + 1]
            if self.store[f"W{i}"].shape != (a, b) or self.store[f"b{i}"].shape != (b,):
                raise ShapeError(f"layer {i}: parameter shapes inconsistent with widths {self.widths}")

    def _act(self, z):
        return _softplus(z, self.beta) if self.activation == "softplus" else np.tanh(z)

    def __call__(self, x, t):
        """Evaluate on an (n, d) array at scalar time t."""
        self.n_evals += x.shape[0]
        p = self.store.params
        h = x
        for i in range(self.n_layers):
            b = p[f"b{i}"]
            if i == 0 and self.time_conditioning:
                b = b + p["wt"] * t
            h = h @ p[f"W{i}"] + b
            if i < self.n_layers - 1:
                h = self._act(h)
        return h

    def record(self, tape: Tape, x, t):
        """Same computation recorded on ``tape``."""
        self.n_evals += x.shape[0]
        h = x
        for i in range(self.n_layers):
            b = tape.param(self.store, f"b{i}")
            if i == 0 and self.time_conditioning:
                b = tape.add(b, tape.scale(tape.param(self.store, "wt"), t))
            h = tape.affine(h, tape.param(self.store, f"W{i}"), b)
            if i < self.n_layers - 1:
                h = tape.activation(h, self.activation, self.beta)
        return h

    def spec(self):
        return {
            "widths": list(self.widths),
            "activation": self.activation,
            "beta": self.beta,
            "time_conditioning": self.time_conditioning,
        }


Field = Union[VelocityField, Callable[[np.ndarray, float], np.ndarray]]


@dataclass
class IntegratorConfig:
    method: str = "rk4"
    substeps: int = 3

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if int(self.substeps) < 1:
            raise ValueError("substeps must be >= 1")
        self.substeps = int(self.substeps)


def _step(f, x, t, h, method):
    if method == "euler":
        return x + f(x, t) * h
    k1 = f(x, t)
    k2 = f(x + k1 * (h / 2), t + h / 2)
    k3 = f(x + k2 * (h / 2), t + h / 2)
    k4 = f(x + k3 * h, t + h)
    return x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6)


def integrate(f: Field, x, integrator: IntegratorConfig, keep_trajectory=False):
    """Integrate dx/dt = f(x, t) over [0, 1) with S uniform substeps.

    ``x`` is (n, d) or a single point (d,). Returns the endpoint, and the
    trajectory of S+1 states as well when ``keep_trajectory`` is set.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    S = integrator.substeps
    h = 1.0 / S
    traj = [x] if keep_trajectory else None
    for i in range(S):
        x = _step(f, x, i * h, h, integrator.method)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite state after substep {i}")
        if keep_trajectory:
            traj.append(x)
    if single:
        x = x[0]
        if keep_trajectory:
            traj = [s[0] for s in traj]
    if keep_trajectory:
        return x, np.stack(traj)
    return x


def integrate_tape(tape: Tape, field: VelocityField, x, integrator: IntegratorConfig):
    """Tape version of :func:`integrate`; ``x`` is a node of shape (n, d)."""
    S = integrator.substeps
    h = 1.0 / S
    f = lambda z, t: field.record(tape, z, t)
    for i in range(S):
        t = i * h
        if integrator.method == "euler":
            x = x + f(x, t) * h
            continue
        k1 = f(x, t)
        k2 = f(x + k1 * (h / 2), t + h / 2)
        k3 = f(x + k2 * (h / 2), t + h / 2)
        k4 = f(x + k3 * h, t + h)
        x = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6)
    return x


@dataclass
class FlowBlock:
    field: VelocityField
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    gamma: float = 1.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")

    @property
    def d(self):
        return self.field.d

    @property
    def evals_per_point(self):
        return (4 if self.integrator.method == "rk4" else 1) * self.integrator.substeps

    def __call__(self, x, keep_trajectory=False):
        return integrate(self.field, x, self.integrator, keep_trajectory)


def make_block(d, gamma, method="rk4", substeps=3, hidden=(32, 32), activation="softplus",
               beta=20.0, time_conditioning=None, seed=0):
    """Block factory; time conditioning defaults on for multi-step RK4 only."""
    if time_conditioning is None:
        time_conditioning = not (method == "euler" and substeps == 1)
    fld = VelocityField(d, hidden, activation, beta, time_conditioning, seed)
    return FlowBlock(fld, IntegratorConfig(method, substeps), gamma)


@dataclass
class FlowChain:
    blocks: List[FlowBlock] = field(default_factory=list)

    def __post_init__(self):
        dims = {b.d for b in self.blocks}
        if len(dims) > 1:
            raise ShapeError(f"blocks disagree on dimension: {sorted(dims)}")

    def __len__(self):
        return len(self.blocks)

    def append(self, block: FlowBlock):
        if self.blocks and block.d != self.blocks[0].d:
            raise ShapeError(f"block dimension {block.d} != chain dimension {self.blocks[0].d}")
        self.blocks.append(block)

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        for b in self.blocks:
            if x.shape[-1] != b.d:
                raise ShapeError(f"points have dimension {x.shape[-1]}, block expects {b.d}")
            x = b(x)
        return x

    def stages(self, x):
        """Points after each block: [x, T1(x), T2(T1(x)), ...]."""
        out = [np.asarray(x, dtype=np.float64)]
        for b in self.blocks:
            out.append(b(out[-1]))
        return out

    @property
    def n_evals(self):
        return sum(b.field.n_evals for b in self.blocks)

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for k, b in enumerate(self.blocks):
            ck = f"block_{k:03d}.json"
            save_checkpoint(b.field.store, directory / ck, include_optimizer=False)
            entry = b.field.spec()
            entry.update(method=b.integrator.method, S=b.integrator.substeps, gamma=b.gamma, checkpoint=ck)
            entries.append(entry)
        doc = {"format_version": MANIFEST_VERSION, "blocks": entries}
        (directory / "manifest.json").write_text(json.dumps(doc, indent=2) + "\n")

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        doc = json.loads((directory / "manifest.json").read_text())
        if doc.get("format_version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {doc.get('format_version')!r}")
        blocks = []
        for e in doc["blocks"]:
            store = load_checkpoint(directory / e["checkpoint"])
            w = e["widths"]
            fld = VelocityField(w[0], w[1:-1], e["activation"], e["beta"], e["time_conditioning"], store=store)
            blocks.append(FlowBlock(fld, IntegratorConfig(e["method"], e["S"]), e["gamma"]))
        return cls(blocks)


def push_forward(chain: FlowChain, P: EmpiricalMeasure) -> EmpiricalMeasure:
    if chain.blocks and P.d != chain.blocks[0].d:
        raise ShapeError(f"measure dimension {P.d} != chain dimension {chain.blocks[0].d}")
    return P.with_points(chain(P.points))


def chain_transport_cost(chain: FlowChain, P: EmpiricalMeasure) -> float:
    diff = P.points - chain(P.points)
    return P.expect(np.sum(diff * diff, axis=1))


def _record_objective(block: FlowBlock, V, batch: EmpiricalMeasure, tape: Tape):
    x = tape.const(batch.points)
    y = integrate_tape(tape, block.field, x, block.integrator)
    per_point = V.tape_value(tape, y, batch.labels) + tape.sqnorm(y - x, axis=1) * (0.5 / block.gamma)
    return tape.sum(tape.mul(per_point, tape.const(batch.weights)))


def block_objective(block: FlowBlock, V, batch: EmpiricalMeasure) -> float:
    """Weighted sample average of V(T(x)) + ||x - T(x)||^2 / (2 gamma)."""
    y = block(batch.points)
    v = np.asarray(V.value(y, batch.labels), dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("potential returned non-finite values")
    diff = batch.points - y
    return batch.expect(v + np.sum(diff * diff, axis=1) * (0.5 / block.gamma))


def block_objective_grad(block: FlowBlock, V, batch: EmpiricalMeasure, checked=False) -> float:
    """Accumulate d(objective)/d(theta) into the block's ParamStore; returns the objective."""
    tape = Tape(checked=checked)
    out = _record_objective(block, V, batch, tape)
    value = float(out.value)
    if not np.isfinite(value):
        raise NonFiniteError("non-finite block objective")
    tape.backward(out)
    return value
