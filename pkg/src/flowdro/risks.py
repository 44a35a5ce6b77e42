"""Decision functions, losses, potentials V = -r, and the pointwise PGD attack."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import ParamStore, Tape, adam_step
from .errors import ShapeError
from .measures import EmpiricalMeasure
from .rng import make_rng


def _mlp_store(widths, seed, prefix=""):
    rng = make_rng(seed)
    store = ParamStore()
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        store.add(f"{prefix}W{i}", rng.standard_normal((a, b)) * np.sqrt(2.0 / (a + b)))
        store.add(f"{prefix}b{i}", np.zeros(b))
    return store


class _MLP:
    activation = "softplus"
    beta = 20.0

    def __init__(self, widths, activation="softplus", beta=20.0, seed=0):
        self.widths = tuple(int(w) for w in widths)
        self.activation = activation
        self.beta = float(beta)
        self.store = _mlp_store(self.widths, seed)

    @property
    def n_layers(self):
        return len(self.widths) - 1

    def forward(self, x):
        p = self.store.params
        h = np.asarray(x, dtype=np.float64)
        for i in range(self.n_layers):
            h = h @ p[f"W{i}"] + p[f"b{i}"]
            if i < self.n_layers - 1:
                h = np.logaddexp(0.0, self.beta * h) / self.beta if self.activation == "softplus" else np.tanh(h)
        return h

    def record(self, tape: Tape, x, trainable=False):
        """Forward pass on a tape; frozen parameters enter as constants."""
        get = (lambda n: tape.param(self.store, n)) if trainable else (lambda n: tape.const(self.store[n]))
        h = x
        for i in range(self.n_layers):
            h = tape.affine(h, get(f"W{i}"), get(f"b{i}"))
            if i < self.n_layers - 1:
                h = tape.activation(h, self.activation, self.beta)
        return h


class MLPClassifier(_MLP):
    """Softmax classifier phi: R^d -> R^C."""

    def __init__(self, d, n_classes, hidden=(32, 32), activation="softplus", beta=20.0, seed=0):
        super().__init__((d,) + tuple(hidden) + (n_classes,), activation, beta, seed)
        self.n_classes = int(n_classes)

    def logits(self, x):
        return self.forward(x)

    def probs(self, x):
        z = self.logits(x)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, x):
        return np.argmax(self.logits(x), axis=1)


class ScalarDetector(_MLP):
    """Scalar detector phi: R^d -> R; positive values favour class 1."""

    def __init__(self, d, hidden=(16,), activation="softplus", beta=20.0, seed=0):
        super().__init__((d,) + tuple(hidden) + (1,), activation, beta, seed)

    def phi(self, x):
        return self.forward(x)[:, 0]

    def record_phi(self, tape, x, trainable=False):
        return tape.sum(self.record(tape, x, trainable), axis=1)


GENERATING_KINDS = ("exp", "logistic", "quadhinge")


@dataclass(frozen=True)
class GeneratingFunction:
    """exp(t), log(1 + exp(t)) or max(t + 1, 0)^2."""

    kind: str = "logistic"

    def __post_init__(self):
        if self.kind not in GENERATING_KINDS:
            raise ValueError(f"generating function must be one of {GENERATING_KINDS}")

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "exp":
            return np.exp(t)
        if self.kind == "logistic":
            return np.logaddexp(0.0, t)
        return np.maximum(t + 1.0, 0.0) ** 2

    def record(self, tape, t):
        if self.kind == "exp":
            return tape.exp(t)
        if self.kind == "logistic":
            return tape.softplus(t, beta=1.0)
        r = tape.relu(t + 1.0)
        return tape.mul(r, r)


# Risk models: per-point loss r(x; phi) with optional labels.

class RiskModel:
    needs_labels = True
    store: Optional[ParamStore] = None

    def tape_loss(self, tape, x, labels, trainable=False):
        raise NotImplementedError

    def _labels(self, x, labels):
        if labels is None:
            if self.needs_labels:
                raise ValueError(f"{type(self).__name__} needs labels")
            return None
        labels = np.asarray(labels, dtype=np.intp)
        if labels.shape != (np.shape(x)[0],):
            raise ShapeError(f"labels shape {labels.shape} does not match {np.shape(x)[0]} points")
        return labels

    def loss(self, x, labels=None):
        tape = Tape()
        return self.tape_loss(tape, tape.const(np.asarray(x, dtype=np.float64)), self._labels(x, labels)).value

    def loss_grad(self, x, labels=None):
        """Per-point gradient of r with respect to x."""
        tape = Tape()
        xn = tape.input(np.asarray(x, dtype=np.float64))
        total = tape.sum(self.tape_loss(tape, xn, self._labels(x, labels)))
        return tape.backward(total)[0]


class CrossEntropyRisk(RiskModel):
    def __init__(self, model: MLPClassifier):
        self.model = model
        self.store = model.store

    def tape_loss(self, tape, x, labels, trainable=False):
        return tape.softmax_xent(self.model.record(tape, x, trainable), labels)


class HypothesisRisk(RiskModel):
    """Label 0 contributes f(-phi(x)), label 1 contributes f(phi(x))."""

    def __init__(self, detector: ScalarDetector, f: GeneratingFunction):
        self.detector = detector
        self.f = f
        self.store = detector.store

    def tape_loss(self, tape, x, labels, trainable=False):
        sign = tape.const(2.0 * labels - 1.0)
        return self.f.record(tape, tape.mul(self.detector.record_phi(tape, x, trainable), sign))


class LinearRisk(RiskModel):
    """r(x) = a . x, label free."""

    needs_labels = False

    def __init__(self, a):
        self.a = np.asarray(a, dtype=np.float64)

    def tape_loss(self, tape, x, labels, trainable=False):
        return tape.sum(tape.mul(x, tape.const(np.broadcast_to(self.a, x.shape))), axis=1)


# Potentials V(z).

class Potential:
    L: Optional[float] = None

    def value(self, z, labels=None):
        raise NotImplementedError

    def grad(self, z, labels=None):
        raise NotImplementedError

    def tape_value(self, tape, z, labels=None):
        raise NotImplementedError


@dataclass
class QuadraticPotential(Potential):
    """V(z) = a/2 ||z - c||^2."""

    center: np.ndarray = 0.0
    a: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.L = abs(float(self.a))

    def value(self, z, labels=None):
        diff = z - self.center
        return 0.5 * self.a * np.sum(diff * diff, axis=1)

    def grad(self, z, labels=None):
        return self.a * (z - self.center)

    def tape_value(self, tape, z, labels=None):
        return tape.sqnorm(z - np.broadcast_to(self.center, z.shape), axis=1) * (0.5 * self.a)

    def prox(self, x, gamma):
        return (x + gamma * self.a * self.center) / (1.0 + gamma * self.a)


@dataclass
class LinearPotential(Potential):
    """V(z) = a . z."""

    slope: np.ndarray

    def __post_init__(self):
        self.slope = np.asarray(self.slope, dtype=np.float64)
        self.L = 0.0

    def value(self, z, labels=None):
        return z @ self.slope

    def grad(self, z, labels=None):
        return np.broadcast_to(self.slope, z.shape).copy()

    def tape_value(self, tape, z, labels=None):
        return tape.sum(tape.mul(z, tape.const(np.broadcast_to(self.slope, z.shape))), axis=1)

    def prox(self, x, gamma):
        return x - gamma * self.slope


class NegatedLoss(Potential):
    """V(z) = -r(z; phi) for a fixed risk model."""

    def __init__(self, risk: RiskModel, L=None):
        self.risk = risk
        self.L = L

    def value(self, z, labels=None):
        return -self.risk.loss(z, labels)

    def grad(self, z, labels=None):
        return -self.risk.loss_grad(z, labels)

    def tape_value(self, tape, z, labels=None):
        return self.risk.tape_loss(tape, z, labels) * -1.0


def estimate_smoothness(V: Potential, points, labels=None, pairs=1000, seed=0):
    """Largest observed ||grad V(a) - grad V(b)|| / ||a - b|| over random pairs.

    Half the pairs are global (two data points), half local (a data point
    and a small perturbation of it).
    """
    rng = make_rng(seed)
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    scale = points.std(axis=0).mean() + 1e-12
    i = rng.integers(0, n, size=pairs)
    j = rng.integers(0, n, size=pairs)
    a = points[i]
    b = points[j].copy()
    half = pairs // 2
    b[:half] = a[:half] + 0.05 * scale * rng.standard_normal(a[:half].shape)
    lab_a = None if labels is None else labels[i]
    ga, gb = V.grad(a, lab_a), V.grad(b, lab_a)
    num = np.linalg.norm(ga - gb, axis=1)
    den = np.linalg.norm(a - b, axis=1)
    ok = den > 1e-12
    return float(np.max(num[ok] / den[ok])) if ok.any() else 0.0


# Evaluation.

def risk_eval(model: RiskModel, Q: EmpiricalMeasure) -> float:
    if model.needs_labels and Q.labels is None:
        raise ValueError("risk requires labels but the measure is unlabeled")
    return Q.expect(model.loss(Q.points, Q.labels))


def accuracy_eval(model: MLPClassifier, Q: EmpiricalMeasure) -> float:
    if Q.labels is None:
        raise ValueError("accuracy requires labels")
    return 100.0 * Q.expect(model.predict(Q.points) == Q.labels)


def hypothesis_risk(detector: ScalarDetector, Q0: EmpiricalMeasure, Q1: EmpiricalMeasure, f: GeneratingFunction):
    if Q0.d != Q1.d:
        raise ShapeError("Q0 and Q1 differ in dimension")
    return Q0.expect(f(-detector.phi(Q0.points))) + Q1.expect(f(detector.phi(Q1.points)))


def _project(delta, eps, norm):
    if norm == "linf":
        return np.clip(delta, -eps, eps)
    nrm = np.linalg.norm(delta, axis=1, keepdims=True)
    factor = np.where(nrm > eps, eps / np.maximum(nrm, 1e-300), 1.0)
    return delta * factor


def pgd_attack(model: RiskModel, x, epsilon, labels=None, norm="l2", steps=40, step_size=None):
    """Projected gradient ascent on r(x + delta) over ||delta|| <= epsilon.

    Works on a batch (n, d). Starts at delta = 0 and keeps the best iterate
    per point, so the returned loss is never below the clean loss.
    """
    if norm not in ("l2", "linf"):
        raise ValueError(f"norm must be l2 or linf, got {norm!r}")
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None]
        labels = None if labels is None else np.atleast_1d(labels)
    if epsilon == 0:
        return x[0].copy() if single else x.copy()
    alpha = 2.5 * epsilon / steps if step_size is None else step_size
    delta = np.zeros_like(x)
    best = x.copy()
    best_loss = model.loss(x, labels)
    for _ in range(steps):
        g = model.loss_grad(x + delta, labels)
        if norm == "l2":
            gn = np.linalg.norm(g, axis=1, keepdims=True)
            step = np.where(gn > 0, g / np.maximum(gn, 1e-300), 0.0)
        else:
            step = np.sign(g)
        delta = _project(delta + alpha * step, epsilon, norm)
        cur = model.loss(x + delta, labels)
        improved = cur > best_loss
        best[improved] = x[improved] + delta[improved]
        best_loss = np.where(improved, cur, best_loss)
    return best[0] if single else best


def train_model(risk: RiskModel, data: EmpiricalMeasure, epochs, lr=1e-2, seed=0, batch_size=None):
    """ERM with Adam on the weighted empirical risk; returns per-epoch mean loss."""
    if risk.needs_labels and data.labels is None:
        raise ValueError("training requires labels")
    rng = make_rng(seed)
    n = data.n
    bs = n if batch_size is None else min(int(batch_size), n)
    curve = []
    for _ in range(int(epochs)):
        order = rng.permutation(n) if bs < n else np.arange(n)
        total = 0.0
        for s in range(0, n, bs):
            idx = order[s:s + bs]
            w = data.weights[idx] / data.weights[idx].sum()
            lab = None if data.labels is None else data.labels[idx]
            tape = Tape()
            per = risk.tape_loss(tape, tape.const(data.points[idx]), lab, trainable=True)
            out = tape.sum(tape.mul(per, tape.const(w)))
            tape.backward(out)
            adam_step(risk.store, lr=lr)
            total += float(out.value) * len(idx)
        curve.append(total / n)
    return curve


def train_classifier(model: MLPClassifier, data: EmpiricalMeasure, epochs, lr=1e-2, seed=0, batch_size=None):
    if data.labels is not None and len(np.unique(data.labels)) < 2:
        warnings.warn("training data contains a single class", stacklevel=2)
    curve = train_model(CrossEntropyRisk(model), data, epochs, lr, seed, batch_size)
    return model, curve
