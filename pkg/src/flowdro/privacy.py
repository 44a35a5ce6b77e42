"""Perturbation mechanisms for query privacy and their type-I/II error audit.

A distributional mechanism (DPM) pushes query outputs through a trained
flow; additive mechanisms (APM) add i.i.d. Gaussian or Laplace noise. All
mechanisms are compared at a matched mean l2 displacement.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from .errors import ShapeError
from .flow import FlowChain
from .measures import EmpiricalMeasure
from .rng import child_seed, make_rng
from .risks import CrossEntropyRisk, MLPClassifier, NegatedLoss

KINDS = ("DPM", "APM_Gaussian", "APM_Laplace")
_ALIASES = {"dpm": "DPM", "gaussian": "APM_Gaussian", "apm_gaussian": "APM_Gaussian",
            "laplace": "APM_Laplace", "apm_laplace": "APM_Laplace"}


def _kind(kind):
    k = _ALIASES.get(str(kind).lower())
    if k is None:
        raise ValueError(f"unknown mechanism kind {kind!r}; expected one of {KINDS}")
    return k


def mean_displacement(before, after):
    return float(np.mean(np.linalg.norm(np.asarray(after) - np.asarray(before), axis=-1)))


@dataclass
class Mechanism:
    """``budget`` is the mean l2 displacement the mechanism was calibrated to."""

    kind: str
    budget: float
    scale: float = 0.0
    flow: Optional[FlowChain] = None

    def __post_init__(self):
        self.kind = _kind(self.kind)
        if self.scale < 0 or self.budget < 0:
            raise ValueError("scale and budget must be nonnegative")
        if self.kind == "DPM" and self.flow is None:
            raise ValueError("DPM needs a flow chain")

    @property
    def d(self):
        if self.flow is not None and self.flow.blocks:
            return self.flow.blocks[0].d
        return None

    @classmethod
    def dpm(cls, flow: FlowChain, reference: EmpiricalMeasure):
        """DPM whose budget is the chain's measured mean displacement on ``reference``."""
        return cls("DPM", mean_displacement(reference.points, flow(reference.points)), 0.0, flow)

    @classmethod
    def additive(cls, kind, epsilon, d, mc_samples=10 ** 6, seed=0):
        kind = _kind(kind)
        if kind == "DPM":
            raise ValueError("additive mechanism must be APM_Gaussian or APM_Laplace")
        return cls(kind, float(epsilon), calibrate_apm(kind, epsilon, d, mc_samples, seed))


def _chi_mean(d):
    return math.sqrt(2.0) * math.exp(math.lgamma((d + 1) / 2.0) - math.lgamma(d / 2.0))


def calibrate_apm(kind, epsilon, d, mc_samples=10 ** 6, seed=0):
    """Noise scale giving E||xi||_2 = epsilon for i.i.d. noise in R^d.

    Gaussian uses the chi mean, which is exact in every dimension. Laplace
    is exact in d = 1 (E|xi| = b) and otherwise uses a seeded Monte-Carlo
    estimate of E||L|| for unit-scale noise, then rescales.
    """
    kind = _kind(kind)
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    if d < 1:
        raise ValueError("dimension must be >= 1")
    if epsilon == 0:
        return 0.0
    if kind == "APM_Gaussian":
        return float(epsilon) / _chi_mean(int(d))
    if kind == "APM_Laplace":
        if d == 1:
            return float(epsilon)
        draws = make_rng(seed).laplace(size=(int(mc_samples), int(d)))
        return float(epsilon) / float(np.mean(np.linalg.norm(draws, axis=1)))
    raise ValueError("DPM budgets come from the flow, not from calibration")


def apply_mechanism(M: Mechanism, x, seed=0):
    """Perturb one query output (d,) or a batch (n, d)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None] if single else x
    if M.d is not None and X.shape[1] != M.d:
        raise ShapeError(f"query dimension {X.shape[1]} != mechanism dimension {M.d}")
    if M.kind == "DPM":
        out = M.flow(X)
    elif M.scale == 0:
        out = X.copy()
    elif M.kind == "APM_Gaussian":
        out = X + M.scale * make_rng(seed).standard_normal(X.shape)
    else:
        out = X + make_rng(seed).laplace(scale=M.scale, size=X.shape)
    return out[0] if single else out


def missing_item_query(D, n_classes=None, labels=None):
    """Average of C-1 class representatives, one per class other than the missing one."""
    D = np.asarray(D, dtype=np.float64)
    if D.ndim == 1:
        D = D[None]
    if n_classes is not None and D.shape[0] != int(n_classes) - 1:
        raise ShapeError(f"expected {int(n_classes) - 1} points for {n_classes} classes, got {D.shape[0]}")
    if labels is not None and len(set(np.asarray(labels).tolist())) != D.shape[0]:
        raise ValueError("representatives must come from distinct classes")
    return D.mean(axis=0)


@dataclass
class QueryTask:
    """``point`` queries release a sample as is; ``missing_item`` queries
    release the average of one sample from every class but one, and the
    label to infer is the missing class."""

    kind: str
    n_classes: int

    def __post_init__(self):
        aliases = {"point": "point", "pointquery": "point", "missing_item": "missing_item",
                   "missingitemquery": "missing_item"}
        k = aliases.get(str(self.kind).lower())
        if k is None:
            raise ValueError(f"unknown query kind {self.kind!r}")
        self.kind = k
        if int(self.n_classes) < 2:
            raise ValueError("need at least two classes")
        self.n_classes = int(self.n_classes)

    def queries(self, data: EmpiricalMeasure, count=None, seed=0) -> EmpiricalMeasure:
        """Query outputs with their private labels, drawn from ``data``."""
        if data.labels is None:
            raise ValueError("query tasks need a labeled measure")
        present = np.unique(data.labels)
        if self.kind == "point":
            return data
        if len(present) < self.n_classes:
            raise ValueError(f"missing-item queries need {self.n_classes} classes, found {len(present)}")
        C = self.n_classes
        count = data.n if count is None else int(count)
        rng = make_rng(seed)
        pools = [np.flatnonzero(data.labels == k) for k in range(C)]
        out = np.empty((count, data.d))
        missing = np.arange(count) % C
        for i, k in enumerate(missing):
            picks = [pools[j][rng.integers(len(pools[j]))] for j in range(C) if j != k]
            out[i] = missing_item_query(data.points[picks], C)
        return EmpiricalMeasure.uniform(out, missing)


@dataclass
class ErrorReport:
    mechanism: str
    budget: float
    displacement: float
    classes: List[int] = field(default_factory=list)
    alpha: List[float] = field(default_factory=list)
    beta: List[float] = field(default_factory=list)
    counts: List[int] = field(default_factory=list)
    alpha_avg: float = 0.0
    beta_avg: float = 0.0

    @property
    def total(self):
        return self.alpha_avg + self.beta_avg

    def to_json(self):
        d = asdict(self)
        d = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}
        d["alpha"] = [None if math.isnan(a) else a for a in self.alpha]
        d["beta"] = [None if math.isnan(b) else b for b in self.beta]
        return json.dumps(d, indent=2)

    def to_csv(self):
        """Rows ``class, alpha, beta``; footer rows ``average`` and
        ``budget`` (recorded budget, measured displacement)."""
        fmt = lambda v: "" if v is None or math.isnan(v) else format(float(v), ".17g")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("class", "alpha", "beta"))
        for k, a, b in zip(self.classes, self.alpha, self.beta):
            w.writerow((k, fmt(a), fmt(b)))
        w.writerow(("average", fmt(self.alpha_avg), fmt(self.beta_avg)))
        w.writerow(("budget", fmt(self.budget), fmt(self.displacement)))
        return buf.getvalue()


def error_rates(classifier: MLPClassifier, M: Mechanism, task: QueryTask, test: EmpiricalMeasure,
                seed=0, count=None, prepared=False, repeats=1) -> ErrorReport:
    """Type-I error alpha(k) = P(pred = k | y != k) and type-II error
    beta(k) = P(pred != k | y = k) over perturbed queries.

    With ``prepared`` the test measure already holds query outputs and
    their private labels, so no queries are drawn. ``repeats`` audits each
    query that many times with fresh noise, which only matters for APMs.
    """
    if classifier.n_classes != task.n_classes:
        raise ValueError(f"classifier has {classifier.n_classes} classes, task has {task.n_classes}")
    Q = test if prepared else task.queries(test, count, child_seed(seed, 0))
    reps = 1 if M.kind == "DPM" else max(int(repeats), 1)
    X = np.tile(Q.points, (reps, 1))
    y = np.tile(Q.labels, reps)
    pert = apply_mechanism(M, X, child_seed(seed, 1))
    pred = classifier.predict(pert)
    rep = ErrorReport(M.kind, M.budget, mean_displacement(X, pert))
    for k in range(task.n_classes):
        pos = y == k
        rep.classes.append(k)
        rep.counts.append(int(pos.sum()))
        if not pos.any() or pos.all():
            warnings.warn(f"class {k} absent or alone in the test queries; rates undefined", stacklevel=2)
            rep.alpha.append(float("nan"))
            rep.beta.append(float("nan"))
            continue
        rep.alpha.append(float(np.mean(pred[~pos] == k)))
        rep.beta.append(float(np.mean(pred[pos] != k)))
    a = np.array(rep.alpha)
    ok = ~np.isnan(a)
    rep.alpha_avg = float(a[ok].mean()) if ok.any() else float("nan")
    rep.beta_avg = float(np.array(rep.beta)[ok].mean()) if ok.any() else float("nan")
    return rep


def train_dpm(classifier: MLPClassifier, reference: EmpiricalMeasure, cfg) -> Mechanism:
    """Flow trained as a worst case for the fixed classifier (V = -cross-entropy),
    shared across classes so that releasing a query needs no label."""
    from .train import train_lfd

    V = NegatedLoss(CrossEntropyRisk(classifier))
    shared = cfg.__class__(**{**asdict(cfg), "per_class": False})
    chain, _ = train_lfd(V, reference, shared)
    return Mechanism.dpm(chain, reference)
