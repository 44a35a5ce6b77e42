"""Discrete Wasserstein-robust hypothesis testing as a linear program.

Given samples from two classes, the worst-case pair of distributions
supported on the pooled samples maximizes the overlap sum_l min(p1_l, p2_l)
subject to a transport budget per class. The min is linearized with
auxiliary variables t_l <= p1_l, t_l <= p2_l. The program is solved with a
dense two-phase tableau simplex using Bland's rule; the pivot loop runs in
the compiled kernel when available.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from . import kernels
from .errors import ConvergenceError, InfeasibleError, UnboundedError
from .measures import EmpiricalMeasure, kernel_smooth_sample
from .rng import child_seed

MAX_SAMPLES = 60


# generic LP layer

@dataclass
class LpStandardForm:
    """Optimize c.x subject to A x (senses) b, x >= 0."""

    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    senses: List[str]
    maximize: bool = False

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64)
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.b = np.asarray(self.b, dtype=np.float64)
        m, n = self.A.shape
        if self.c.shape != (n,) or self.b.shape != (m,) or len(self.senses) != m:
            raise ValueError(f"inconsistent LP dimensions: A {self.A.shape}, c {self.c.shape}, b {self.b.shape}, "
                             f"{len(self.senses)} senses")
        bad = set(self.senses) - {"<=", "=", ">="}
        if bad:
            raise ValueError(f"unknown row senses {sorted(bad)}")

    @property
    def n_vars(self):
        return self.A.shape[1]


@dataclass
class LpSolution:
    x: np.ndarray
    objective: float
    iterations: int
    primal_residual: float
    dual_residual: float
    duality_gap: float


def _pivot(tab, row, col):
    tab[row] /= tab[row, col]
    f = tab[:, col].copy()
    f[row] = 0.0
    tab -= np.outer(f, tab[row])


def lp_solve(lp: LpStandardForm, tol=1e-9, max_iter=100_000, backend=None) -> LpSolution:
    """Two-phase dense simplex with Bland's rule."""
    impl = kernels.get_backend(backend)
    A = lp.A.copy()
    b = lp.b.copy()
    senses = list(lp.senses)
    for i in np.flatnonzero(b < 0):
        A[i] *= -1
        b[i] *= -1
        senses[i] = {"<=": ">=", ">=": "<=", "=": "="}[senses[i]]
    m, n = A.shape
    slack_rows = [i for i, s in enumerate(senses) if s != "="]
    art_rows = [i for i, s in enumerate(senses) if s != "<="]
    ns, na = len(slack_rows), len(art_rows)
    n_real = n + ns

    tab = np.zeros((m + 1, n_real + na + 1))
    tab[:m, :n] = A
    tab[:m, -1] = b
    basis = np.empty(m, dtype=np.intp)
    for k, i in enumerate(slack_rows):
        tab[i, n + k] = 1.0 if senses[i] == "<=" else -1.0
        if senses[i] == "<=":
            basis[i] = n + k
    for k, i in enumerate(art_rows):
        tab[i, n_real + k] = 1.0
        basis[i] = n_real + k
    A_std = tab[:m, :n_real].copy()
    b_std = b.copy()

    total = 0
    if na:
        tab[m, n_real:n_real + na] = 1.0
        for i in art_rows:
            tab[m] -= tab[i]
        status, it = impl.simplex_iterate(tab, basis, n_real, tol, max_iter)
        total += it
        if status == 2:
            raise ConvergenceError(f"phase 1 hit the iteration limit ({max_iter})")
        if -tab[m, -1] > tol * max(1.0, np.abs(b).max()) * 10:
            raise InfeasibleError(f"LP infeasible (phase-1 value {-tab[m, -1]:.3g})")
        keep = np.ones(m + 1, dtype=bool)
        for i in range(m):
            if basis[i] >= n_real:
                cand = np.flatnonzero(np.abs(tab[i, :n_real]) > 1e-9)
                if cand.size:
                    _pivot(tab, i, int(cand[0]))
                    basis[i] = int(cand[0])
                else:
                    keep[i] = False  # redundant equality
        tab = np.ascontiguousarray(np.delete(tab[keep], np.s_[n_real:n_real + na], axis=1))
        basis = np.ascontiguousarray(basis[keep[:m]])
        A_std = A_std[keep[:m]]
        b_std = b_std[keep[:m]]
        m = tab.shape[0] - 1

    cost = np.zeros(n_real)
    cost[:n] = -lp.c if lp.maximize else lp.c
    tab[m] = 0.0
    tab[m, :n_real] = cost
    for i in range(m):
        if cost[basis[i]] != 0.0:
            tab[m] -= cost[basis[i]] * tab[i]
    status, it = impl.simplex_iterate(tab, basis, n_real, tol, max_iter)
    total += it
    if status == 1:
        raise UnboundedError("LP unbounded")
    if status == 2:
        raise ConvergenceError(f"phase 2 hit the iteration limit ({max_iter})")

    xs = np.zeros(n_real)
    xs[basis] = tab[:m, -1]
    x = xs[:n]

    # certificate: duals from the final basis
    B = A_std[:, basis]
    y = np.linalg.lstsq(B.T, cost[basis], rcond=None)[0]
    reduced = cost - A_std.T @ y
    dual_res = float(max(0.0, -reduced.min()))
    gap = float(abs(cost @ xs - b_std @ y))

    Ax = lp.A @ x
    viol = [np.abs(Ax - lp.b)[np.array(lp.senses) == "="],
            np.maximum(Ax - lp.b, 0)[np.array(lp.senses) == "<="],
            np.maximum(lp.b - Ax, 0)[np.array(lp.senses) == ">="],
            np.maximum(-x, 0)]
    primal_res = float(max((v.max() for v in viol if v.size), default=0.0))
    return LpSolution(x, float(lp.c @ x), total, primal_res, dual_res, gap)


# WDRO program

@dataclass
class WdroLpInstance:
    """Pooled samples (first n1 from class 1, next n2 from class 2) and budgets."""

    points: np.ndarray
    n1: int
    n2: int
    eps1: float
    eps2: float
    squared_cost: bool = False

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        self.points = pts
        self.n1, self.n2 = int(self.n1), int(self.n2)
        if self.n1 < 1 or self.n2 < 1 or self.n1 + self.n2 != pts.shape[0]:
            raise ValueError(f"n1 + n2 must equal the number of points ({pts.shape[0]}), both >= 1")
        if self.n > MAX_SAMPLES:
            raise ValueError(f"the dense LP is limited to n <= {MAX_SAMPLES} samples, got {self.n}")
        if self.eps1 < 0 or self.eps2 < 0:
            raise ValueError("radii must be nonnegative")

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def dist(self):
        diff = self.points[:, None, :] - self.points[None, :, :]
        sq = np.sum(diff * diff, axis=2)
        return sq if self.squared_cost else np.sqrt(sq)


@dataclass
class DiscreteLfdPair:
    p1: np.ndarray
    p2: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    objective: float
    lp: Optional[LpSolution] = None


def _index(n):
    p1 = lambda l: l
    p2 = lambda l: n + l
    g = lambda k, l, m: 2 * n + k * n * n + l * n + m
    t = lambda l: 2 * n + 2 * n * n + l
    return p1, p2, g, t


def build_wdro_lp(inst: WdroLpInstance) -> LpStandardForm:
    """Variables ordered as p1 (n), p2 (n), gamma1 (n*n), gamma2 (n*n), t (n)."""
    n, n1 = inst.n, inst.n1
    nv = 2 * n + 2 * n * n + n
    P1, P2, G, T = _index(n)
    rows, rhs, senses = [], [], []

    def row():
        r = np.zeros(nv)
        rows.append(r)
        return r

    for l in range(n):
        r = row(); r[T(l)] = 1; r[P1(l)] = -1; rhs.append(0.0); senses.append("<=")
        r = row(); r[T(l)] = 1; r[P2(l)] = -1; rhs.append(0.0); senses.append("<=")
    D = inst.dist.ravel()
    for k, eps in enumerate((inst.eps1, inst.eps2)):
        r = row()
        r[G(k, 0, 0):G(k, 0, 0) + n * n] = D
        rhs.append(float(eps)); senses.append("<=")
    for k in range(2):
        for l in range(n):
            r = row()
            r[G(k, l, 0):G(k, l, 0) + n] = 1
            in_class = (l < n1) if k == 0 else (l >= n1)
            rhs.append((1.0 / (n1 if k == 0 else inst.n2)) if in_class else 0.0)
            senses.append("=")
    for k, Pk in enumerate((P1, P2)):
        for m_ in range(n):
            r = row()
            r[[G(k, l, m_) for l in range(n)]] = 1
            r[Pk(m_)] = -1
            rhs.append(0.0); senses.append("=")
    c = np.zeros(nv)
    c[T(0):T(0) + n] = 1.0
    return LpStandardForm(c, np.array(rows), np.array(rhs), senses, maximize=True)


def check_pair(inst: WdroLpInstance, pair: DiscreteLfdPair, tol=1e-7):
    """Raise AssertionError if marginal or budget constraints are violated."""
    n, n1 = inst.n, inst.n1
    for k, (g, p, eps) in enumerate(((pair.gamma1, pair.p1, inst.eps1), (pair.gamma2, pair.p2, inst.eps2))):
        rows = g.sum(axis=1)
        target = np.zeros(n)
        if k == 0:
            target[:n1] = 1.0 / n1
        else:
            target[n1:] = 1.0 / inst.n2
        assert np.abs(rows - target).max() <= tol, f"class {k + 1}: row marginals off"
        assert np.abs(g.sum(axis=0) - p).max() <= tol, f"class {k + 1}: column marginals off"
        assert np.sum(g * inst.dist) <= eps + tol, f"class {k + 1}: budget exceeded"
        assert g.min() >= -tol and p.min() >= -tol, f"class {k + 1}: negative mass"
    assert -tol <= pair.objective <= 1 + tol


def solve_wdro(inst: WdroLpInstance, tol=1e-9, backend=None) -> DiscreteLfdPair:
    n = inst.n
    sol = lp_solve(build_wdro_lp(inst), tol=tol, backend=backend)
    x = sol.x
    P1, P2, G, T = _index(n)
    g1 = x[G(0, 0, 0):G(0, 0, 0) + n * n].reshape(n, n)
    g2 = x[G(1, 0, 0):G(1, 0, 0) + n * n].reshape(n, n)
    p1, p2 = x[:n].copy(), x[n:2 * n].copy()
    pair = DiscreteLfdPair(p1, p2, g1, g2, float(np.minimum(p1, p2).sum()), sol)
    check_pair(inst, pair)
    return pair


def smoothed_lfd_sampler(pair: DiscreteLfdPair, points, h, count, seed) -> Tuple[EmpiricalMeasure, EmpiricalMeasure]:
    """Gaussian-kernel smoothing of each discrete LFD on the pooled support."""
    out = []
    for k, p in enumerate((pair.p1, pair.p2)):
        w = np.clip(p, 0.0, None)
        Q = EmpiricalMeasure(points, w / w.sum())
        out.append(kernel_smooth_sample(Q, h, count, child_seed(seed, k)))
    return out[0], out[1]


# JSON io

def instance_to_json(inst: WdroLpInstance) -> str:
    doc = {"points": inst.points.tolist(), "n1": inst.n1, "n2": inst.n2,
           "eps1": inst.eps1, "eps2": inst.eps2}
    if inst.squared_cost:
        doc["squared_cost"] = True
    return json.dumps(doc)


def instance_from_json(text) -> WdroLpInstance:
    doc = json.loads(text)
    return WdroLpInstance(np.array(doc["points"], dtype=np.float64), doc["n1"], doc["n2"],
                          float(doc["eps1"]), float(doc["eps2"]), bool(doc.get("squared_cost", False)))


def pair_to_json(pair: DiscreteLfdPair) -> str:
    return json.dumps({"p1": pair.p1.tolist(), "p2": pair.p2.tolist(), "gamma1": pair.gamma1.tolist(),
                       "gamma2": pair.gamma2.tolist(), "objective": pair.objective})


def load_instance(path) -> WdroLpInstance:
    return instance_from_json(Path(path).read_text())
