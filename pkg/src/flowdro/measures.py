"""Empirical and diagonal-Gaussian measures, exact W2 at small scale, kernel smoothing."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import kernels
from .errors import ShapeError
from .rng import make_rng

MAX_ASSIGNMENT = 4096


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted point cloud; ``labels`` is an optional integer side-array."""

    points: np.ndarray
    weights: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ShapeError(f"points must be a nonempty (n, d) array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (pts.shape[0],):
            raise ShapeError(f"weights shape {w.shape} != ({pts.shape[0]},)")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != (pts.shape[0],):
                raise ShapeError(f"labels shape {lab.shape} != ({pts.shape[0]},)")
            object.__setattr__(self, "labels", lab.astype(np.intp))

    @classmethod
    def uniform(cls, points, labels=None):
        pts = np.asarray(points, dtype=np.float64)
        n = pts.shape[0]
        return cls(pts, np.full(n, 1.0 / n), labels)

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def d(self):
        return self.points.shape[1]

    @property
    def is_uniform(self):
        return bool(np.all(self.weights == self.weights[0]))

    def with_points(self, points):
        """Same weights and labels, moved support (labels ride along)."""
        return EmpiricalMeasure(points, self.weights, self.labels)

    def select(self, mask):
        mask = np.asarray(mask)
        idx = np.flatnonzero(mask) if mask.dtype == bool else mask
        w = self.weights[idx]
        lab = None if self.labels is None else self.labels[idx]
        return EmpiricalMeasure(self.points[idx], w / w.sum(), lab)

    def by_label(self, k):
        if self.labels is None:
            raise ValueError("measure has no labels")
        return self.select(self.labels == k)

    def mean(self):
        return self.weights @ self.points

    def expect(self, values):
        return float(self.weights @ np.asarray(values, dtype=np.float64))


@dataclass(frozen=True)
class DiagGaussian:
    mean: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        v = np.atleast_1d(np.asarray(self.variances, dtype=np.float64))
        if m.shape != v.shape:
            raise ShapeError("mean and variances differ in length")
        if np.any(v <= 0):
            raise ValueError("variances must be strictly positive")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "variances", v)

    @property
    def d(self):
        return self.mean.shape[0]

    def sample(self, n, seed):
        rng = make_rng(seed)
        return self.mean + np.sqrt(self.variances) * rng.standard_normal((n, self.d))


@dataclass
class TransportPlan:
    cost: float
    matching: Optional[np.ndarray] = None
    coupling: Optional[np.ndarray] = None


def sq_dists(x, y):
    """Exact pairwise squared distances (no expansion trick, no cancellation)."""
    out = np.zeros((x.shape[0], y.shape[0]))
    for k in range(x.shape[1]):
        diff = x[:, k, None] - y[None, :, k]
        out += diff * diff
    return out


def resample_to(P: EmpiricalMeasure, n: int, seed=0) -> EmpiricalMeasure:
    """Seeded subsample of a uniform measure down to ``n`` points."""
    rng = make_rng(seed)
    idx = np.sort(rng.choice(P.n, size=n, replace=False))
    lab = None if P.labels is None else P.labels[idx]
    return EmpiricalMeasure.uniform(P.points[idx], lab)


def match_sizes(P, Q, seed=0):
    if P.n == Q.n:
        return P, Q
    warnings.warn(f"resampling to equal sizes ({P.n} vs {Q.n})", stacklevel=3)
    if P.n > Q.n:
        return resample_to(P, Q.n, seed), Q
    return P, resample_to(Q, P.n, seed)


def assignment(P: EmpiricalMeasure, Q: EmpiricalMeasure):
    """Optimal matching for uniform equal-size clouds: (col_of_row, mean cost)."""
    if P.n > MAX_ASSIGNMENT:
        raise ValueError(f"assignment limited to n <= {MAX_ASSIGNMENT}, got {P.n}")
    if P.d != Q.d:
        raise ShapeError(f"dimension mismatch {P.d} vs {Q.d}")
    cost = sq_dists(P.points, Q.points)
    perm = np.asarray(kernels.linear_assignment(cost))
    return perm, float(cost[np.arange(P.n), perm].mean())


def w2_assignment(P: EmpiricalMeasure, Q: EmpiricalMeasure, seed=0):
    """Exact W2 between uniform clouds; returns ``(w2, TransportPlan)``.

    Unequal sizes are handled by seeded resampling of the larger cloud.
    Non-uniform weights are only supported in 1D (quantile coupling).
    """
    if P.d != Q.d:
        raise ShapeError(f"dimension mismatch {P.d} vs {Q.d}")
    if not (P.is_uniform and Q.is_uniform):
        if P.d == 1:
            w = w2_1d(P, Q)
            return w, TransportPlan(cost=w * w)
        raise ValueError("non-uniform weights are only supported for d = 1")
    P, Q = match_sizes(P, Q, seed)
    perm, cost = assignment(P, Q)
    return float(np.sqrt(cost)), TransportPlan(cost=cost, matching=perm)


def w2_1d(P: EmpiricalMeasure, Q: EmpiricalMeasure) -> float:
    """W2 on the line through the monotone (quantile) coupling; handles weights."""
    if P.d != 1 or Q.d != 1:
        raise ShapeError("w2_1d needs one-dimensional measures")
    if P.is_uniform and Q.is_uniform and P.n == Q.n:
        diff = np.sort(P.points[:, 0]) - np.sort(Q.points[:, 0])
        return float(np.sqrt(np.mean(diff * diff)))
    ip, iq = np.argsort(P.points[:, 0]), np.argsort(Q.points[:, 0])
    xp, wp = P.points[ip, 0], P.weights[ip]
    xq, wq = Q.points[iq, 0], Q.weights[iq]
    cp, cq = np.cumsum(wp), np.cumsum(wq)
    cp[-1] = cq[-1] = 1.0
    levels = np.union1d(cp, cq)
    mass = np.diff(np.concatenate([[0.0], levels]))
    # quantile index of each level interval (right-continuous inverse CDF)
    i = np.minimum(np.searchsorted(cp, levels, side="left"), len(xp) - 1)
    j = np.minimum(np.searchsorted(cq, levels, side="left"), len(xq) - 1)
    diff = xp[i] - xq[j]
    return float(np.sqrt(np.sum(mass * diff * diff)))


def w2_gaussian_diag(A: DiagGaussian, B: DiagGaussian) -> float:
    if A.d != B.d:
        raise ShapeError(f"dimension mismatch {A.d} vs {B.d}")
    dm = A.mean - B.mean
    ds = np.sqrt(A.variances) - np.sqrt(B.variances)
    return float(np.sqrt(dm @ dm + ds @ ds))


def pushforward_cost(T: Callable[[np.ndarray], np.ndarray], P: EmpiricalMeasure) -> float:
    """E_P ||x - T(x)||^2, an upper bound on W2(T#P, P)^2."""
    y = np.asarray(T(P.points), dtype=np.float64)
    if y.shape != P.points.shape:
        raise ShapeError(f"map returned shape {y.shape}, expected {P.points.shape}")
    diff = P.points - y
    return P.expect(np.sum(diff * diff, axis=1))


def kernel_smooth_sample(Q: EmpiricalMeasure, h: float, count: int, seed) -> EmpiricalMeasure:
    """Sample from the Gaussian mixture sum_i w_i N(x_i, h^2 I)."""
    if not h > 0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    rng = make_rng(seed)
    idx = rng.choice(Q.n, size=count, p=Q.weights)
    pts = Q.points[idx] + h * rng.standard_normal((count, Q.d))
    lab = None if Q.labels is None else Q.labels[idx]
    return EmpiricalMeasure.uniform(pts, lab)


# CSV point-cloud files

def write_points_csv(path, P: EmpiricalMeasure, with_weights=True):
    header = [f"dim{k}" for k in range(P.d)]
    if with_weights:
        header.append("weight")
    if P.labels is not None:
        header.append("label")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(P.n):
            row = [format(v, ".17g") for v in P.points[i]]
            if with_weights:
                row.append(format(P.weights[i], ".17g"))
            if P.labels is not None:
                row.append(str(int(P.labels[i])))
            w.writerow(row)


def read_points_csv(path) -> EmpiricalMeasure:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    dims = [i for i, h in enumerate(header) if h.startswith("dim")]
    if not dims or [header[i] for i in dims] != [f"dim{k}" for k in range(len(dims))]:
        raise ValueError(f"{path}: header must start with dim0,...,dim{{d-1}}")
    data = np.array([[float(r[i]) for i in dims] for r in body])
    labels = None
    if "label" in header:
        li = header.index("label")
        labels = np.array([int(r[li]) for r in body])
    if "weight" in header:
        wi = header.index("weight")
        w = np.array([float(r[wi]) for r in body])
        return EmpiricalMeasure(data, w / w.sum(), labels)
    return EmpiricalMeasure.uniform(data, labels)
