"""Proximal points, Moreau envelopes, the discrete dual, radius calibration,
and first-order optimality residuals for candidate worst-case distributions.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .errors import BracketError, ConvergenceError
from .measures import EmpiricalMeasure, assignment, match_sizes
from .risks import Potential, estimate_smoothness


@dataclass
class ProxResult:
    z: np.ndarray
    u: np.ndarray
    residual: np.ndarray  # ||gamma grad V(z) + z - x|| per point
    iterations: int


@dataclass
class DualEval:
    lam: float
    value: float
    envelopes: np.ndarray


@dataclass
class CalibrationResult:
    gamma: float
    achieved: float
    target: float
    bracket: Tuple[float, float]
    result: object = None
    history: List[Tuple[float, float]] = field(default_factory=list)


def _surrogate(V, z, x, gamma, labels):
    diff = z - x
    return V.value(z, labels) + np.sum(diff * diff, axis=1) / (2.0 * gamma)


def prox_point(V: Potential, x, gamma, tol=1e-8, max_iter=10_000, L=None, labels=None) -> ProxResult:
    """Minimize V(z) + ||z - x||^2 / (2 gamma) for each row of ``x``.

    Quadratic and linear potentials use their closed form. Otherwise
    gradient descent with step 0.9 gamma / (1 + gamma L), where L is the
    smoothness bound of V (estimated by probing when unknown); the step is
    halved for any point whose surrogate value increases.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None]
    if hasattr(V, "prox"):
        z = V.prox(x, gamma)
        it = 0
    else:
        if L is None:
            L = V.L if V.L is not None else estimate_smoothness(V, x, labels, pairs=200)
        if gamma * L >= 1:
            warnings.warn(f"gamma * L = {gamma * L:.3g} >= 1; the proximal problem may be nonconvex", stacklevel=2)
        step = np.full((x.shape[0], 1), 0.9 * gamma / (1.0 + gamma * L))
        z = x.copy()
        f = _surrogate(V, z, x, gamma, labels)
        for it in range(1, max_iter + 1):
            g = V.grad(z, labels) + (z - x) / gamma
            if np.all(gamma * np.linalg.norm(g, axis=1) <= tol):
                it -= 1
                break
            cand = z - step * g
            fc = _surrogate(V, cand, x, gamma, labels)
            worse = fc > f + 1e-15 * np.abs(f)
            step[worse] *= 0.5
            keep = ~worse
            z[keep] = cand[keep]
            f[keep] = fc[keep]
        else:
            res = gamma * np.linalg.norm(V.grad(z, labels) + (z - x) / gamma, axis=1)
            raise ConvergenceError(f"prox did not converge in {max_iter} iterations (max residual {res.max():.3g})")
    res = np.linalg.norm(gamma * V.grad(z, labels) + z - x, axis=1)
    u = _surrogate(V, z, x, gamma, labels)
    if single:
        return ProxResult(z[0], u[0], res[0], it)
    return ProxResult(z, u, res, it)


def moreau_envelope(V: Potential, x, gamma, **kw):
    return prox_point(V, x, gamma, **kw).u


def dual_value_discrete(V: Potential, P: EmpiricalMeasure, lam, epsilon, **kw) -> DualEval:
    """G(lam) = E_P inf_z [V(z) + lam ||x - z||^2] - lam eps^2."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    res = prox_point(V, P.points, 1.0 / (2.0 * lam), labels=P.labels, **kw)
    env = np.atleast_1d(res.u)
    return DualEval(float(lam), P.expect(env) - lam * epsilon ** 2, env)


def calibrate_gamma(train_fn: Callable[[float], Tuple[object, float]], target_eps, bracket=(1e-3, 10.0),
                    tol=1e-2, max_iter=40) -> CalibrationResult:
    """Bisect log(gamma) until the achieved radius is within ``tol`` of the target.

    ``train_fn(gamma)`` returns ``(result, radius)``. The radius is assumed
    non-decreasing in gamma; violations seen while bisecting are warned about.
    """
    lo, hi = float(bracket[0]), float(bracket[1])
    if not 0 < lo < hi:
        raise ValueError(f"invalid bracket {bracket}")
    history = []

    def probe(g):
        out, r = train_fn(g)
        history.append((g, float(r)))
        return out, float(r)

    out_lo, r_lo = probe(lo)
    if abs(r_lo - target_eps) <= tol:
        return CalibrationResult(lo, r_lo, target_eps, (lo, hi), out_lo, history)
    out_hi, r_hi = probe(hi)
    if abs(r_hi - target_eps) <= tol:
        return CalibrationResult(hi, r_hi, target_eps, (lo, hi), out_hi, history)
    if r_lo > r_hi:
        warnings.warn("radius is not monotone over the bracket", stacklevel=2)
    if not r_lo < target_eps < r_hi:
        raise BracketError(f"radii [{r_lo:.4g}, {r_hi:.4g}] over gamma in [{lo:g}, {hi:g}] do not straddle {target_eps:g}")
    best = (abs(r_lo - target_eps), lo, r_lo, out_lo)
    for _ in range(max_iter):
        mid = math.sqrt(lo * hi)
        out, r = probe(mid)
        if not r_lo - tol <= r <= r_hi + tol:
            warnings.warn(f"radius not monotone in gamma near {mid:.4g}", stacklevel=2)
        if abs(r - target_eps) < best[0]:
            best = (abs(r - target_eps), mid, r, out)
        if abs(r - target_eps) <= tol:
            return CalibrationResult(mid, r, target_eps, (float(bracket[0]), float(bracket[1])), out, history)
        if r < target_eps:
            lo, r_lo = mid, r
        else:
            hi, r_hi = mid, r
    raise ConvergenceError(f"calibration exhausted {max_iter} bisections; closest radius {best[2]:.4g} at gamma {best[1]:.4g}")


def ot_map_targets(Q: EmpiricalMeasure, P: EmpiricalMeasure, seed=0):
    """Images T(z) of the points of Q under the assignment map pushing Q onto P."""
    Q, P = match_sizes(Q, P, seed)
    perm, _ = assignment(Q, P)
    return Q, P.points[perm]


def foc_residual(V: Potential, P: EmpiricalMeasure, Q: EmpiricalMeasure, gamma, seed=0) -> float:
    """sqrt(E_Q || grad V(z) + (z - T(z)) / gamma ||^2) with T the OT map from Q to P."""
    Q, target = ot_map_targets(Q, P, seed)
    r = V.grad(Q.points, Q.labels) + (Q.points - target) / gamma
    return float(np.sqrt(Q.expect(np.sum(r * r, axis=1))))


def backward_euler_residual(V: Potential, x_prev, x_next, gamma, labels=None) -> float:
    """max_k || x_{k+1} - x_k + gamma grad V(x_{k+1}) ||."""
    x_prev = np.atleast_2d(np.asarray(x_prev, dtype=np.float64))
    x_next = np.atleast_2d(np.asarray(x_next, dtype=np.float64))
    r = x_next - x_prev + gamma * V.grad(x_next, labels)
    return float(np.linalg.norm(r, axis=1).max())


def mean_grad_norm(V: Potential, Q: EmpiricalMeasure) -> float:
    return Q.expect(np.linalg.norm(V.grad(Q.points, Q.labels), axis=1))
