"""Seeded synthetic data generators driven by small dict specs."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ConfigError
from .measures import EmpiricalMeasure, read_points_csv
from .rng import make_rng

KINDS = ("gaussian", "gaussian-mixture", "two-moons", "two-sample-1d", "csv")


def _vec(spec, key, default, d=None):
    v = np.atleast_1d(np.asarray(spec.get(key, default), dtype=np.float64))
    if d is not None and v.size == 1:
        v = np.full(d, v[0])
    return v


def balanced_labels(n, weights):
    """Deterministic labels whose class counts follow ``weights`` as closely as possible."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or np.any(w < 0) or not w.sum() > 0:
        raise ValueError("mixture weights must be nonnegative with positive sum")
    cum = np.cumsum(w / w.sum())
    cum[-1] = 1.0
    return np.searchsorted(cum, (np.arange(n) + 0.5) / n, side="right").astype(np.intp)


def generate_dataset(spec: dict, n=None, seed=0, base_dir=None) -> EmpiricalMeasure:
    """Uniform empirical measure drawn from ``spec``; mixtures carry labels.

    ``spec["kind"]`` is one of :data:`KINDS`. ``n`` overrides ``spec["n"]``
    (for ``two-sample-1d`` it is the count per class).
    """
    kind = spec.get("kind")
    if kind not in KINDS:
        raise ConfigError("dataset.kind", f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    if kind == "csv":
        path = Path(spec["path"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        if not path.exists():
            raise ConfigError("dataset.path", f"file not found: {path}")
        return read_points_csv(path)
    n = int(spec.get("n", 0) if n is None else n)
    if n < 1:
        raise ConfigError("dataset.n", "must be >= 1")
    rng = make_rng(seed)

    if kind == "gaussian":
        mean = _vec(spec, "mean", 0.0)
        d = int(spec.get("d", mean.size))
        mean = _vec(spec, "mean", 0.0, d)
        var = _vec(spec, "var", 1.0, d)
        if mean.size != d or var.size != d:
            raise ConfigError("dataset", "mean and var must have d entries")
        if np.any(var < 0):
            raise ConfigError("dataset.var", "variances must be nonnegative")
        return EmpiricalMeasure.uniform(mean + np.sqrt(var) * rng.standard_normal((n, d)))

    if kind == "gaussian-mixture":
        means = np.atleast_2d(np.asarray(spec["means"], dtype=np.float64))
        C, d = means.shape
        var = np.asarray(spec.get("variances", 1.0), dtype=np.float64)
        var = np.broadcast_to(var.reshape(-1, 1) if var.ndim == 1 and var.size == C and d != C else var, (C, d))
        if np.any(var < 0):
            raise ConfigError("dataset.variances", "variances must be nonnegative")
        w = spec.get("weights", [1.0] * C)
        if len(w) != C:
            raise ConfigError("dataset.weights", f"expected {C} weights, got {len(w)}")
        try:
            y = balanced_labels(n, w)
        except ValueError as exc:
            raise ConfigError("dataset.weights", str(exc)) from None
        x = means[y] + np.sqrt(var[y]) * rng.standard_normal((n, d))
        return EmpiricalMeasure.uniform(x, y)

    if kind == "two-moons":
        noise = float(spec.get("noise", 0.1))
        n0 = n // 2
        y = np.repeat([0, 1], [n0, n - n0])
        t = np.pi * rng.uniform(size=n)
        x = np.where(y[:, None] == 0,
                     np.stack([np.cos(t), np.sin(t)], 1),
                     np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], 1))
        return EmpiricalMeasure.uniform(x + noise * rng.standard_normal((n, 2)), y)

    # two-sample-1d: class 0 ~ N(mean0, std0^2), class 1 ~ N(mean1, std1^2), n per class
    m0, s0 = float(spec.get("mean0", 0.0)), float(spec.get("std0", 1.0))
    m1, s1 = float(spec.get("mean1", 2.0)), float(spec.get("std1", 1.2))
    if s0 < 0 or s1 < 0:
        raise ConfigError("dataset", "standard deviations must be nonnegative")
    x0 = m0 + s0 * rng.standard_normal(n)
    x1 = m1 + s1 * rng.standard_normal(n)
    return EmpiricalMeasure.uniform(np.concatenate([x0, x1])[:, None], np.repeat([0, 1], n))
