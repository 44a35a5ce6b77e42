import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowdro.errors import ShapeError
from flowdro.measures import (
    DiagGaussian,
    EmpiricalMeasure,
    kernel_smooth_sample,
    pushforward_cost,
    read_points_csv,
    w2_1d,
    w2_assignment,
    w2_gaussian_diag,
    write_points_csv,
)

U = EmpiricalMeasure.uniform


def brute_w2sq(x, y):
    n = len(x)
    best = np.inf
    for perm in itertools.permutations(range(n)):
        best = min(best, np.mean(np.sum((x - y[list(perm)]) ** 2, axis=1)))
    return best


def test_identical_clouds():
    x = np.random.default_rng(0).normal(size=(7, 2))
    w, plan = w2_assignment(U(x), U(x))
    assert w == 0.0
    assert np.array_equal(plan.matching, np.arange(7))


def test_single_points():
    assert w2_assignment(U([[0.0]]), U([[3.0]]))[0] == 3.0


def test_two_point_example():
    w, plan = w2_assignment(U([[0.0], [1.0]]), U([[1.0], [2.0]]))
    assert w == pytest.approx(1.0, abs=1e-15)
    assert list(plan.matching) == [0, 1]


def test_assignment_matches_permutation_brute_force():
    rng = np.random.default_rng(123)
    for trial in range(100):
        n = int(rng.integers(1, 7))
        d = int(rng.integers(1, 4))
        x, y = rng.normal(size=(2, n, d))
        w, plan = w2_assignment(U(x), U(y))
        assert abs(w * w - brute_w2sq(x, y)) < 1e-12
        recomputed = np.mean(np.sum((x - y[plan.matching]) ** 2, axis=1))
        assert abs(plan.cost - recomputed) < 1e-9


def test_1d_examples():
    assert w2_1d(U([[0.0], [1.0]]), U([[1.0], [0.0]])) == 0.0
    assert w2_1d(U([[0.0], [2.0]]), U([[1.0], [3.0]])) == pytest.approx(1.0)
    with pytest.raises(ShapeError):
        w2_1d(U(np.zeros((2, 2))), U(np.zeros((2, 2))))


def test_1d_gaussian_samples():
    rng = np.random.default_rng(4)
    p = U(rng.normal(0.0, 1.0, size=(500, 1)))
    q = U(rng.normal(2.0, 1.2, size=(500, 1)))
    assert abs(w2_1d(p, q) - np.sqrt(4.04)) < 0.1


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**31))
def test_1d_equals_assignment(n, seed):
    rng = np.random.default_rng(seed)
    p, q = U(rng.normal(size=(n, 1))), U(rng.normal(size=(n, 1)) * 2)
    assert w2_1d(p, q) == pytest.approx(w2_assignment(p, q)[0], abs=1e-12)


def test_weighted_1d_quantile_coupling():
    # all mass of Q at one point: W2^2 = E_P (x - y)^2
    p = EmpiricalMeasure([[0.0], [1.0], [4.0]], [0.5, 0.25, 0.25])
    q = U([[1.0]])
    assert w2_1d(p, q) ** 2 == pytest.approx(0.5 * 1 + 0.25 * 9)
    # weights 1/2,1/2 vs 1/4 x4 duplicates equals the uniform computation
    a = EmpiricalMeasure([[0.0], [2.0]], [0.5, 0.5])
    b = U([[1.0], [1.0], [3.0], [3.0]])
    assert w2_1d(a, b) == pytest.approx(1.0)


def test_non_uniform_multidim_rejected():
    p = EmpiricalMeasure(np.zeros((2, 2)), [0.3, 0.7])
    with pytest.raises(ValueError):
        w2_assignment(p, U(np.zeros((2, 2))))


def test_unequal_sizes_resampled():
    rng = np.random.default_rng(0)
    with pytest.warns(UserWarning):
        w, plan = w2_assignment(U(rng.normal(size=(10, 2))), U(rng.normal(size=(6, 2))))
    assert len(plan.matching) == 6


def test_triangle_inequality():
    rng = np.random.default_rng(9)
    for _ in range(50):
        n, d = int(rng.integers(2, 12)), int(rng.integers(1, 4))
        p, q, r = (U(rng.normal(size=(n, d)) * rng.uniform(0.5, 2)) for _ in range(3))
        assert w2_assignment(p, r)[0] <= w2_assignment(p, q)[0] + w2_assignment(q, r)[0] + 1e-9


def test_gaussian_closed_form():
    a = DiagGaussian([0.0], [1.0])
    b = DiagGaussian([2.0], [1.44])
    assert w2_gaussian_diag(a, a) == 0.0
    assert w2_gaussian_diag(a, b) == pytest.approx(np.sqrt(4.04), abs=1e-12)
    # Monte-Carlo quantile oracle
    u = (np.arange(1_000_000) + 0.5) / 1_000_000
    from scipy.stats import norm

    za = norm.ppf(u)
    mc = np.sqrt(np.mean((za - (2.0 + 1.2 * za)) ** 2))
    assert w2_gaussian_diag(a, b) == pytest.approx(mc, abs=1e-4)
    t = np.array([1.0, -2.0, 0.5])
    c = DiagGaussian(np.zeros(3), [1.0, 2.0, 3.0])
    assert w2_gaussian_diag(c, DiagGaussian(t, [1.0, 2.0, 3.0])) == pytest.approx(np.linalg.norm(t))
    with pytest.raises(ShapeError):
        w2_gaussian_diag(a, c)
    with pytest.raises(ValueError):
        DiagGaussian([0.0], [0.0])


def test_pushforward_cost():
    rng = np.random.default_rng(2)
    p = U(rng.normal(size=(5, 2)))
    assert pushforward_cost(lambda x: x, p) == 0.0
    c = np.array([0.3, -1.2])
    assert pushforward_cost(lambda x: x + c, p) == pytest.approx(c @ c)
    for _ in range(50):
        A = rng.normal(size=(2, 2))
        T = lambda x: np.tanh(x @ A) + x[:, ::-1]
        assert pushforward_cost(T, p) >= w2_assignment(p, U(T(p.points)))[0] ** 2 - 1e-12


def test_kernel_smoothing():
    q = EmpiricalMeasure([[0.0, 0.0], [5.0, 5.0]], [0.25, 0.75])
    s = kernel_smooth_sample(q, 1e-12, 1000, seed=1)
    nearest = np.min(np.abs(s.points[:, None, :] - q.points[None]).max(axis=2), axis=1)
    assert nearest.max() < 1e-9
    assert abs(np.mean(s.points[:, 0] > 2.5) - 0.75) < 0.05
    one = kernel_smooth_sample(U([[1.0, -1.0]]), 1.0, 100_000, seed=2)
    assert np.allclose(one.points.mean(axis=0), [1.0, -1.0], atol=0.05)
    assert np.allclose(np.cov(one.points.T), np.eye(2), atol=0.05)
    again = kernel_smooth_sample(q, 0.5, 50, seed=7)
    assert np.array_equal(again.points, kernel_smooth_sample(q, 0.5, 50, seed=7).points)
    with pytest.raises(ValueError):
        kernel_smooth_sample(q, 0.0, 10, seed=0)


def test_measure_validation():
    with pytest.raises(ValueError):
        EmpiricalMeasure([[0.0]], [0.5])
    with pytest.raises(ValueError):
        EmpiricalMeasure([[np.nan]], [1.0])
    with pytest.raises(ShapeError):
        EmpiricalMeasure(np.zeros((0, 2)), np.zeros(0))


@pytest.mark.parametrize("with_labels", [False, True])
def test_csv_round_trip(tmp_path, with_labels):
    rng = np.random.default_rng(3)
    w = rng.uniform(size=6)
    p = EmpiricalMeasure(rng.normal(size=(6, 3)), w / w.sum(), rng.integers(0, 2, 6) if with_labels else None)
    path = tmp_path / "p.csv"
    write_points_csv(path, p)
    back = read_points_csv(path)
    assert back.points.tobytes() == p.points.tobytes()
    np.testing.assert_allclose(back.weights, p.weights, rtol=1e-15)
    if with_labels:
        assert np.array_equal(back.labels, p.labels)
    assert path.read_text().splitlines()[0].startswith("dim0,dim1,dim2,weight")


def test_csv_without_weights(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("dim0,dim1\n1,2\n3,4\n")
    p = read_points_csv(path)
    assert p.is_uniform and p.n == 2
