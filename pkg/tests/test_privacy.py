import json
import math

import numpy as np
import pytest

from flowdro.errors import ShapeError
from flowdro.flow import FlowChain, make_block
from flowdro.measures import EmpiricalMeasure
from flowdro.privacy import (
    ErrorReport,
    Mechanism,
    QueryTask,
    apply_mechanism,
    calibrate_apm,
    error_rates,
    mean_displacement,
    missing_item_query,
    train_dpm,
)
from flowdro.risks import MLPClassifier, train_classifier
from flowdro.rng import make_rng
from flowdro.train import LFDTrainConfig

U = EmpiricalMeasure.uniform
MEANS = 3.0 * np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=float)


def mixture(n, seed, sd=0.8):
    y = np.arange(n) % 4
    return U(MEANS[y] + sd * make_rng(seed).standard_normal((n, 2)), y)


class Fixed:
    """Classifier stub returning preset or random predictions."""

    def __init__(self, n_classes, fn):
        self.n_classes = n_classes
        self.fn = fn

    def predict(self, x):
        return self.fn(x)


def nearest_mean(x):
    return np.argmin(((x[:, None, :] - MEANS[None]) ** 2).sum(-1), axis=1)


@pytest.mark.parametrize("kind", ["APM_Gaussian", "APM_Laplace"])
def test_zero_budget_scale(kind):
    assert calibrate_apm(kind, 0.0, 3) == 0.0


def test_one_dimensional_shortcuts():
    assert calibrate_apm("gaussian", 1.0, 1) == pytest.approx(math.sqrt(math.pi / 2), abs=1e-15)
    assert calibrate_apm("gaussian", 1.0, 1) == pytest.approx(1.2533, abs=1e-4)
    assert calibrate_apm("laplace", 0.7, 1) == 0.7


@pytest.mark.parametrize("kind,d", [("APM_Gaussian", 2), ("APM_Gaussian", 5), ("APM_Laplace", 2),
                                    ("APM_Laplace", 3)])
def test_calibration_against_monte_carlo(kind, d):
    s = calibrate_apm(kind, 1.0, d, mc_samples=200_000, seed=1)
    rng = np.random.default_rng(12345)
    draws = rng.standard_normal((10 ** 6, d)) if kind == "APM_Gaussian" else rng.laplace(size=(10 ** 6, d))
    assert s * np.mean(np.linalg.norm(draws, axis=1)) == pytest.approx(1.0, rel=5e-3)


def test_calibration_rejects_negative():
    with pytest.raises(ValueError):
        calibrate_apm("gaussian", -1.0, 2)


def test_apply_zero_scale_and_identity_flow():
    x = np.random.default_rng(0).normal(size=(5, 2))
    assert np.array_equal(apply_mechanism(Mechanism("APM_Gaussian", 0.0, 0.0), x, seed=3), x)
    chain = FlowChain([make_block(2, 1.0, hidden=(4,))])
    M = Mechanism.dpm(chain, U(x))
    assert M.budget == 0.0
    assert np.array_equal(apply_mechanism(M, x), x)
    assert np.array_equal(apply_mechanism(M, x[0]), x[0])


def test_apm_noise_seeded_and_shaped():
    M = Mechanism.additive("laplace", 0.5, 2)
    x = np.zeros((4, 2))
    assert np.array_equal(apply_mechanism(M, x, seed=2), apply_mechanism(M, x, seed=2))
    assert not np.array_equal(apply_mechanism(M, x, seed=2), apply_mechanism(M, x, seed=3))
    with pytest.raises(ShapeError):
        apply_mechanism(Mechanism.dpm(FlowChain([make_block(3, 1.0, hidden=(4,))]), U(np.zeros((2, 3)))), x)


def test_mechanism_validation():
    with pytest.raises(ValueError):
        Mechanism("APM_Gaussian", 1.0, -0.1)
    with pytest.raises(ValueError):
        Mechanism("DPM", 1.0)
    with pytest.raises(ValueError):
        Mechanism("uniform", 1.0)


def test_missing_item_query_basics():
    x = np.array([1.0, -2.0])
    np.testing.assert_array_equal(missing_item_query(x[None], 2), x)
    D = np.random.default_rng(1).normal(size=(3, 2))
    np.testing.assert_allclose(missing_item_query(D, 4), missing_item_query(D[::-1], 4), atol=1e-15)
    with pytest.raises(ShapeError):
        missing_item_query(D, 3)
    with pytest.raises(ValueError):
        missing_item_query(D, 4, labels=[0, 0, 1])


def test_missing_item_reveals_sign():
    # class means +m and -m plus a known third class at 0: the average flips with the missing side
    m = np.array([2.0, 0.0])
    assert missing_item_query(np.array([-m, [0.0, 0.0]]), 3)[0] < 0
    assert missing_item_query(np.array([m, [0.0, 0.0]]), 3)[0] > 0


def test_missing_item_queries_need_all_classes():
    data = U(np.zeros((6, 2)), [0, 1, 2, 0, 1, 2])
    with pytest.raises(ValueError):
        QueryTask("missing_item", 4).queries(data)
    q = QueryTask("missing_item", 3).queries(data, 9, seed=0)
    assert q.n == 9 and np.array_equal(np.bincount(q.labels), [3, 3, 3])


def test_perfect_classifier_zero_errors():
    data = mixture(400, 0, sd=0.1)
    clf = Fixed(4, nearest_mean)
    rep = error_rates(clf, Mechanism("APM_Gaussian", 0.0), QueryTask("point", 4), data)
    assert rep.alpha_avg == 0.0 and rep.beta_avg == 0.0
    assert sum(rep.counts) == data.n


def test_random_classifier_binomial_rates():
    n = 10_000
    data = U(np.zeros((n, 1)), np.arange(n) % 10)
    rng = np.random.default_rng(0)
    clf = Fixed(10, lambda x: rng.integers(0, 10, len(x)))
    rep = error_rates(clf, Mechanism("APM_Gaussian", 0.0), QueryTask("point", 10), data)
    assert all(abs(a - 0.1) < 0.02 for a in rep.alpha)
    assert all(abs(b - 0.9) < 0.02 for b in rep.beta)
    assert rep.alpha_avg == pytest.approx(np.mean(rep.alpha), abs=1e-15)


def test_absent_class_reported_missing():
    data = U(np.zeros((6, 1)), [0, 1, 0, 1, 0, 1])
    clf = Fixed(3, lambda x: np.zeros(len(x), dtype=int))
    with pytest.warns(UserWarning):
        rep = error_rates(clf, Mechanism("APM_Gaussian", 0.0), QueryTask("point", 3), data)
    assert math.isnan(rep.alpha[2])
    assert rep.alpha_avg == pytest.approx(np.mean(rep.alpha[:2]))
    assert json.loads(rep.to_json())["alpha"][2] is None


def test_class_count_mismatch():
    with pytest.raises(ValueError):
        error_rates(Fixed(3, nearest_mean), Mechanism("APM_Gaussian", 0.0), QueryTask("point", 4), mixture(8, 0))


def test_report_csv_layout():
    rep = ErrorReport("APM_Laplace", 0.5, 0.49, [0, 1], [0.1, 0.2], [0.3, 0.4], [5, 5], 0.15, 0.35)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "class,alpha,beta"
    assert lines[-2] == "average,0.14999999999999999,0.34999999999999998"
    assert lines[-1].startswith("budget,0.5,")
    assert rep.total == pytest.approx(0.5)


def test_stronger_noise_not_less_error():
    clf = Fixed(4, nearest_mean)
    budgets = [0.0, 0.5, 1.5, 3.0, 5.0]
    totals = []
    for seed in range(5):
        data = mixture(1000, seed)
        totals.append([error_rates(clf, Mechanism.additive("gaussian", e, 2), QueryTask("point", 4), data,
                                   seed=seed).total for e in budgets])
    med = np.median(np.array(totals), axis=0)
    assert np.all(np.diff(med) >= 0)


def test_dpm_budget_is_measured_displacement():
    data = mixture(200, 1)
    clf = MLPClassifier(2, 4, hidden=(8,), seed=0)
    train_classifier(clf, data, 60)
    cfg = LFDTrainConfig(K=1, gamma=3.0, epochs=40, hidden=(8,))
    M = train_dpm(clf, data, cfg)
    moved = apply_mechanism(M, data.points)
    assert M.budget > 0
    assert abs(mean_displacement(data.points, moved) - M.budget) <= 0.02 * M.budget


def test_matched_budget_displacements_agree():
    data = mixture(2000, 2)
    eps = 0.8
    for kind in ("gaussian", "laplace"):
        rep = error_rates(Fixed(4, nearest_mean), Mechanism.additive(kind, eps, 2), QueryTask("point", 4), data,
                          repeats=5)
        assert abs(rep.displacement - eps) <= 0.02 * eps
