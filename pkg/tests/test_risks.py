import numpy as np
import pytest

from flowdro.autodiff import Tape
from flowdro.measures import EmpiricalMeasure
from flowdro.risks import (
    CrossEntropyRisk,
    GeneratingFunction,
    HypothesisRisk,
    LinearPotential,
    LinearRisk,
    MLPClassifier,
    NegatedLoss,
    QuadraticPotential,
    ScalarDetector,
    accuracy_eval,
    estimate_smoothness,
    hypothesis_risk,
    pgd_attack,
    risk_eval,
    train_classifier,
)


def zero_classifier(d=2, C=2):
    m = MLPClassifier(d, C, hidden=(4,))
    for n in m.store.names():
        m.store.set(n, np.zeros_like(m.store[n]))
    return m


def zero_detector(d=1):
    det = ScalarDetector(d, hidden=(3,))
    for n in det.store.names():
        det.store.set(n, np.zeros_like(det.store[n]))
    return det


def labeled(points, labels):
    return EmpiricalMeasure.uniform(np.asarray(points, float), np.asarray(labels))


def blobs(seed, n=200, sep=3.0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.normal(size=(n, 2)) * 0.5
    x[:, 0] += np.where(y == 1, sep / 2, -sep / 2)
    return labeled(x, y)


def test_uniform_classifier_risk_is_log2():
    P = labeled(np.random.default_rng(0).normal(size=(10, 2)), np.arange(10) % 2)
    assert risk_eval(CrossEntropyRisk(zero_classifier()), P) == pytest.approx(np.log(2), abs=1e-15)


def test_confident_correct_classifier_has_zero_risk():
    m = MLPClassifier(1, 2, hidden=())
    m.store.set("W0", [[800.0, -800.0]])
    P = labeled([[1.0], [2.0]], [0, 0])
    assert risk_eval(CrossEntropyRisk(m), P) == 0.0


def test_duplicated_points_keep_risk():
    m = MLPClassifier(2, 3, seed=4)
    P = labeled(np.random.default_rng(1).normal(size=(5, 2)), [0, 1, 2, 1, 0])
    D = labeled(np.vstack([P.points, P.points]), np.concatenate([P.labels, P.labels]))
    assert risk_eval(CrossEntropyRisk(m), D) == pytest.approx(risk_eval(CrossEntropyRisk(m), P), rel=1e-14)


def test_risk_requires_labels():
    with pytest.raises(ValueError):
        risk_eval(CrossEntropyRisk(zero_classifier()), EmpiricalMeasure.uniform(np.zeros((2, 2))))


def test_accuracy():
    P = blobs(0)
    m = MLPClassifier(2, 2, hidden=())
    m.store.set("W0", [[-1.0, 1.0], [0.0, 0.0]])
    acc = accuracy_eval(m, P)
    assert acc == pytest.approx(100.0 * np.mean((P.points[:, 0] > 0) == P.labels))
    perfect = labeled(P.points, (P.points[:, 0] > 0).astype(int))
    assert accuracy_eval(m, perfect) == 100.0
    assert accuracy_eval(m, labeled(P.points, 1 - perfect.labels)) == 0.0
    assert accuracy_eval(zero_classifier(), P) == 50.0


def test_probs_sum_to_one():
    m = MLPClassifier(3, 5, seed=2)
    p = m.probs(np.random.default_rng(0).normal(size=(20, 3)) * 5)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


@pytest.mark.parametrize("kind,expected", [("exp", 2.0), ("logistic", 2 * np.log(2)), ("quadhinge", 2.0)])
def test_hypothesis_risk_of_zero_detector(kind, expected):
    rng = np.random.default_rng(0)
    Q0 = EmpiricalMeasure.uniform(rng.normal(size=(7, 1)))
    Q1 = EmpiricalMeasure.uniform(rng.normal(size=(9, 1)))
    assert hypothesis_risk(zero_detector(), Q0, Q1, GeneratingFunction(kind)) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("kind", ["exp", "logistic", "quadhinge"])
def test_generating_functions_shape(kind):
    f = GeneratingFunction(kind)
    t = np.linspace(-10, 10, 1000)
    v = f(t)
    assert np.all(v >= 0)
    assert np.all(np.diff(v) >= 0)
    assert np.all(v[:-2] + v[2:] - 2 * v[1:-1] >= -1e-9 * np.abs(v[1:-1]).max())
    tape = Tape()
    assert np.allclose(f.record(tape, tape.input(t)).value, v, rtol=1e-14, atol=0)


def test_hypothesis_risk_model_matches_direct_formula():
    det = ScalarDetector(1, hidden=(4,), seed=3)
    f = GeneratingFunction("logistic")
    x = np.random.default_rng(1).normal(size=(12, 1))
    y = np.arange(12) % 2
    phi = det.phi(x)
    expected = np.where(y == 1, f(phi), f(-phi))
    np.testing.assert_allclose(HypothesisRisk(det, f).loss(x, y), expected, rtol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_analytic_potential_gradients(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(6, 3))
    for V in (QuadraticPotential(rng.normal(size=3), a=rng.uniform(0.5, 3)), LinearPotential(rng.normal(size=3))):
        tape = Tape()
        zn = tape.input(z)
        total = tape.sum(V.tape_value(tape, zn))
        (g,) = tape.backward(total)
        np.testing.assert_allclose(g, V.grad(z), atol=1e-10)
        np.testing.assert_allclose(total.value, V.value(z).sum(), rtol=1e-13)


def test_smoothness_probe_respects_known_bound():
    rng = np.random.default_rng(0)
    V = QuadraticPotential(np.zeros(2), a=2.0)
    L = estimate_smoothness(V, rng.normal(size=(100, 2)))
    assert L <= 1.05 * V.L
    assert L == pytest.approx(2.0, rel=1e-6)


def test_negated_loss_gradient():
    m = MLPClassifier(2, 3, seed=1)
    V = NegatedLoss(CrossEntropyRisk(m))
    rng = np.random.default_rng(2)
    z, y = rng.normal(size=(4, 2)), np.array([0, 1, 2, 0])
    g = V.grad(z, y)
    h = 1e-6
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        fd = (V.value(z + e, y) - V.value(z - e, y)) / (2 * h)
        np.testing.assert_allclose(g[:, k], fd, rtol=1e-6, atol=1e-9)


def test_pgd_zero_budget():
    x = np.array([[0.5, 1.0]])
    assert np.array_equal(pgd_attack(LinearRisk([1.0, 2.0]), x, 0.0), x)


def test_pgd_linear_l2():
    a = np.array([3.0, -4.0])
    x = np.array([[0.1, 0.2], [1.0, -1.0]])
    out = pgd_attack(LinearRisk(a), x, 0.5, norm="l2")
    np.testing.assert_allclose(out, x + 0.5 * a / 5.0, atol=1e-12)


def test_pgd_linear_linf():
    a = np.array([3.0, -4.0])
    x = np.array([[0.1, 0.2]])
    out = pgd_attack(LinearRisk(a), x, 0.5, norm="linf")
    np.testing.assert_allclose(out, x + 0.5 * np.sign(a), atol=1e-12)


@pytest.mark.parametrize("norm", ["l2", "linf"])
def test_pgd_constraint_and_monotone_loss(norm):
    P = blobs(1, n=60)
    m = MLPClassifier(2, 2, seed=5)
    risk = CrossEntropyRisk(m)
    eps = 0.4
    adv = pgd_attack(risk, P.points, eps, P.labels, norm=norm)
    delta = adv - P.points
    size = np.linalg.norm(delta, axis=1) if norm == "l2" else np.abs(delta).max(axis=1)
    assert np.all(size <= eps * (1 + 1e-12))
    assert np.all(risk.loss(adv, P.labels) >= risk.loss(P.points, P.labels) - 1e-9)


def test_train_classifier_separable():
    P = blobs(3)
    m, curve = train_classifier(MLPClassifier(2, 2, hidden=(8,), seed=0), P, epochs=200, lr=0.05)
    assert accuracy_eval(m, P) >= 99.0
    assert curve[-1] < curve[0]


def test_train_classifier_zero_epochs_and_determinism():
    P = blobs(4)
    m = MLPClassifier(2, 2, seed=9)
    before = m.store.flat()
    train_classifier(m, P, epochs=0)
    assert np.array_equal(m.store.flat(), before)
    c1 = train_classifier(MLPClassifier(2, 2, seed=9), P, 15, batch_size=32, seed=1)[1]
    c2 = train_classifier(MLPClassifier(2, 2, seed=9), P, 15, batch_size=32, seed=1)[1]
    assert c1 == c2


def test_single_class_training_warns():
    P = labeled(np.random.default_rng(0).normal(size=(10, 2)), np.zeros(10, int))
    with pytest.warns(UserWarning):
        train_classifier(MLPClassifier(2, 2), P, epochs=1)
