"""Fast invariant suite run by ``flowdro verify``.

Every check compares against a closed form or a brute-force computation
that does not share code with the routine under test.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape
from .flow import IntegratorConfig, integrate, make_block
from .measures import EmpiricalMeasure, w2_assignment
from .privacy import calibrate_apm
from .prox import backward_euler_residual, dual_value_discrete, moreau_envelope, prox_point
from .risks import CrossEntropyRisk, MLPClassifier, QuadraticPotential
from .rng import child_seed, make_rng
from .train import LFDTrainConfig, train_lfd
from .wdro_lp import WdroLpInstance, build_wdro_lp, solve_wdro


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def _brute_w2sq(x, y):
    return min(np.mean(np.sum((x - y[list(p)]) ** 2, axis=1)) for p in itertools.permutations(range(len(x))))


def check_assignment(seed):
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(10):
        n, d = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        x, y = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        w2, _ = w2_assignment(EmpiricalMeasure.uniform(x), EmpiricalMeasure.uniform(y))
        worst = max(worst, abs(w2 ** 2 - _brute_w2sq(x, y)))
    return Check("w2_assignment_vs_permutations", bool(worst < 1e-12), f"max error {worst:.3g}")


def check_gradients(seed):
    rng = make_rng(seed)
    m = MLPClassifier(3, 3, hidden=(5,), seed=seed)
    x, y = rng.normal(size=(4, 3)), rng.integers(0, 3, 4)
    risk = CrossEntropyRisk(m)
    tape = Tape()
    out = tape.mean(risk.tape_loss(tape, tape.const(x), y, trainable=True))
    m.store.zero_grad()
    tape.backward(out)
    worst, h = 0.0, 1e-6
    for name in m.store.names():
        p = m.store[name]
        g = m.store.grads[name]
        for idx in itertools.islice(np.ndindex(p.shape), 6):
            old = p[idx]
            p[idx] = old + h
            up = np.mean(risk.loss(x, y))
            p[idx] = old - h
            dn = np.mean(risk.loss(x, y))
            p[idx] = old
            fd = (up - dn) / (2 * h)
            worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-8))
    return Check("autodiff_vs_central_differences", bool(worst < 1e-5), f"max relative error {worst:.3g}")


def check_prox(seed):
    V = QuadraticPotential(np.zeros(2))
    x = make_rng(seed).normal(size=(20, 2))
    gammas = np.linspace(0.05, 2.0, 8)
    err = max(np.abs(prox_point(V, x, g).z - x / (1 + g)).max() for g in gammas)
    env = np.array([moreau_envelope(V, x, g) for g in gammas])
    ok = err < 1e-8 and np.all(env <= V.value(x) + 1e-12) and np.all(np.diff(env, axis=0) <= 1e-12)
    return Check("prox_closed_form_and_envelope_order", bool(ok), f"max prox error {err:.3g}")


def check_weak_duality(seed):
    rng = make_rng(seed)
    x = rng.normal(size=(200, 2))
    P = EmpiricalMeasure.uniform(x)
    V = QuadraticPotential(np.zeros(2))
    eps = 0.3
    worst = -np.inf
    for _ in range(5):
        d = rng.normal(size=x.shape)
        d *= eps / math.sqrt(np.mean(np.sum(d * d, axis=1)))
        q = V.value(x + d).mean()
        for lam in rng.uniform(0.05, 5.0, 4):
            worst = max(worst, dual_value_discrete(V, P, lam, eps).value - q)
    return Check("weak_duality_quadratic", bool(worst <= 1e-6), f"max G(lambda) - E_Q V = {worst:.3g}")


def check_integrators(seed):
    x0 = np.array([[1.0]])
    f = lambda x, t: -x
    slopes = {}
    for method in ("euler", "rk4"):
        errs = [abs(integrate(f, x0, IntegratorConfig(method, s))[0, 0] - math.exp(-1)) for s in (8, 16, 32)]
        slopes[method] = float(np.mean(np.diff(np.log(errs)) / -np.diff(np.log([8, 16, 32]))))
    blk = make_block(2, 1.0, "rk4", 3, hidden=(4,), seed=seed)
    blk.field.n_evals = 0
    blk(np.zeros((7, 2)))
    ok = slopes["euler"] >= 0.9 and slopes["rk4"] >= 3.5 and blk.field.n_evals == 4 * 3 * 7
    return Check("integrator_orders_and_eval_count", ok,
                 f"euler {slopes['euler']:.2f}, rk4 {slopes['rk4']:.2f}, evals {blk.field.n_evals}")


def check_wdro(seed):
    res = []
    for eps in (0.0, 0.2, 0.5, 2.0):
        pair = solve_wdro(WdroLpInstance([[0.0], [1.0]], 1, 1, eps, eps))
        res.append(abs(pair.objective - min(1.0, 2 * eps)))
    nv = build_wdro_lp(WdroLpInstance(np.arange(5.0), 2, 3, 0.1, 0.1)).n_vars
    ok = max(res) < 1e-9 and nv == 2 * 5 + 2 * 25 + 5
    return Check("wdro_two_point_and_variable_count", ok, f"max error {max(res):.3g}, variables {nv}")


def check_apm(seed):
    g = calibrate_apm("APM_Gaussian", 1.0, 1)
    b = calibrate_apm("APM_Laplace", 1.0, 1)
    s2 = calibrate_apm("APM_Gaussian", 1.0, 2)
    mc = s2 * np.mean(np.linalg.norm(make_rng(seed).standard_normal((200000, 2)), axis=1))
    ok = bool(abs(g - math.sqrt(math.pi / 2)) < 1e-12 and b == 1.0 and abs(mc - 1.0) < 5e-3)
    return Check("apm_calibration", ok, f"sigma_1d {g:.6f}, laplace_1d {b}, mc mean norm 2d {mc:.4f}")


def check_flow_training(seed):
    x = make_rng(seed).normal(size=(256, 2))
    P = EmpiricalMeasure.uniform(x)
    V = QuadraticPotential(np.zeros(2))
    cfg = LFDTrainConfig(K=1, gamma=0.5, epochs=150, lr=1e-2, method="euler", substeps=1,
                         hidden=(16, 16), seed=child_seed(seed, 1))
    chain, rep = train_lfd(V, P, cfg)
    y = chain(x)
    ratio = np.mean(np.sum((y - x / 1.5) ** 2, axis=1)) / np.mean(np.sum(x * x, axis=1))
    monge = rep.achieved_w2 <= math.sqrt(rep.chain_cost) + 1e-12
    be = backward_euler_residual(V, x, y, 0.5)
    ok = ratio < 1e-2 and monge and rep.n_evals == rep.expected_evals
    return Check("quadratic_lfd_training", bool(ok),
                 f"map error ratio {ratio:.3g}, backward-Euler residual {be:.3g}, evals {rep.n_evals}")


CHECKS = (check_assignment, check_gradients, check_prox, check_weak_duality, check_integrators, check_wdro,
          check_apm, check_flow_training)


def run_invariants(seed=0):
    return [c(seed) for c in CHECKS]
