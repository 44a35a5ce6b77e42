"""Experiment runners behind the CLI: lfd, minmax, wdro-lp, privacy, verify.

Each runner takes a validated :class:`ExperimentConfig` and one seed and
returns an :class:`ExperimentResult` holding scalar metrics, metric tables
and figure series. Writing files is left to :func:`write_result`.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from .config import ExperimentConfig
from .datasets import generate_dataset
from .flow import FlowChain
from .measures import EmpiricalMeasure, w2_1d, write_points_csv
from .privacy import Mechanism, QueryTask, error_rates, train_dpm
from .prox import calibrate_gamma
from .risks import (
    CrossEntropyRisk,
    GeneratingFunction,
    HypothesisRisk,
    LinearPotential,
    MLPClassifier,
    NegatedLoss,
    QuadraticPotential,
    ScalarDetector,
    accuracy_eval,
    pgd_attack,
    risk_eval,
    train_classifier,
    train_model,
)
from .rng import child_seed
from .train import (
    LabeledFlow,
    LFDTrainConfig,
    MinMaxConfig,
    _w2,
    apply_flow,
    solve_minmax,
    train_lfd,
)
from .wdro_lp import WdroLpInstance, pair_to_json, smoothed_lfd_sampler, solve_wdro


def fmt_number(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return format(float(v), ".17g")


@dataclass
class Table:
    columns: tuple
    rows: List[tuple] = field(default_factory=list)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([fmt_number(v) for v in r])
        return buf.getvalue()


@dataclass
class ExperimentResult:
    experiment: str
    seed: int
    metrics: Dict[str, float] = field(default_factory=dict)
    tables: Dict[str, Table] = field(default_factory=dict)
    series: Dict[str, np.ndarray] = field(default_factory=dict)
    texts: Dict[str, str] = field(default_factory=dict)
    objects: dict = field(default_factory=dict)

    def metrics_table(self):
        return Table(("metric", "value"), [(k, v) for k, v in self.metrics.items()])


FIGURE_PANELS = {
    "fig1_histograms": ("x_grid", "hist_P0", "hist_P1", "hist_Q0", "hist_Q1"),
    "robustness_curve": ("attack_budget_fraction", "error_frm", "error_erm"),
}


def emit_figure_data(result: ExperimentResult, out_dir, panels=None):
    """One CSV per figure panel whose series the result carries.

    Raises ValueError naming the missing series if a requested panel (or,
    by default, every panel) cannot be built.
    """
    series = result.series if result is not None else {}
    if panels is None:
        panels = [p for p, cols in FIGURE_PANELS.items() if any(c in series for c in cols)]
        if not panels:
            missing = sorted({c for cols in FIGURE_PANELS.values() for c in cols})
            raise ValueError(f"report has no figure series; missing: {', '.join(missing)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for p in panels:
        cols = FIGURE_PANELS[p]
        missing = [c for c in cols if c not in series]
        if missing:
            raise ValueError(f"panel {p}: missing series {', '.join(missing)}")
        table = Table(cols, list(zip(*[np.asarray(series[c]) for c in cols])))
        path = out_dir / f"{p}.csv"
        path.write_text(table.to_csv())
        paths.append(path)
    return paths


# Model construction.

def _n_classes(P):
    return int(P.labels.max()) + 1


def _build_potential(model: dict, P: EmpiricalMeasure, seed):
    """Returns (V, risk or None, info dict)."""
    kind = model.get("kind", "quadratic")
    if kind == "quadratic":
        center = np.asarray(model.get("center", np.zeros(P.d)), dtype=np.float64)
        return QuadraticPotential(center, float(model.get("a", 1.0))), None, {}
    if kind == "linear":
        return LinearPotential(np.asarray(model["slope"], dtype=np.float64)), None, {}
    hidden = tuple(model.get("hidden", (16, 16)))
    act = model.get("activation", "softplus")
    epochs, lr = int(model.get("epochs", 300)), float(model.get("lr", 1e-2))
    if P.labels is None:
        raise ValueError(f"model kind {kind!r} needs a labeled dataset")
    if kind == "classifier":
        clf = MLPClassifier(P.d, _n_classes(P), hidden, act, seed=seed)
        _, curve = train_classifier(clf, P, epochs, lr)
        risk = CrossEntropyRisk(clf)
    elif kind == "detector":
        det = ScalarDetector(P.d, hidden, act, seed=seed)
        risk = HypothesisRisk(det, GeneratingFunction(model.get("f", "logistic")))
        curve = train_model(risk, P, epochs, lr)
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return NegatedLoss(risk), risk, {"model_final_loss": curve[-1] if curve else math.nan}


def _prox_chain(V, x, gammas):
    for g in gammas:
        x = V.prox(x, g)
    return x


def _histograms(P, Q, bins):
    lo = min(P.points.min(), Q.points.min())
    hi = max(P.points.max(), Q.points.max())
    edges = np.linspace(lo, hi, int(bins) + 1)
    out = {"x_grid": 0.5 * (edges[1:] + edges[:-1])}
    for tag, M in (("P", P), ("Q", Q)):
        for k in (0, 1):
            sub = M.by_label(k)
            out[f"hist_{tag}{k}"] = np.histogram(sub.points[:, 0], edges, weights=sub.weights, density=True)[0]
    return out


def _radius(P, Q):
    return w2_1d(P, Q) if P.d == 1 else _w2(P, Q)


def _training_rows(report, tag):
    return [(tag, r["block"], r["epoch"], r["objective"], r["transport_cost"], r["w2_estimate"], r["risk"])
            for r in report.rows]


TRAIN_COLUMNS = ("part", "block", "epoch", "objective", "transport_cost", "w2_estimate", "risk")


# Runners.

def run_lfd(cfg: ExperimentConfig, seed: int) -> ExperimentResult:
    P = generate_dataset(cfg.dataset, seed=seed, base_dir=cfg.base_dir)
    V, risk, info = _build_potential(cfg.model, P, seed)
    tc = LFDTrainConfig(**{**cfg.train, "seed": seed})
    ev = cfg.evaluate
    res = ExperimentResult("lfd", seed, metrics=dict(info))
    training = Table(TRAIN_COLUMNS)
    target = ev.get("target_eps")
    if target is not None:
        bracket = tuple(ev.get("bracket", (1e-2, 10.0)))
        tol = float(ev.get("tol", 1e-2))
        parts = ([(int(k), P.by_label(int(k))) for k in np.unique(P.labels)]
                 if tc.per_class and P.labels is not None else [(None, P)])
        chains, evals, expected = {}, 0, 0
        for k, Pk in parts:
            def fn(g, Pk=Pk):
                flow, rep = train_lfd(V, Pk, replace(tc, gamma=g, schedule="even"), risk)
                return (flow, rep), _radius(Pk, apply_flow(flow, Pk))

            cal = calibrate_gamma(fn, float(target), bracket=bracket, tol=tol)
            flow, rep = cal.result
            tag = "all" if k is None else f"class{k}"
            res.metrics[f"gamma_{tag}"] = cal.gamma
            res.metrics[f"radius_{tag}"] = cal.achieved
            res.metrics[f"calibration_probes_{tag}"] = len(cal.history)
            training.rows.extend(_training_rows(rep, tag))
            evals += rep.n_evals
            expected += rep.expected_evals
            if k is None:
                chains = flow
            else:
                chains[k] = flow.chains[k]
        flow = chains if isinstance(chains, (FlowChain, LabeledFlow)) else LabeledFlow(chains)
        res.metrics["n_evals"] = evals
        res.metrics["expected_evals"] = expected
    else:
        flow, rep = train_lfd(V, P, tc, risk)
        training.rows.extend(_training_rows(rep, "all"))
        res.metrics["n_evals"] = rep.n_evals
        res.metrics["expected_evals"] = rep.expected_evals
    Q = apply_flow(flow, P)
    diff = Q.points - P.points
    res.metrics["chain_cost"] = P.expect(np.sum(diff * diff, axis=1))
    res.metrics["achieved_w2"] = _radius(P, Q) if P.labels is None else _w2(P, Q)
    res.metrics["risk_P"] = risk_eval(risk, P) if risk is not None else -P.expect(V.value(P.points))
    res.metrics["risk_Q"] = risk_eval(risk, Q) if risk is not None else -Q.expect(V.value(Q.points))
    if hasattr(V, "prox"):
        exact = _prox_chain(V, P.points, tc.gamma_schedule())
        res.metrics["map_error"] = P.expect(np.sum((Q.points - exact) ** 2, axis=1))
        res.metrics["map_error_ratio"] = res.metrics["map_error"] / P.expect(np.sum(P.points ** 2, axis=1))
    if isinstance(risk, CrossEntropyRisk):
        res.metrics["accuracy_P"] = accuracy_eval(risk.model, P)
        res.metrics["accuracy_Q"] = accuracy_eval(risk.model, Q)
        if ev.get("pgd_compare", False):
            eps = res.metrics["achieved_w2"]
            adv = P.with_points(pgd_attack(risk, P.points, eps, P.labels, norm="l2",
                                           steps=int(ev.get("pgd_steps", 40))))
            res.metrics["pgd_epsilon"] = eps
            res.metrics["risk_pgd"] = risk_eval(risk, adv)
            res.metrics["w2_pgd"] = _w2(P, adv)
            res.objects["pgd"] = adv
    if P.labels is not None and P.d == 1 and set(np.unique(P.labels)) == {0, 1}:
        res.metrics["w2_P0_P1"] = w2_1d(P.by_label(0), P.by_label(1))
        res.metrics["w2_Q0_Q1"] = w2_1d(Q.by_label(0), Q.by_label(1))
        res.series.update(_histograms(P, Q, ev.get("bins", 60)))
    res.tables["training"] = training
    res.objects.update(P=P, Q=Q, flow=flow, V=V, risk=risk, train_config=tc)
    return res


def run_minmax(cfg: ExperimentConfig, seed: int) -> ExperimentResult:
    ev = cfg.evaluate
    P = generate_dataset(cfg.dataset, seed=seed, base_dir=cfg.base_dir)
    T = generate_dataset(cfg.dataset, n=int(ev.get("test_n", P.n)), seed=child_seed(seed, 1), base_dir=cfg.base_dir)
    if P.labels is None:
        raise ValueError("minmax needs a labeled dataset")
    fractions = [float(f) for f in ev.get("fractions", (0.0, 0.1, 0.2, 0.3, 0.4))]
    norm = ev.get("norm", "l2")
    scale = float(np.mean(np.linalg.norm(P.points, axis=1)))
    mc = MinMaxConfig(**{**cfg.train, "seed": seed})
    res = ExperimentResult("minmax", seed, metrics={"C_p": scale})
    errors = {}
    for name, n_inner in (("erm", 0), ("frm", mc.N_inner)):
        m = cfg.model
        clf = MLPClassifier(P.d, _n_classes(P), tuple(m.get("hidden", (16, 16))),
                            m.get("activation", "softplus"), seed=seed)
        risk, flow, rep = solve_minmax(CrossEntropyRisk(clf), None, P, replace(mc, N_inner=n_inner))
        errs = []
        for fr in fractions:
            adv = pgd_attack(risk, T.points, fr * scale, T.labels, norm=norm, steps=int(ev.get("pgd_steps", 40)))
            errs.append(100.0 * T.expect(clf.predict(adv) != T.labels))
        errors[name] = errs
        res.metrics[f"achieved_w2_{name}"] = rep.achieved_w2
        res.tables[f"losses_{name}"] = Table(("iteration", "flow_objective", "classifier_loss"),
                                             [(i, a, b) for i, (a, b) in
                                              enumerate(zip(rep.flow_objective, rep.classifier_loss))])
        res.objects[name] = clf
    for fr, a, b in zip(fractions, errors["frm"], errors["erm"]):
        res.metrics[f"error_frm@{fr:g}"] = a
        res.metrics[f"error_erm@{fr:g}"] = b
    res.series = {"attack_budget_fraction": np.array(fractions), "error_frm": np.array(errors["frm"]),
                  "error_erm": np.array(errors["erm"])}
    res.tables["robustness"] = Table(FIGURE_PANELS["robustness_curve"],
                                     list(zip(fractions, errors["frm"], errors["erm"])))
    return res


def run_wdro_lp(cfg: ExperimentConfig, seed: int) -> ExperimentResult:
    ev = cfg.evaluate
    if "points" in ev:
        points = np.asarray(ev["points"], dtype=np.float64)
        n1, n2 = int(ev["n1"]), int(ev["n2"])
    else:
        P = generate_dataset(cfg.dataset, seed=seed, base_dir=cfg.base_dir)
        if P.labels is None:
            raise ValueError("wdro-lp needs a labeled two-class dataset")
        points = np.vstack([P.by_label(0).points, P.by_label(1).points])
        n1 = int(np.sum(P.labels == 0))
        n2 = P.n - n1
    inst = WdroLpInstance(points, n1, n2, float(ev.get("eps1", 0.1)), float(ev.get("eps2", 0.1)),
                          bool(ev.get("squared_cost", False)))
    pair = solve_wdro(inst)
    res = ExperimentResult("wdro-lp", seed)
    res.metrics.update(objective=pair.objective, iterations=pair.lp.iterations, n_vars=len(pair.lp.x),
                       primal_residual=pair.lp.primal_residual, dual_residual=pair.lp.dual_residual,
                       duality_gap=pair.lp.duality_gap)
    cols = ("index", "label") + tuple(f"x{j}" for j in range(inst.points.shape[1])) + ("p1", "p2")
    rows = [(i, int(i >= n1), *inst.points[i], pair.p1[i], pair.p2[i]) for i in range(inst.n)]
    res.tables["lfd_pair"] = Table(cols, rows)
    res.texts["lfd_pair.json"] = pair_to_json(pair)
    h = ev.get("h")
    if h is not None:
        q1, q2 = smoothed_lfd_sampler(pair, inst.points, float(h), int(ev.get("count", 500)), child_seed(seed, 3))
        res.objects.update(q1=q1, q2=q2)
        for tag, q in (("q1", q1), ("q2", q2)):
            res.tables[f"smoothed_{tag}"] = Table(tuple(f"x{j}" for j in range(q.d)), [tuple(r) for r in q.points])
    res.objects.update(instance=inst, pair=pair)
    return res


def run_privacy(cfg: ExperimentConfig, seed: int) -> ExperimentResult:
    ev = cfg.evaluate
    train = generate_dataset(cfg.dataset, seed=seed, base_dir=cfg.base_dir)
    test_n = int(ev.get("test_n", 4000))
    test = generate_dataset(cfg.dataset, n=test_n, seed=child_seed(seed, 1), base_dir=cfg.base_dir)
    if train.labels is None:
        raise ValueError("privacy needs a labeled dataset")
    C = _n_classes(train)
    m = cfg.model
    res = ExperimentResult("privacy", seed)
    comparison = Table(("task", "mechanism", "budget", "displacement", "alpha_avg", "beta_avg", "alpha_plus_beta"))
    tasks = ev.get("tasks", {"point": {"gamma": 3.0}, "missing_item": {"gamma": 0.2}})
    for t_idx, (name, tcfg) in enumerate(tasks.items()):
        task = QueryTask(name, C)
        ref = task.queries(train, int(tcfg.get("ref_n", train.n)), child_seed(seed, 2, t_idx))
        queries = task.queries(test, test_n, child_seed(seed, 3, t_idx))
        clf = MLPClassifier(train.d, C, tuple(m.get("hidden", (16, 16))), m.get("activation", "softplus"),
                            seed=seed)
        train_classifier(clf, ref, int(m.get("epochs", 60)), float(m.get("lr", 1e-2)))
        res.metrics[f"clean_accuracy_{task.kind}"] = accuracy_eval(clf, queries)
        lc = LFDTrainConfig(**{**cfg.train, "gamma": float(tcfg.get("gamma", cfg.train.get("gamma", 1.0))),
                               "seed": seed})
        dpm = train_dpm(clf, ref, lc)
        res.metrics[f"dpm_reference_budget_{task.kind}"] = dpm.budget
        # the comparison budget is the DPM's displacement on the audited queries
        dpm = Mechanism.dpm(dpm.flow, queries)
        mechs = [dpm] + [Mechanism.additive(k, dpm.budget, train.d, int(ev.get("mc_samples", 10 ** 6)),
                                            child_seed(seed, 4)) for k in ("APM_Gaussian", "APM_Laplace")]
        point = QueryTask("point", C)
        for j, M in enumerate(mechs):
            rep = error_rates(clf, M, point, queries, child_seed(seed, 5, t_idx, j), prepared=True,
                              repeats=int(ev.get("noise_repeats", 5)))
            comparison.rows.append((task.kind, M.kind, M.budget, rep.displacement, rep.alpha_avg, rep.beta_avg,
                                    rep.total))
            res.metrics[f"total_{task.kind}_{M.kind}"] = rep.total
            res.metrics[f"displacement_{task.kind}_{M.kind}"] = rep.displacement
            res.texts[f"errors_{task.kind}_{M.kind}.csv"] = rep.to_csv()
            res.texts[f"errors_{task.kind}_{M.kind}.json"] = rep.to_json()
            res.objects[(task.kind, M.kind)] = rep
        res.objects[(task.kind, "classifier")] = clf
        res.objects[(task.kind, "queries")] = queries
    res.tables["comparison"] = comparison
    return res


def run_verify(cfg: ExperimentConfig, seed: int) -> ExperimentResult:
    from .verify import run_invariants

    res = ExperimentResult("verify", seed)
    checks = run_invariants(seed)
    res.tables["invariants"] = Table(("check", "passed", "detail"), [(c.name, c.passed, c.detail) for c in checks])
    res.metrics["checks"] = len(checks)
    res.metrics["failed"] = sum(not c.passed for c in checks)
    return res


RUNNERS: Dict[str, Callable[[ExperimentConfig, int], ExperimentResult]] = {
    "lfd": run_lfd, "minmax": run_minmax, "wdro-lp": run_wdro_lp, "privacy": run_privacy, "verify": run_verify,
}


def run_experiment(cfg: ExperimentConfig, seed: Optional[int] = None) -> ExperimentResult:
    return RUNNERS[cfg.experiment](cfg, cfg.seeds[0] if seed is None else int(seed))


def write_result(result: ExperimentResult, out_dir) -> List[Path]:
    """Metric files only; their bytes depend on the config and seed alone."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    (out_dir / "metrics.csv").write_text(result.metrics_table().to_csv())
    paths.append(out_dir / "metrics.csv")
    for name, table in result.tables.items():
        p = out_dir / f"{name}.csv"
        p.write_text(table.to_csv())
        paths.append(p)
    for name, text in result.texts.items():
        p = out_dir / name
        p.write_text(text)
        paths.append(p)
    flow = result.objects.get("flow")
    if isinstance(flow, FlowChain):
        flow.save(out_dir / "flow")
    elif isinstance(flow, LabeledFlow):
        for k, chain in flow.chains.items():
            chain.save(out_dir / "flow" / f"class_{k}")
    if "Q" in result.objects:
        write_points_csv(out_dir / "lfd_samples.csv", result.objects["Q"])
        paths.append(out_dir / "lfd_samples.csv")
    if result.series:
        paths.extend(emit_figure_data(result, out_dir / "figures"))
    return paths


def result_summary(result: ExperimentResult):
    return json.loads(json.dumps({k: (None if isinstance(v, float) and math.isnan(v) else v)
                                  for k, v in result.metrics.items()}, default=float))
