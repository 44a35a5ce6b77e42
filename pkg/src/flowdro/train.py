"""Block-wise progressive LFD training, the alternating min-max solver,
LFD evaluation reports and sampler composition.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .autodiff import adam_step, sgd_step
from .errors import DivergenceError, NonFiniteError, ShapeError
from .flow import FlowChain, block_objective, block_objective_grad, make_block, push_forward
from .measures import DiagGaussian, EmpiricalMeasure, w2_assignment
from .rng import child_seed, make_rng
from .risks import CrossEntropyRisk, NegatedLoss, RiskModel, accuracy_eval, risk_eval, train_model

DIVERGENCE_FACTOR = 1e3


@dataclass
class LFDTrainConfig:
    K: int = 1
    gamma: float = 1.0
    schedule: str = "even"  # even | geometric | list
    factor: float = 1.0
    gammas: Optional[List[float]] = None
    epochs: int = 200
    batch_size: Optional[int] = None
    lr: float = 1e-2
    optimizer: str = "adam"
    method: str = "rk4"
    substeps: int = 3
    hidden: Sequence[int] = (32, 32)
    activation: str = "softplus"
    beta: float = 20.0
    time_conditioning: Optional[bool] = None
    per_class: bool = True
    target_eps: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if int(self.K) < 1:
            raise ValueError("K must be >= 1")
        if self.schedule not in ("even", "geometric", "list"):
            raise ValueError(f"unknown gamma schedule {self.schedule!r}")
        if self.schedule == "geometric" and not self.factor > 0:
            raise ValueError("geometric factor must be positive")
        if self.schedule == "list" and (self.gammas is None or len(self.gammas) != self.K):
            raise ValueError("explicit gamma list must have K entries")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if any(g <= 0 for g in self.gamma_schedule()):
            raise ValueError("all gamma_k must be positive")
        self.hidden = tuple(self.hidden)

    def gamma_schedule(self):
        if self.schedule == "list":
            return [float(g) for g in self.gammas]
        if self.schedule == "geometric":
            return [float(self.gamma) * self.factor ** k for k in range(self.K)]
        return [float(self.gamma)] * self.K


@dataclass
class MinMaxConfig:
    gamma: float = 5.0
    N: int = 200
    N_inner: int = 3
    lr_classifier: float = 1e-2
    lr_flow: float = 1e-2
    method: str = "euler"
    substeps: int = 1
    hidden: Sequence[int] = (32, 32)
    activation: str = "softplus"
    beta: float = 20.0
    per_class: bool = True
    warm_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if int(self.N) < 1:
            raise ValueError("N must be >= 1")
        if int(self.N_inner) < 0:
            raise ValueError("N_inner must be >= 0")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        self.hidden = tuple(self.hidden)


REPORT_COLUMNS = ("block", "epoch", "objective", "transport_cost", "w2_estimate", "risk")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


@dataclass
class TrainReport:
    rows: List[dict] = field(default_factory=list)
    block_costs: List[float] = field(default_factory=list)
    achieved_w2: float = 0.0
    chain_cost: float = 0.0
    final_risk: Optional[float] = None
    n_evals: int = 0
    expected_evals: int = 0
    extra: dict = field(default_factory=dict)

    def add_epoch(self, block, epoch, objective):
        self.rows.append({"block": block, "epoch": epoch, "objective": objective,
                          "transport_cost": None, "w2_estimate": None, "risk": None})

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])
        return buf.getvalue()

    def to_dict(self):
        d = asdict(self)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, default=float)


class LabeledFlow:
    """One FlowChain per class label; labels ride along with the points."""

    def __init__(self, chains: Dict[int, FlowChain]):
        self.chains = dict(chains)

    def __call__(self, points, labels):
        out = np.array(points, dtype=np.float64, copy=True)
        for k, chain in self.chains.items():
            mask = labels == k
            if mask.any():
                out[mask] = chain(out[mask])
        return out

    @property
    def n_evals(self):
        return sum(c.n_evals for c in self.chains.values())

    def all_blocks(self):
        return [b for c in self.chains.values() for b in c.blocks]


def apply_flow(flow, P: EmpiricalMeasure) -> EmpiricalMeasure:
    if isinstance(flow, LabeledFlow):
        if P.labels is None:
            raise ValueError("per-class flow needs a labeled measure")
        return P.with_points(flow(P.points, P.labels))
    return push_forward(flow, P)


def _w2(P, Q, seed=0):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if P.n > 4096:
            idx = make_rng(seed).choice(P.n, 4096, replace=False)
            P, Q = P.select(np.sort(idx)), Q.select(np.sort(idx))
        return w2_assignment(P, Q, seed)[0]


def _optimizer_step(store, cfg_opt, lr):
    if cfg_opt == "adam":
        adam_step(store, lr=lr)
    else:
        sgd_step(store, lr)


def train_block(block, V, P: EmpiricalMeasure, epochs, lr, optimizer="adam", batch_size=None, seed=0,
                report: Optional[TrainReport] = None, block_index=0):
    """Minimize the block objective on samples of P; returns per-epoch objectives."""
    rng = make_rng(seed)
    store = block.field.store
    store.zero_grad()
    n = P.n
    bs = n if batch_size is None else min(int(batch_size), n)
    curve = []
    initial = None
    for epoch in range(int(epochs)):
        order = rng.permutation(n) if bs < n else None
        total = 0.0
        for s in range(0, n, bs):
            batch = P if order is None else P.select(np.sort(order[s:s + bs]))
            try:
                obj = block_objective_grad(block, V, batch)
            except NonFiniteError as exc:
                raise DivergenceError(f"block {block_index}, epoch {epoch}: {exc}") from exc
            _optimizer_step(store, optimizer, lr)
            total += obj * batch.n
        value = total / n
        if initial is None:
            initial = value
        if not np.isfinite(value) or abs(value) > DIVERGENCE_FACTOR * max(abs(initial), 1.0):
            raise DivergenceError(f"block {block_index}, epoch {epoch}: objective {value:.4g} diverged")
        curve.append(value)
        if report is not None:
            report.add_epoch(block_index, epoch, value)
    return curve


def _train_chain(V, P: EmpiricalMeasure, cfg: LFDTrainConfig, seed, report: TrainReport, risk=None,
                 reference: Optional[EmpiricalMeasure] = None):
    chain = FlowChain()
    current = P
    for k, gamma in enumerate(cfg.gamma_schedule()):
        block = make_block(P.d, gamma, cfg.method, cfg.substeps, cfg.hidden, cfg.activation, cfg.beta,
                           cfg.time_conditioning, seed=child_seed(seed, k, 0))
        train_block(block, V, current, cfg.epochs, cfg.lr, cfg.optimizer, cfg.batch_size,
                    child_seed(seed, k, 1), report, k)
        nxt = current.with_points(block(current.points))
        diff = current.points - nxt.points
        cost = current.expect(np.sum(diff * diff, axis=1))
        chain.append(block)
        current = nxt
        report.block_costs.append(cost)
        last = report.rows[-1] if report.rows and report.rows[-1]["block"] == k else None
        w2 = _w2(P, current)
        if last is not None:
            last["transport_cost"] = cost
            last["w2_estimate"] = w2
            last["risk"] = risk_eval(risk, current) if risk is not None else -current.expect(V.value(current.points, current.labels))
        if cfg.target_eps is not None and w2 >= cfg.target_eps:
            break
    return chain, current


def train_lfd(V, P: EmpiricalMeasure, cfg: LFDTrainConfig, risk: Optional[RiskModel] = None):
    """Train K flow blocks; block k+1 is fit on the pushforward of P by blocks 1..k.

    With ``cfg.per_class`` and a labeled P, one chain is trained per class
    and a :class:`LabeledFlow` is returned; otherwise a single FlowChain.
    """
    report = TrainReport()
    if cfg.per_class and P.labels is not None:
        chains = {}
        for k in np.unique(P.labels):
            sub = P.by_label(int(k))
            chains[int(k)], _ = _train_chain(V, sub, cfg, child_seed(cfg.seed, int(k)), report, risk)
        flow = LabeledFlow(chains)
    else:
        flow, _ = _train_chain(V, P, cfg, cfg.seed, report, risk)
    _finish_report(report, flow, V, P, risk)
    return flow, report


def _finish_report(report, flow, V, P, risk):
    blocks = flow.all_blocks() if isinstance(flow, LabeledFlow) else flow.blocks
    for b in blocks:
        b.field.n_evals = 0
    Q = apply_flow(flow, P)
    report.n_evals = sum(b.field.n_evals for b in blocks)
    report.expected_evals = 0
    if isinstance(flow, LabeledFlow):
        for k, chain in flow.chains.items():
            nk = int(np.sum(P.labels == k))
            report.expected_evals += sum(b.evals_per_point for b in chain.blocks) * nk
    else:
        report.expected_evals = sum(b.evals_per_point for b in flow.blocks) * P.n
    diff = P.points - Q.points
    report.chain_cost = P.expect(np.sum(diff * diff, axis=1))
    report.achieved_w2 = _w2(P, Q)
    if risk is not None:
        report.final_risk = risk_eval(risk, Q)
    else:
        report.final_risk = -Q.expect(V.value(Q.points, Q.labels))
    return Q


@dataclass
class MinMaxReport:
    flow_objective: List[float] = field(default_factory=list)
    classifier_loss: List[float] = field(default_factory=list)
    achieved_w2: float = 0.0

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("iteration", "flow_objective", "classifier_loss"))
        for i, (a, b) in enumerate(zip(self.flow_objective, self.classifier_loss)):
            w.writerow((i, _fmt(a), _fmt(b)))
        return buf.getvalue()


def init_minmax_flow(P: EmpiricalMeasure, cfg: MinMaxConfig):
    def block(seed):
        return make_block(P.d, cfg.gamma, cfg.method, cfg.substeps, cfg.hidden, cfg.activation, cfg.beta,
                          seed=seed)

    if cfg.per_class and P.labels is not None:
        return LabeledFlow({int(k): FlowChain([block(child_seed(cfg.seed, int(k)))]) for k in np.unique(P.labels)})
    return FlowChain([block(cfg.seed)])


def solve_minmax(risk: RiskModel, flow, P: EmpiricalMeasure, cfg: MinMaxConfig):
    """Alternate N_inner flow steps (worst case for the current model) with
    one model step on the transported samples, N times.

    The flow is warm-started across outer iterations unless
    ``cfg.warm_start`` is false, in which case it is reset to the identity.
    """
    if risk.needs_labels and P.labels is None:
        raise ValueError("supervised risk needs a labeled measure")
    if flow is None:
        flow = init_minmax_flow(P, cfg)
    V = NegatedLoss(risk)
    report = MinMaxReport()
    parts = (
        [(chain.blocks[0], P.by_label(k)) for k, chain in flow.chains.items()]
        if isinstance(flow, LabeledFlow) else [(flow.blocks[0], P)]
    )
    initial = None
    for it in range(int(cfg.N)):
        if not cfg.warm_start:
            for blk, _ in parts:
                last = blk.field.n_layers - 1
                for name in (f"W{last}", f"b{last}"):
                    blk.field.store.set(name, np.zeros_like(blk.field.store[name]))
        obj = 0.0
        for _ in range(int(cfg.N_inner)):
            obj = 0.0
            for blk, sub in parts:
                blk.field.store.zero_grad()
                obj += block_objective_grad(blk, V, sub) * sub.n / P.n
                adam_step(blk.field.store, lr=cfg.lr_flow)
        Q = apply_flow(flow, P)
        loss = train_model(risk, Q, epochs=1, lr=cfg.lr_classifier, seed=child_seed(cfg.seed, it))[0]
        if initial is None:
            initial = loss
        if not np.isfinite(loss) or not np.isfinite(obj) or loss > DIVERGENCE_FACTOR * max(initial, 1.0):
            raise DivergenceError(f"min-max iteration {it}: loss {loss:.4g}, flow objective {obj:.4g}")
        report.flow_objective.append(obj)
        report.classifier_loss.append(loss)
    report.achieved_w2 = _w2(P, apply_flow(flow, P))
    return risk, flow, report


def evaluate_lfd(risk: RiskModel, P: EmpiricalMeasure, Q: EmpiricalMeasure, seed=0):
    """Risk and accuracy on Q, and the W2 budget between P and Q."""
    out = {"risk": risk_eval(risk, Q), "w2_budget": None, "accuracy": None}
    if isinstance(risk, CrossEntropyRisk):
        out["accuracy"] = accuracy_eval(risk.model, Q)
    if P.n != Q.n:
        warnings.warn("P and Q differ in size; resampling for the W2 estimate", stacklevel=2)
    out["w2_budget"] = _w2(P, Q, seed)
    return out


def compose_sampler(base, chain):
    """Sampler for T#base: draws from ``base(n, seed)`` then applies ``chain``."""
    if isinstance(base, DiagGaussian):
        gauss = base
        base = lambda n, seed: gauss.sample(n, seed)
        d = gauss.d
    else:
        d = getattr(base, "d", None)
    blocks = chain.blocks if isinstance(chain, FlowChain) else []
    if d is not None and blocks and blocks[0].d != d:
        raise ShapeError(f"base dimension {d} != chain dimension {blocks[0].d}")

    def sample(n, seed):
        x = np.asarray(base(n, seed), dtype=np.float64)
        if blocks and x.shape[1] != blocks[0].d:
            raise ShapeError(f"base produced dimension {x.shape[1]}, chain expects {blocks[0].d}")
        return chain(x)

    return sample
