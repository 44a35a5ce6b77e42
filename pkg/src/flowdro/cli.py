"""Command-line entry point: ``flowdro <experiment> --config PATH [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 validation error, 2 numerical failure,
3 failed acceptance or invariant check.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from . import __version__
from .config import EXPERIMENTS, ConfigError, ExperimentConfig, default_config, load_config
from .errors import ConvergenceError, DivergenceError, InfeasibleError, NonFiniteError, ShapeError, UnboundedError
from .experiments import run_experiment, write_result
from .rng import ALGORITHM

log = logging.getLogger("flowdro")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_CHECK = 0, 1, 2, 3


@dataclass
class RunReport:
    config: dict
    content_hash: str
    metrics: Dict[str, dict] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    artifacts: List[str] = field(default_factory=list)
    rng: str = ALGORITHM
    version: str = __version__

    def to_json(self):
        return json.dumps(self.__dict__, indent=2, default=float) + "\n"


def run(cfg: ExperimentConfig, out_dir: Optional[Path] = None):
    """Run every seed of ``cfg``; returns (RunReport, per-seed results)."""
    report = RunReport(cfg.to_dict(), cfg.content_hash())
    results = []
    for seed in cfg.seeds:
        t0 = time.perf_counter()
        res = run_experiment(cfg, seed)
        report.timings[f"seed_{seed}"] = time.perf_counter() - t0
        report.metrics[f"seed_{seed}"] = {k: float(v) for k, v in res.metrics.items()}
        results.append(res)
        if out_dir is not None:
            paths = write_result(res, Path(out_dir) / f"seed_{seed}")
            report.artifacts.extend(str(p.relative_to(out_dir)) for p in paths)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "config.json").write_text(cfg.to_json())
        (Path(out_dir) / "report.json").write_text(report.to_json())
    return report, results


def build_parser():
    p = argparse.ArgumentParser(prog="flowdro", description="Flow-based least-favorable distributions in W2 balls.")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", type=Path, help="JSON config (defaults to the packaged config for the experiment)")
    p.add_argument("--seed", type=int, help="override the config seeds with a single seed")
    p.add_argument("--out", type=Path, help="output directory (default: config 'output' or runs/<experiment>)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else default_config(args.experiment)
        if cfg.experiment != args.experiment:
            raise ConfigError("experiment", f"config is for {cfg.experiment!r}, not {args.experiment!r}")
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed", "must be nonnegative")
            cfg.seeds = [args.seed]
        out = args.out or Path(cfg.output or Path("runs") / cfg.experiment)
        report, results = run(cfg, out)
    except (ConfigError, ShapeError, FileNotFoundError) as exc:
        print(f"flowdro: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NonFiniteError, DivergenceError, ConvergenceError, InfeasibleError, UnboundedError,
            FloatingPointError) as exc:
        print(f"flowdro: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"flowdro: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    for res in results:
        for name, value in res.metrics.items():
            print(f"seed {res.seed}  {name} = {value:.6g}")
    print(f"wrote {out}/report.json")
    if cfg.experiment == "verify":
        failed = [row for res in results for row in res.tables["invariants"].rows if not row[1]]
        for name, _, detail in failed:
            print(f"FAIL {name}: {detail}", file=sys.stderr)
        return EXIT_CHECK if failed else EXIT_OK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
