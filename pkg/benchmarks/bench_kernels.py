"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeats 3] [--sizes 64,256,1024]

Both backends must agree on every result; the script exits nonzero if not.
"""

import argparse
import sys
import time

import numpy as np

from flowdro.kernels import get_backend
from flowdro.wdro_lp import WdroLpInstance, solve_wdro


def best_time(fn, repeats):
    best, out = np.inf, None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--sizes", default="64,256,1024", help="assignment problem sizes")
    p.add_argument("--lp-sizes", default="10,20,30", help="points per WDRO LP instance")
    args = p.parse_args(argv)
    try:
        compiled = get_backend("compiled")
    except ImportError:
        print("compiled extension not built; nothing to compare")
        return 1
    python = get_backend("python")
    rng = np.random.default_rng(0)
    ok = True
    print(f"{'kernel':<12}{'size':>8}{'compiled s':>14}{'python s':>14}{'speedup':>10}")
    for n in (int(s) for s in args.sizes.split(",")):
        cost = rng.random((n, n))
        tc, a = best_time(lambda: compiled.linear_assignment(cost), args.repeats)
        tp, b = best_time(lambda: python.linear_assignment(cost), args.repeats)
        same = abs(cost[np.arange(n), a].sum() - cost[np.arange(n), b].sum()) < 1e-9
        ok &= same
        print(f"{'assignment':<12}{n:>8}{tc:>14.4f}{tp:>14.4f}{tp / tc:>10.1f}{'' if same else '  MISMATCH'}")
    for n in (int(s) for s in args.lp_sizes.split(",")):
        inst = WdroLpInstance(rng.normal(size=(n, 2)), n // 2, n - n // 2, 0.3, 0.3)
        tc, a = best_time(lambda: solve_wdro(inst, backend="compiled"), args.repeats)
        tp, b = best_time(lambda: solve_wdro(inst, backend="python"), args.repeats)
        same = abs(a.objective - b.objective) < 1e-9 and a.lp.iterations == b.lp.iterations
        ok &= same
        print(f"{'wdro-lp':<12}{n:>8}{tc:>14.4f}{tp:>14.4f}{tp / tc:>10.1f}{'' if same else '  MISMATCH'}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
