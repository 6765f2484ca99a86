"""Wall-clock comparison of the compiled and pure-Python kernels.

Usage::

    python benchmarks/bench_kernels.py [--repeats 3] [--json results.json]

Each case runs on both backends with identical inputs; the table reports
the best time of ``--repeats`` runs and the largest difference between the
two outputs, which should sit at rounding level.
"""

import argparse
import json
import time
from dataclasses import replace

import numpy as np

from taskalloc import kernels
from taskalloc.agents import AgentSimConfig, simulate_agents
from taskalloc.closed_loop import simulate
from taskalloc.design import optimal_equilibrium
from taskalloc.presets import reference_matrices, reference_config


def _best(fn, repeats):
    best, out = np.inf, None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cases():
    refs = reference_matrices()
    pairs = {name: optimal_equilibrium(fam, w, 1.0, cost) for name, (fam, w, cost, _) in refs.items()
             if name in ("resource_sum_of_squares", "sensing_balanced")}
    rc, _ = reference_config("resource_sum_of_squares", T=10.0, pair=pairs["resource_sum_of_squares"])
    hs, _ = reference_config("sensing_balanced", T=10.0, pair=pairs["sensing_balanced"])
    agent = AgentSimConfig(replace(rc, T=2.0, q0=np.zeros(4)), N=2000, seed=0)
    return [
        ("closed loop, resource m=n=4, 1e4 RK4 steps", lambda b: simulate(rc, backend=b)),
        ("closed loop, sensing m=4 n=6, 1e4 RK4 steps", lambda b: simulate(hs, backend=b)),
        ("agents, N=2000, T=2 (~4e3 events)", lambda b: simulate_agents(agent, backend=b)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--json", help="write results to this file")
    args = ap.parse_args(argv)
    if not kernels.compiled_available:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    rows = []
    for label, run in cases():
        tc, a = _best(lambda: run("compiled"), args.repeats)
        tp, b = _best(lambda: run("python"), args.repeats)
        diff = float(max(np.max(np.abs(a.q - b.q)), np.max(np.abs(a.x - b.x))))
        rows.append({"case": label, "compiled_s": tc, "python_s": tp, "speedup": tp / tc, "max_abs_diff": diff})
    width = max(len(r["case"]) for r in rows)
    print(f"{'case':<{width}}  {'compiled':>10}  {'python':>10}  {'speedup':>8}  {'max diff':>9}")
    for r in rows:
        print(f"{r['case']:<{width}}  {r['compiled_s']:>9.3f}s  {r['python_s']:>9.3f}s  "
              f"{r['speedup']:>7.1f}x  {r['max_abs_diff']:>9.1e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
