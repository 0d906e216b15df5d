"""Compare the compiled event loop with the pure-Python fallback.

Both backends run the same replications (same seeds) and must agree bit for
bit; the script reports events per second and the speedup.

    python benchmarks/bench_simcore.py [--events 20000] [--repeat 3]
"""
import argparse
import time

import numpy as np

from mfbike.env import EnvironmentSpec
from mfbike.rates import ModelParams
from mfbike.simulator import run


def _params():
    env = EnvironmentSpec(W=[[-1.0, 1.0], [1.0, -1.0]], lam=[35.0, 50.0], mu=[30.0, 20.0])
    return ModelParams(K=20, C=10, L=5, alpha=0.5, beta=0.5, env=env)


def _time(backend, p, mode, N, events, repeat):
    best, res = np.inf, None
    for _ in range(repeat):
        t0 = time.perf_counter()
        res = run(p, N, 1e9, seed=7, mode=mode, max_events=events, sample_times=[], backend=backend)
        best = min(best, time.perf_counter() - t0)
    return best, res


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--events", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--N", type=int, default=200)
    args = ap.parse_args(argv)
    p = _params()
    print(f"{'mode':<12} {'backend':<8} {'events/s':>12} {'speedup':>8}  identical")
    for mode in ("physical", "paper-rates"):
        t_py, r_py = _time("python", p, mode, args.N, args.events, args.repeat)
        t_cy, r_cy = _time("cython", p, mode, args.N, args.events, args.repeat)
        same = np.array_equal(r_py.batch_occ, r_cy.batch_occ) and r_py.t_end == r_cy.t_end
        print(f"{mode:<12} {'python':<8} {args.events / t_py:>12.0f} {'':>8}")
        print(f"{mode:<12} {'cython':<8} {args.events / t_cy:>12.0f} {t_py / t_cy:>7.1f}x  {same}")


if __name__ == "__main__":
    main()
