"""Compiled vs numpy hyperparameter kernels.

Times ``eps_argmax`` (scan and warm-start modes) and ``eps_objective`` on the
expected counts of a simulated 10-node trial, then one full hierarchical fit
with each backend.  Run::

    python benchmarks/bench_kernels.py [--repeat N] [--P 10] [--T 100]
"""

import argparse
import time

import numpy as np

from anomography import hpem, kernels
from anomography.netsim import ScenarioSpec, simulate_trial


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def _inputs(P, T, seed):
    trial = simulate_trial(ScenarioSpec(P=P, seed=seed), 0, T, anomalous=False)
    obs = trial.observe(0.2, seed)
    stats = hpem.ObservationStats(obs)
    rates = trial.baseline + 0.1 * (trial.baseline > 0)
    counts = hpem.e_step(rates, stats=stats)
    vals, wts, offs = counts.slot_values()
    K = np.full(len(stats.edge_flat), float(stats.K))
    lam0 = trial.baseline.ravel()[stats.edge_flat]
    return obs, trial.baseline, (vals, wts, offs, K, lam0)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--P", type=int, default=10)
    ap.add_argument("--T", type=int, default=100)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args(argv)

    backends = {"python": kernels.get_backend("python")}
    if kernels.compiled_available():
        backends["compiled"] = kernels.get_backend("compiled")
    else:
        print("compiled extension not built; timing the numpy backend only")

    obs, lam0, (vals, wts, offs, K, l0) = _inputs(args.P, args.T, args.seed)
    eps_mid = np.full(len(l0), 5.0)
    cases = {
        "eps_argmax scan": lambda b: b.eps_argmax(vals, wts, offs, K, l0, 1e-9, 1e9),
        "eps_argmax warm": lambda b: b.eps_argmax(vals, wts, offs, K, l0, 1e-9, 1e9, eps_init=eps_mid),
        "eps_objective": lambda b: b.eps_objective(vals, wts, offs, K, l0, eps_mid),
    }
    print(f"P={args.P} T={args.T} edges={len(l0)} slots={len(vals)}  (best of {args.repeat})")
    print(f"{'case':<20}" + "".join(f"{name:>14}" for name in backends) + f"{'speedup':>10}")
    for label, fn in cases.items():
        t = {name: _best(lambda: fn(b), args.repeat) for name, b in backends.items()}
        row = f"{label:<20}" + "".join(f"{t[n] * 1e3:>12.3f}ms" for n in backends)
        if "compiled" in t:
            row += f"{t['python'] / t['compiled']:>9.1f}x"
        print(row)

    saved = hpem.kernels
    try:
        t = {}
        for name, b in backends.items():
            hpem.kernels = b
            t[name] = _best(lambda: hpem.run_em(obs, lam0, variant=hpem.HIER, init="mre"), 1)
    finally:
        hpem.kernels = saved
    row = f"{'full HIER fit':<20}" + "".join(f"{t[n]:>13.3f}s" for n in backends)
    if "compiled" in t:
        row += f"{t['python'] / t['compiled']:>9.1f}x"
    print(row)


if __name__ == "__main__":
    main()
