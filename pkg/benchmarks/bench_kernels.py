"""Compare the compiled kernels with their pure-Python fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Workloads mirror their use in the simulation: a batch of weighted
chi-square CDF evaluations as built by the tau2 confidence distribution,
and REML fits on simulated K=7 datasets.
"""

import argparse
import time

import numpy as np

from metapi import _pykernels
from metapi.intervals import Tau2ConfidenceDistribution
from metapi.quadform import MAX_TERMS, SERIES_EPS, _prepare
from metapi.simulation import Scenario, generate_dataset, replicate_rng

try:
    from metapi import _ckernels
except ImportError:
    _ckernels = None


def series_workload(n_rows=160, K=7):
    s = Scenario(0, K, 100, 1.0, "normal", master_seed=1)
    d = generate_dataset(s, 0, replicate_rng(1, 0, 0, 0)).dataset
    cd = Tau2ConfidenceDistribution(d)
    tau2 = np.geomspace(1e-3, 1e3, n_rows)
    lam = cd.weights(tau2)
    prep = _prepare(lam, np.full(n_rows, cd.q_obs))
    _, _, _, gam, half_x, shape0, p_start, logt = prep
    return (gam, half_x, shape0, p_start, logt, SERIES_EPS, MAX_TERMS)


def reml_workload(n=500, K=7):
    s = Scenario(0, K, 100, 1.0, "normal", master_seed=2)
    out = []
    for rep in range(n):
        d = generate_dataset(s, rep, replicate_rng(2, 0, rep, 0)).dataset
        out.append((d.effects, d.variances))
    return out


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    series = series_workload()
    fits = reml_workload()
    backends = [("python", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    results = {}
    for name, mod in backends:
        t_series = best_of(lambda: mod.ruben_series(*series), args.repeat)
        t_reml = best_of(lambda: [mod.reml_fixed_point(y, v, 0.0, 1e-10, 200) for y, v in fits], args.repeat)
        results[name] = (t_series, t_reml)

    c_py, _ = _pykernels.ruben_series(*series)
    print(f"{'kernel':<28}{'python [ms]':>14}{'cython [ms]':>14}{'speedup':>10}")
    for i, label in enumerate(("ruben_series (160 rows)", "reml_fixed_point (500 fits)")):
        py = results["python"][i] * 1e3
        if "cython" in results:
            cy = results["cython"][i] * 1e3
            print(f"{label:<28}{py:>14.2f}{cy:>14.2f}{py / cy:>9.1f}x")
        else:
            print(f"{label:<28}{py:>14.2f}{'n/a':>14}{'':>10}")
    if _ckernels:
        c_cy, _ = _ckernels.ruben_series(*series)
        print(f"max |cdf difference| between backends: {np.max(np.abs(c_py - c_cy)):.2e}")
    else:
        print("compiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()
