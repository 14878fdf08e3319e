"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--samples 1000000] [--repeat 3]

The first numba call is reported separately since it includes compilation.
"""
import argparse
import time

import numpy as np

from abstrap import _kernels
from abstrap._backend import HAVE_NUMBA


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def problems(n, seed=0):
    rng = np.random.default_rng(seed)
    trans = np.array([[0.999, 0.001], [0.005, 0.995]])
    init = np.array([0.8, 0.2])
    states = _kernels.discrete_path(trans, n, 0, rng, "numpy")
    means = np.array([[0.0, 0.0], [1.0, 0.0]])
    stds = np.full((2, 2), 0.35)
    x = means[states] + rng.normal(size=(n, 2)) * 0.35
    return trans, init, x, means, stds


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--samples", type=int, default=1_000_000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    trans, init, x, means, stds = problems(args.samples)
    log_b = _kernels.log_emission(x, means, stds, "numpy")
    gamma = _kernels.forward_backward(log_b, trans, init, "numpy")[0]
    rates = np.array([[0.0, 1e3], [5e3, 0.0]])

    cases = {
        "log_emission": lambda b: _kernels.log_emission(x, means, stds, b),
        "forward_backward": lambda b: _kernels.forward_backward(log_b, trans, init, b),
        "viterbi": lambda b: _kernels.viterbi(log_b, np.log(trans), np.log(init), b),
        "weighted_moments": lambda b: _kernels.weighted_moments(gamma, x, b),
        "discrete_path": lambda b: _kernels.discrete_path(
            trans, args.samples, 0, np.random.default_rng(1), b),
        "ctmc_path": lambda b: _kernels.ctmc_path(
            rates, 1e6, args.samples, 0, np.random.default_rng(1), b),
    }

    print(f"{args.samples} samples, best of {args.repeat}")
    if not HAVE_NUMBA:
        print("numba disabled; numpy timings only")
        for name, fn in cases.items():
            print(f"{name:<18}{best_of(lambda: fn('numpy'), args.repeat):>9.3f}s")
        return
    print(f"{'kernel':<18}{'compile+run':>12}{'numba':>10}{'numpy':>10}{'speedup':>9}")
    for name, fn in cases.items():
        t0 = time.perf_counter()
        fn("numba")
        first = time.perf_counter() - t0
        t_nb = best_of(lambda: fn("numba"), args.repeat)
        t_np = best_of(lambda: fn("numpy"), args.repeat)
        print(f"{name:<18}{first:>11.3f}s{t_nb:>9.3f}s{t_np:>9.3f}s{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
