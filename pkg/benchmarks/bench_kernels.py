"""Time the numba kernels against their pure-numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat N]

Each kernel is called once before timing so compilation is excluded.
Outputs of both paths are checked for agreement first.
"""

import argparse
import time

import numpy as np

from valence import _kernels as k


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    x = rng.standard_normal(20_000)
    # 30 fps frames folded into 0.5 s windows, a video of 100 s
    n_frames = 3000
    assign = np.floor(np.arange(n_frames) / 15).astype(np.int64)
    frames = rng.standard_normal((n_frames, 20))
    S, T = 8, 400
    log_init = np.log(np.full(S, 1.0 / S))
    trans = rng.random((S, S)) + 0.1
    log_trans = np.log(trans / trans.sum(axis=1, keepdims=True))
    log_emit = rng.standard_normal((T, S))
    return {
        "moving_average": (lambda: k.moving_average_numpy(x, 5), lambda: k.moving_average(x, 5)),
        "window_mean": (lambda: k.window_mean_numpy(assign, frames, 200), lambda: k.window_mean(assign, frames, 200)),
        "viterbi": (
            lambda: k.viterbi_numpy(log_init, log_trans, log_emit),
            lambda: k.viterbi(log_init, log_trans, log_emit),
        ),
    }


def agree(a, b):
    if isinstance(a, tuple):
        return all(agree(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not k.NUMBA_ENABLED:
        print("numba is disabled or missing; only the numpy path exists")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  agree")
    for name, (ref, fast) in cases(rng).items():
        ok = agree(ref(), fast())
        t_ref = best_of(ref, args.repeat)
        t_fast = best_of(fast, args.repeat)
        print(f"{name:<16} {1e3 * t_ref:>10.3f} {1e3 * t_fast:>10.3f} {t_ref / t_fast:>7.1f}x  {ok}")


if __name__ == "__main__":
    main()
