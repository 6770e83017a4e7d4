"""Time the numba and numpy variants of each kernel.

    python benchmarks/bench_kernels.py [--repeat 5]

The first numba call per kernel compiles (or loads the on-disk cache); it
is reported separately and excluded from the timings.
"""

import argparse
import time

import numpy as np

from diarkit import kernels


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _cases(rng):
    scores = np.clip(np.convolve(rng.random(360_000), np.ones(25) / 25, mode="same"), 0, 1)
    x = rng.standard_normal((600, 64))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    sim = x @ x.T
    np.fill_diagonal(sim, 1.0)

    n_spk, width, n_chunks = 8, 200, 3000
    starts = np.arange(n_chunks, dtype=np.int64) * 12
    widths = np.full(n_chunks, width, dtype=np.int64)
    offsets = np.arange(n_chunks, dtype=np.int64) * width
    blocks = rng.random((n_spk, n_chunks * width))
    n_frames = int(starts[-1] + width)

    def accumulate(fn):
        sums = np.zeros((n_spk, n_frames))
        counts = np.zeros(n_frames, dtype=np.int64)
        fn(sums, counts, starts, offsets, widths, blocks)

    return {
        "hysteresis (1 h of 10 ms frames)": (
            lambda: kernels.hysteresis_numpy(scores, 0.6, 0.4),
            kernels.hysteresis_numba and (lambda: kernels.hysteresis_numba(scores, 0.6, 0.4)),
        ),
        "ahc (600 segments, average)": (
            lambda: kernels.ahc_numpy(sim, 0.3, 0),
            kernels.ahc_numba and (lambda: kernels.ahc_numba(sim, 0.3, 0)),
        ),
        "stitch accumulate (3000 chunks x 8 spk)": (
            lambda: accumulate(kernels.accumulate_numpy),
            kernels.accumulate_numba and (lambda: accumulate(kernels.accumulate_numba)),
        ),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    cases = _cases(np.random.default_rng(args.seed))
    print(f"numba available: {kernels.HAVE_NUMBA}")
    print(f"{'kernel':<42} {'numpy (ms)':>11} {'numba (ms)':>11} {'speedup':>8} {'first call (s)':>15}")
    for name, (np_fn, nb_fn) in cases.items():
        t_np = _time(np_fn, args.repeat)
        if nb_fn:
            t0 = time.perf_counter()
            nb_fn()
            first = time.perf_counter() - t0
            t_nb = _time(nb_fn, args.repeat)
            print(f"{name:<42} {1e3 * t_np:11.2f} {1e3 * t_nb:11.2f} {t_np / t_nb:7.1f}x {first:15.2f}")
        else:
            print(f"{name:<42} {1e3 * t_np:11.2f} {'-':>11} {'-':>8} {'-':>15}")


if __name__ == "__main__":
    main()
