"""Time each kernel on its numba path and its numpy path.

    python benchmarks/bench_kernels.py [--repeat 50]

Prints one row per kernel with the median wall time of both paths and the
speedup. The first numba call is excluded (JIT compile).
"""
import argparse
import statistics
import time

import numpy as np

from modelab import _kernels as K


def cases(rng):
    x = rng.normal(size=(256, 2))
    y = rng.normal(size=(512, 2))
    labels = rng.integers(0, 8, size=256)
    mask = rng.random((256, 512)) < 0.75
    centers = np.array([1.0, 2.0, 3.0, 4.0])
    p, g = rng.normal(size=20000), rng.normal(size=20000)
    m, v = np.zeros_like(p), np.zeros_like(p)
    return {
        "pairwise_dist": (lambda f: f(x, y), "pairwise_dist"),
        "batch_hard_indices": (lambda f: f(x, labels), "batch_hard_indices"),
        "masked_argmin": (lambda f: f(x, y, mask), "masked_argmin"),
        "nearest_center": (lambda f: f(np.abs(y[:, 0]) * 4, centers), "nearest_center"),
        "nearest_mean": (lambda f: f(y, x[:8]), "nearest_mean"),
        "adam_update": (lambda f: f(p.copy(), g, m.copy(), v.copy(), 1e-3, 0.5, 0.999, 1e-8, 1.0),
                        "adam_update"),
    }


def timeit(call, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        call()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    if K.numba is None:
        raise SystemExit("numba is not importable; nothing to compare")
    print(f"{'kernel':<20}{'numpy (us)':>12}{'numba (us)':>12}{'speedup':>9}")
    for name, (run, attr) in cases(np.random.default_rng(0)).items():
        np_fn = getattr(K, f"_{attr}_np")
        nb_fn = getattr(K, f"_{attr}_nb")
        if attr == "batch_hard_indices":
            # the numba kernel expects int64 labels; match the dispatcher
            np_call = lambda: run(lambda a, b: np_fn(a, b.astype(np.int64)))
            nb_call = lambda: run(lambda a, b: nb_fn(a, b.astype(np.int64)))
        elif attr == "adam_update":
            np_call = lambda: run(np_fn)
            nb_call = lambda: run(lambda *a: nb_fn(*a[:4], *map(float, a[4:])))
        else:
            np_call = lambda: run(np_fn)
            nb_call = lambda: run(nb_fn)
        nb_call()
        t_np, t_nb = timeit(np_call, args.repeat), timeit(nb_call, args.repeat)
        print(f"{name:<20}{t_np * 1e6:>12.1f}{t_nb * 1e6:>12.1f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
