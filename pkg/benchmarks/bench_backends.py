"""Time the numba kernels against the pure-numpy fallbacks.

Run from the repository root:

    python3 benchmarks/bench_backends.py
    python3 benchmarks/bench_backends.py --rows 64,512,4096 --repeats 200

Each kernel is timed on (rows x in_dim) batches through an (out_dim x
in_dim) layer.  The numba column includes a warmup call so JIT
compilation never lands inside the timed region.
"""

import argparse
import time

import numpy as np

from layermatch import kernels


def time_call(fn, args, repeats):
    fn(*args)  # warm caches (and the JIT, for numba)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_size(rows, in_dim, out_dim, repeats, rng):
    x = rng.normal(size=(rows, in_dim))
    w = rng.normal(size=(out_dim, in_dim))
    b = rng.normal(size=(out_dim, 1))
    z = rng.normal(size=(rows, out_dim))

    cases = {
        "affine": (x, w, b),
        "activate": (z, kernels.TANH),
        "activate_grad": (z, kernels.RELU),
        "affine_backward": (z, x, w),
        "softmax_rows": (z,),
    }
    results = []
    for name, args in cases.items():
        t_np = time_call(kernels.implementations("numpy")[name], args, repeats)
        t_nb = time_call(kernels.implementations("numba")[name], args, repeats)
        results.append((name, t_np, t_nb))
    return results


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", default="32,256,2048",
                        help="comma-separated batch sizes")
    parser.add_argument("--in-dim", type=int, default=64)
    parser.add_argument("--out-dim", type=int, default=64)
    parser.add_argument("--repeats", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    try:
        kernels.implementations("numba")
    except Exception as exc:
        parser.error(f"numba backend unavailable: {exc}")

    rng = np.random.default_rng(args.seed)
    print(f"active backend at import: {kernels.backend()}")
    print(f"{'kernel':18s} {'rows':>6s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for rows in [int(r) for r in args.rows.split(",")]:
        for name, t_np, t_nb in bench_size(
            rows, args.in_dim, args.out_dim, args.repeats, rng
        ):
            ratio = t_np / t_nb if t_nb > 0 else float("inf")
            print(
                f"{name:18s} {rows:6d} {t_np * 1e6:10.1f} {t_nb * 1e6:10.1f} "
                f"{ratio:7.2f}x"
            )


if __name__ == "__main__":
    main()
