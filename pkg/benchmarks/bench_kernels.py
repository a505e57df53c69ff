"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--rows 1000000] [--repeat 5]

The first numba call is timed separately (JIT compile or cache load).
"""

import argparse
import statistics
import time

import numpy as np

from ephemyarn.bench import kernels


def timed(fn, repeat):
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return statistics.median(out)


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--rows", type=int, default=1_000_000)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--reducers", type=int, default=16)
    args = p.parse_args()

    recs = kernels.generate_records(1, 0, args.rows, use="numpy")
    keys = np.ascontiguousarray(recs[:, : kernels.KEY_SIZE])
    sorted_keys = keys[kernels.sort_order(keys)]
    splits = sorted_keys[np.arange(1, args.reducers) * args.rows // args.reducers]

    cases = {
        "generate": lambda use: kernels.generate_records(1, 0, args.rows, use=use),
        "checksum": lambda use: kernels.key_checksum(keys, use=use),
        "partition": lambda use: kernels.partition_of(keys, splits, use=use),
        "first_unsorted": lambda use: kernels.first_unsorted(sorted_keys, use=use),
    }
    if not kernels.HAVE_NUMBA:
        print("numba not importable; only the numpy column is meaningful")

    print(f"rows={args.rows} repeat={args.repeat}")
    print(f"{'kernel':<16}{'numpy s':>10}{'numba s':>10}{'first call':>12}{'speedup':>9}")
    for name, fn in cases.items():
        t_np = timed(lambda: fn("numpy"), args.repeat)
        t0 = time.perf_counter()
        fn("numba")
        first = time.perf_counter() - t0
        t_nb = timed(lambda: fn("numba"), args.repeat)
        print(f"{name:<16}{t_np:>10.4f}{t_nb:>10.4f}{first:>12.4f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
