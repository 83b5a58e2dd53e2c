#!/usr/bin/env python3
"""Benchmark the numba-jitted conv2d kernels against the pure-numpy fallback.

The package picks the jitted path automatically when numba imports and
ALCNET_NUMBA is not 0; this script times both paths explicitly so the
trade-off stays visible.

Usage:
    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --sizes 32 64 128 --channels 8 16
    python3 benchmarks/bench_kernels.py --output results.csv
"""

import argparse
import time

import numpy as np

from alcnet import kernels


def time_call(fn, *args, repeats):
    fn(*args)  # warm the JIT cache before timing
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.mean(times)), float(np.std(times))


def bench_case(size, cin, cout, stride, repeats, rng):
    x = rng.normal(size=(cin, size, size))
    w = rng.normal(size=(cout, cin, 3, 3))
    gy_shape = kernels.conv2d_out_shape(size, size, 3, stride, 1)
    gy = rng.normal(size=(cout, *gy_shape))
    rows = []
    cases = [
        ("forward", kernels.conv2d_forward_numpy, kernels.conv2d_forward_jit,
         (x, w, stride, 1)),
        ("grad_input", kernels.conv2d_grad_input_numpy, kernels.conv2d_grad_input_jit,
         (gy, w, stride, 1, x.shape)),
        ("grad_weight", kernels.conv2d_grad_weight_numpy, kernels.conv2d_grad_weight_jit,
         (gy, x, stride, 1, 3)),
    ]
    for name, fn_np, fn_jit, args in cases:
        np.testing.assert_allclose(fn_np(*args), fn_jit(*args), atol=1e-10)
        numpy_ms, _ = time_call(fn_np, *args, repeats=repeats)
        jit_ms, _ = time_call(fn_jit, *args, repeats=repeats)
        rows.append((name, size, cin, cout, stride, numpy_ms, jit_ms,
                     numpy_ms / jit_ms if jit_ms > 0 else float("inf")))
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", type=int, nargs="+", default=[32, 64, 128])
    parser.add_argument("--channels", type=int, nargs="+", default=[8, 16])
    parser.add_argument("--stride", type=int, default=1, choices=(1, 2))
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--output", default=None, help="optional CSV file")
    args = parser.parse_args()

    if not kernels.HAS_NUMBA:
        print("numba not importable; only the numpy path is meaningful here")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<12}{'size':>6}{'cin':>5}{'cout':>5}{'numpy_ms':>12}"
          f"{'numba_ms':>12}{'speedup':>10}")
    print("-" * 62)
    all_rows = []
    for size in args.sizes:
        for c in args.channels:
            for row in bench_case(size, c, c, args.stride, args.repeats, rng):
                name, sz, cin, cout, _, np_ms, jit_ms, speedup = row
                print(f"{name:<12}{sz:>6}{cin:>5}{cout:>5}{np_ms:>12.3f}"
                      f"{jit_ms:>12.3f}{speedup:>10.2f}x")
                all_rows.append(row)

    geo = np.exp(np.mean(np.log([r[-1] for r in all_rows])))
    print(f"\ngeometric-mean numba speedup over numpy: {geo:.2f}x "
          f"(values < 1 mean the numpy path wins at that size)")

    if args.output:
        with open(args.output, "w") as fh:
            fh.write("kernel,size,cin,cout,stride,numpy_ms,numba_ms,speedup\n")
            for r in all_rows:
                fh.write(",".join(str(v) for v in r) + "\n")
        print(f"wrote {args.output}")


if __name__ == "__main__":
    main()
