#!/usr/bin/env python3
"""Benchmark the compiled convolution kernels against the NumPy fallback.

Shapes mirror the layers the attack loop actually spends its time in.
Each cell reports the best-of-repeats wall time; both backends are checked
for agreement before timing.

Run: python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from tatk import kernels

# (tag, batch, c_in, h, w, c_out, k, stride)
CASES = [
    ("conv3x3_in3", 32, 3, 32, 32, 16, 3, 1),
    ("conv3x3_in16", 32, 16, 16, 16, 32, 3, 1),
    ("conv5x5_in8", 32, 8, 32, 32, 16, 5, 1),
    ("conv7x7_in3", 32, 3, 32, 32, 20, 7, 1),
    ("mean_filter", 96, 1, 32, 32, 1, 3, 1),
]


def best_time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_case(tag, b, ci, h, w, co, k, stride, repeats):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((b, ci, h, w))
    kern = rng.standard_normal((co, ci, k, k))
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    gout = rng.standard_normal((b, co, oh, ow))

    rows = []
    reference = None
    for name in kernels.available_backends():
        impl = kernels.get_backend(name)
        out = impl.conv2d_forward(x, kern, stride)
        gi = impl.conv2d_backward_input(gout, kern, stride, h, w)
        gk = impl.conv2d_backward_kernel(gout, x, stride, k, k)
        if reference is None:
            reference = (out, gi, gk)
        else:
            for got, want in zip((out, gi, gk), reference):
                err = np.abs(got - want).max() / max(np.abs(want).max(), 1.0)
                assert err < 1e-10, f"{tag}/{name}: backends disagree ({err:.2e})"
        rows.append((
            name,
            best_time(lambda: impl.conv2d_forward(x, kern, stride), repeats),
            best_time(lambda: impl.conv2d_backward_input(gout, kern, stride, h, w), repeats),
            best_time(lambda: impl.conv2d_backward_kernel(gout, x, stride, k, k), repeats),
        ))
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    names = kernels.available_backends()
    print(f"backends: {', '.join(names)} (active: {kernels.BACKEND})")
    print(f"{'case':<16}{'backend':<10}{'fwd ms':>10}{'bwd_in ms':>12}{'bwd_k ms':>12}{'total ms':>12}")
    for case in CASES:
        rows = run_case(*case, repeats=args.repeats)
        totals = {}
        for name, f, gi, gk in rows:
            totals[name] = f + gi + gk
            print(f"{case[0]:<16}{name:<10}{f * 1e3:>10.2f}{gi * 1e3:>12.2f}{gk * 1e3:>12.2f}{totals[name] * 1e3:>12.2f}")
        if len(totals) == 2:
            ratio = totals["python"] / totals["cython"]
            print(f"{'':<16}{'ratio':<10}{'':>10}{'':>12}{'':>12}{ratio:>11.2f}x")
    print("agreement checked to 1e-10 relative before timing")


if __name__ == "__main__":
    main()
