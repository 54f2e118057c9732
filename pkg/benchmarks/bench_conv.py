"""Benchmark the compiled convolution kernels against the NumPy reference.

Times the three grouped-causal-convolution entry points (forward, input
gradient, filter gradient) on a range of realistic shapes and reports the
per-call minimum over several repeats, together with the maximum
elementwise disagreement between the two backends.

Run from the repository root:

    python3 benchmarks/bench_conv.py            # full sweep
    python3 benchmarks/bench_conv.py --quick    # small shapes only
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from tpcnet.kernels import reference

try:
    from tpcnet.kernels import _convo as compiled
except ImportError:  # pragma: no cover - build without the extension
    compiled = None

# (batch, groups, in_channels, out_channels, time, kernel, dilation)
SHAPES = [
    ("small stay batch", 8, 20, 2, 4, 48, 3, 1),
    ("mid layer", 32, 20, 5, 8, 168, 4, 3),
    ("wide cohort", 32, 89, 13, 13, 168, 4, 5),
    ("deep dilation", 16, 89, 13, 13, 336, 4, 9),
    ("shared bank", 32, 89, 13, 13, 168, 4, 5),
]


def _time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_case(name, b, g, c, y, t, k, dilation, repeats, rng):
    shared = name == "shared bank"
    gf = 1 if shared else g
    x = rng.standard_normal((b, g, c, t))
    filters = rng.standard_normal((gf, y, c, k))
    grad_out = rng.standard_normal((b, g, y, t))

    calls = {
        "forward": lambda impl: impl.conv_forward(x, filters, dilation),
        "grad_input": lambda impl: impl.conv_backward_input(grad_out, filters, dilation),
        "grad_filters": lambda impl: impl.conv_backward_filters(grad_out, x, dilation, k, shared),
    }

    rows = []
    for op, call in calls.items():
        ref_out = call(reference)
        ref_s = _time(lambda: call(reference), repeats)
        if compiled is None:
            rows.append((name, op, ref_s, None, None, None))
            continue
        com_out = call(compiled)
        com_s = _time(lambda: call(compiled), repeats)
        diff = float(np.max(np.abs(ref_out - com_out)))
        rows.append((name, op, ref_s, com_s, ref_s / com_s, diff))
    return rows


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--quick", action="store_true", help="small shapes only")
    parser.add_argument("--repeats", type=int, default=5, help="timing repeats (min taken)")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    shapes = SHAPES[:2] if args.quick else SHAPES

    print(f"backends: reference=numpy, compiled={'yes' if compiled else 'MISSING'}")
    header = f"{'case':<16} {'op':<13} {'reference':>11} {'compiled':>11} {'speedup':>8} {'max|diff|':>10}"
    print(header)
    print("-" * len(header))
    for case in shapes:
        for name, op, ref_s, com_s, speedup, diff in bench_case(*case, args.repeats, rng):
            com_txt = f"{com_s * 1e3:9.2f}ms" if com_s is not None else "        --"
            spd_txt = f"{speedup:7.2f}x" if speedup is not None else "      --"
            diff_txt = f"{diff:10.2e}" if diff is not None else "        --"
            print(f"{name:<16} {op:<13} {ref_s * 1e3:9.2f}ms {com_txt} {spd_txt} {diff_txt}")


if __name__ == "__main__":
    main()
