"""Time the compiled im2col/col2im kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from mtuda import kernels

# (batch, channels, height, width, kernel, stride, pad): layers of the default networks at 64x64
SHAPES = [
    (4, 3, 64, 64, 3, 2, 1),
    (4, 16, 32, 32, 3, 1, 1),
    (4, 32, 32, 32, 3, 2, 1),
    (4, 7, 64, 64, 3, 2, 1),
    (4, 64, 16, 16, 3, 2, 1),
]


def bench(impl, shape, repeat):
    n, c, h, w, k, s, p = shape
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, c, h, w))
    cols = impl.im2col(x, k, k, s, p)
    t_fwd = min(timeit.repeat(lambda: impl.im2col(x, k, k, s, p), number=1, repeat=repeat))
    t_bwd = min(timeit.repeat(lambda: impl.col2im(cols, x.shape, k, k, s, p), number=1, repeat=repeat))
    return t_fwd, t_bwd, cols


def main(argv=None):
    ap = argparse.ArgumentParser(description="im2col/col2im backend benchmark")
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the numpy fallback is available")
    print(f"{'shape':<28}" + "".join(f"{b + ' im2col':>16}{b + ' col2im':>16}" for b in backends) + f"{'speedup':>10}")
    for shape in SHAPES:
        row, outs, totals = f"{str(shape):<28}", [], []
        for impl in backends.values():
            f, b, cols = bench(impl, shape, args.repeat)
            row += f"{f * 1e3:>14.2f}ms{b * 1e3:>14.2f}ms"
            outs.append(cols)
            totals.append(f + b)
        if len(outs) == 2:
            assert np.array_equal(outs[0], outs[1]), "backends disagree"
            row += f"{totals[0] / totals[1]:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
