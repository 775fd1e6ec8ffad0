"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Shapes match the miniature network on 64x64 inputs with batch 8 and the
decomposition of one 64x64 image. Prints one line per kernel with the best
time of each backend and the speed-up.
"""
import argparse
import sys
import timeit

import numpy as np

from tssg import _kernels_py as py

try:
    from tssg import _ckernels as cy
except ImportError:
    cy = None


def cases():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((8, 16, 32, 32)).astype(np.float32)
    cols = py.im2col3x3(x)
    big = rng.standard_normal((8, 8, 64, 64)).astype(np.float32)
    pooled, idx = py.maxpool2x2(big)
    grad = rng.standard_normal(big.shape).astype(np.float32)
    lines = rng.random((64, 64))
    stack = rng.random((1, 64, 64))
    return [
        ("im2col3x3 8x16x32x32", lambda k: k.im2col3x3(x)),
        ("col2im3x3 8x16x32x32", lambda k: k.col2im3x3(cols, 32, 32)),
        ("maxpool2x2 8x8x64x64", lambda k: k.maxpool2x2(big)),
        ("unpool2x2 8x8x64x64", lambda k: k.unpool2x2(pooled, idx, 64, 64)),
        ("unpool2x2_gather", lambda k: k.unpool2x2_gather(grad, idx)),
        ("interval_gradient 64 lines r=3", lambda k: k.interval_gradient_lines(lines, 3)),
        ("rescale_lines 64 lines r=3", lambda k: k.rescale_lines(stack, 3, 1e-4)),
    ]


def best(fn, repeat):
    number = 1
    while timeit.timeit(fn, number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if cy is None:
        print("compiled kernels not built; timing the numpy fallback only", file=sys.stderr)
    print(f"{'kernel':34s} {'numpy':>10s} {'cython':>10s} {'speed-up':>9s}")
    for name, call in cases():
        t_py = best(lambda: call(py), args.repeat)
        if cy is None:
            print(f"{name:34s} {t_py * 1e3:8.3f}ms {'-':>10s} {'-':>9s}")
            continue
        t_cy = best(lambda: call(cy), args.repeat)
        print(f"{name:34s} {t_py * 1e3:8.3f}ms {t_cy * 1e3:8.3f}ms {t_py / t_cy:8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
