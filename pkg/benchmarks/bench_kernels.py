"""Compiled vs numpy convolution kernels.

Times ``im2col`` / ``col2im`` from both backends on the image-tower shapes
of the default model, checks they agree, and then times one full
conv forward + backward through each backend.

    python benchmarks/bench_kernels.py [--repeat 20] [--batch 32]
"""

import argparse
import importlib
import os
import sys
import timeit

import numpy as np

from promptdoor.numerics import _conv_py

try:
    from promptdoor.numerics import _kernels
except ImportError:
    _kernels = None

# (channels in, spatial size) entering each conv layer of the default tower
LAYERS = ((3, 32), (16, 16), (32, 8))


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def kernel_table(batch, repeat, dtype):
    rng = np.random.default_rng(0)
    rows = []
    for c, n in LAYERS:
        x = rng.normal(size=(batch, c, n, n)).astype(dtype)
        cols = _conv_py.im2col(x, 3, 1, 1)
        py_i = bench(lambda: _conv_py.im2col(x, 3, 1, 1), repeat)
        py_c = bench(lambda: _conv_py.col2im(cols, x.shape, 3, 1, 1), repeat)
        if _kernels is None:
            rows.append((c, n, py_i, None, py_c, None))
            continue
        assert np.array_equal(_kernels.im2col(x, 3, 1, 1), cols)
        assert np.array_equal(_kernels.col2im(cols, x.shape, 3, 1, 1), _conv_py.col2im(cols, x.shape, 3, 1, 1))
        cy_i = bench(lambda: _kernels.im2col(x, 3, 1, 1), repeat)
        cy_c = bench(lambda: _kernels.col2im(cols, x.shape, 3, 1, 1), repeat)
        rows.append((c, n, py_i, cy_i, py_c, cy_c))
    return rows


def tower_step(batch, repeat, pure):
    """Forward + backward of the first conv layer of the default tower, on the chosen backend."""
    if pure:
        os.environ["PROMPTDOOR_PURE_PYTHON"] = "1"
    else:
        os.environ.pop("PROMPTDOOR_PURE_PYTHON", None)
    from promptdoor.numerics import _conv
    importlib.reload(_conv)  # conv2d looks the kernels up on this module at call time
    from promptdoor.numerics.tensor import Tensor, backward, conv2d, mean

    rng = np.random.default_rng(1)
    x = rng.uniform(size=(batch, 3, 32, 32)).astype(np.float32)
    w = Tensor(rng.normal(0, 0.1, (16, 3, 3, 3)).astype(np.float32), requires_grad=True)
    b = Tensor(np.zeros(16, np.float32), requires_grad=True)

    def step():
        out = conv2d(Tensor(x), w, b, stride=1, padding=1)
        backward(mean(out * out), [w, b])

    return _conv.BACKEND, bench(step, repeat)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=32)
    args = ap.parse_args(argv)
    print(f"compiled kernels: {'available' if _kernels is not None else 'not built'}; batch {args.batch}, best of {args.repeat}")
    for dtype in (np.float32, np.float64):
        print(f"\n{np.dtype(dtype).name}: milliseconds per call")
        print(f"{'layer':>10} {'im2col py':>10} {'im2col cy':>10} {'speedup':>8} {'col2im py':>10} {'col2im cy':>10} {'speedup':>8}")
        for c, n, pi, ci, pc, cc in kernel_table(args.batch, args.repeat, dtype):
            fmt = lambda v: f"{v:10.3f}" if v is not None else f"{'-':>10}"  # noqa: E731
            sp = lambda a, b: f"{a / b:7.2f}x" if b else f"{'-':>8}"  # noqa: E731
            print(f"{c:>4}x{n:<2}x{n:<2} {fmt(pi)} {fmt(ci)} {sp(pi, ci)} {fmt(pc)} {fmt(cc)} {sp(pc, cc)}")
    print("\nconv forward + backward, first tower layer (ms)")
    for pure in (True, False):
        backend, ms = tower_step(args.batch, args.repeat, pure)
        print(f"  {backend:>7}: {ms:8.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
