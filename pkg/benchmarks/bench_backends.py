"""Time the numba kernels against their numpy twins on training-sized inputs.

    python benchmarks/bench_backends.py [--points 65536] [--repeat 5]

Prints one row per kernel: best-of-N wall time for each backend, the speed-up
and the max abs difference between the two outputs.
"""
import argparse
import time

import numpy as np

from tiface import kernels


def _best(fn, repeat):
    fn()  # warm-up (JIT compile / cache load)
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases(n, rng):
    res, rank, q = 64, 16, 64
    line = rng.normal(size=(rank, res))
    plane = rng.normal(size=(rank, res, res))
    grid = rng.normal(size=(res, res, res, 8))
    sgrid = np.ascontiguousarray(grid[..., 0])
    ua, ub, uc = (rng.uniform(0, res - 1, n) for _ in range(3))
    pts = rng.uniform(0, res - 1, (n, 3))
    g_r = rng.normal(size=(n, rank))
    g_c = rng.normal(size=(n, 8))
    g_3 = rng.normal(size=(n, 3))
    alpha = rng.uniform(0, 0.2, (n // q, q))
    e = rng.normal(size=alpha.shape)

    return {
        "linear_gather": lambda k: k["linear_gather"](line, ua),
        "linear_scatter": lambda k: _into(k["linear_scatter"], line.shape, g_r, ua),
        "bilinear_gather": lambda k: k["bilinear_gather"](plane, ub, uc),
        "bilinear_scatter": lambda k: _into(k["bilinear_scatter"], plane.shape, g_r, ub, uc),
        "vm_mode_gather": lambda k: k["vm_mode_gather"](line, plane, ua, ub, uc),
        "vm_mode_scatter": lambda k: _scatter_pair(k, line, plane, ua, ub, uc, g_r),
        "trilinear_gather": lambda k: k["trilinear_gather"](grid, pts),
        "trilinear_scatter": lambda k: _into(k["trilinear_scatter"], grid.shape, g_c, pts),
        "trilinear_grad": lambda k: k["trilinear_grad"](sgrid, pts),
        "trilinear_grad_scatter": lambda k: _into(k["trilinear_grad_scatter"], sgrid.shape, g_3, pts),
        "composite_forward": lambda k: k["composite_forward"](alpha),
        "composite_backward": lambda k: k["composite_backward"](alpha, k["composite_forward"](alpha)[1], e),
    }


def _into(kernel, shape, *args):
    buf = np.zeros(shape)
    kernel(*args, buf)
    return buf


def _scatter_pair(k, line, plane, ua, ub, uc, g):
    gl, gp = np.zeros_like(line), np.zeros_like(plane)
    k["vm_mode_scatter"](line, plane, ua, ub, uc, g, gl, gp)
    return gl, gp


def _outputs(fn, k):
    out = fn(k)
    if out is None:
        return []
    return [np.asarray(o) for o in (out if isinstance(out, tuple) else (out,))]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=1 << 16)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not kernels.NUMBA_KERNELS:
        print("numba is not installed; only the numpy backend is available")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'numpy ms':>10}{'numba ms':>10}{'speed-up':>10}{'max |diff|':>13}")
    for name, fn in cases(args.points, rng).items():
        t_np = _best(lambda: fn(kernels.NUMPY_KERNELS), args.repeat)
        t_nb = _best(lambda: fn(kernels.NUMBA_KERNELS), args.repeat)
        a, b = _outputs(fn, kernels.NUMPY_KERNELS), _outputs(fn, kernels.NUMBA_KERNELS)
        diff = max((float(np.max(np.abs(x - y))) for x, y in zip(a, b)), default=float("nan"))
        print(f"{name:<24}{1e3 * t_np:>10.2f}{1e3 * t_nb:>10.2f}{t_np / t_nb:>9.1f}x{diff:>13.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
