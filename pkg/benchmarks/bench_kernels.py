"""Time the compiled and NumPy kernel backends on representative workloads.

    python benchmarks/bench_kernels.py [--repeat 5]

Both backends run in one process: the compiled loops are called directly, so
the ``TOPO_NAV_NUMBA`` flag does not matter here.  Results from the two paths
are compared before timing.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from topo_nav import kernels


def _workloads(rng: np.random.Generator) -> dict[str, tuple]:
    segs = rng.uniform(-60.0, 60.0, size=(80, 4))
    poses = np.column_stack([rng.uniform(-20, 20, (64, 2)), rng.uniform(-np.pi, np.pi, 64)])
    points = rng.uniform(-100.0, 100.0, size=(2000, 2))
    n, k, g = 512, 3, 401
    phi = rng.dirichlet(np.ones(k), size=n)
    mu = rng.uniform(-0.2, 0.2, size=(n, k))
    sigma = rng.uniform(0.01, 0.1, size=(n, k))
    grid = np.linspace(-0.3, 0.3, g)
    weights = np.full(g, grid[1] - grid[0])
    return {
        "render_segments 64x64x64": (kernels._render_compiled, kernels._render_numpy, (segs, poses, 64, 0.5, 1.0)),
        "point_segment_distance 2000x80": (kernels._point_segment_compiled, kernels._point_segment_numpy, (points, segs)),
        "mixture_grid_integral 512x401": (kernels._mixture_grid_compiled, kernels._mixture_grid_numpy,
                                          (phi, mu, sigma, grid, weights)),
    }


def _agree(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_agree(x, y) for x, y in zip(a, b))
    if a.dtype == np.uint8:
        return np.mean(a != b) < 1e-3
    return np.allclose(a, b, rtol=1e-9, atol=1e-12)


def main(argv: list[str] | None = None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    if kernels._render_compiled is None:
        raise SystemExit("numba is not installed")
    print(f"{'kernel':34s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, (fast, ref, call) in _workloads(np.random.default_rng(0)).items():
        if not _agree(fast(*call), ref(*call)):  # also absorbs JIT compile time
            raise SystemExit(f"{name}: backends disagree")
        t_fast = min(timeit.repeat(lambda: fast(*call), number=1, repeat=args.repeat)) * 1e3
        t_ref = min(timeit.repeat(lambda: ref(*call), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:34s} {t_fast:10.2f} {t_ref:10.2f} {t_ref / t_fast:7.1f}x")


if __name__ == "__main__":
    main()
