"""Time the voxel-traversal kernels for every available backend.

    python3 benchmarks/bench_kernels.py [--rays 20000] [--repeat 3]
"""

import argparse
import time

import numpy as np

from radiomap import scenes
from radiomap.scene import fibonacci_sphere
from radiomap.kernels import implementations


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rays", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    grid = scenes.two_rooms_corridor()
    occ = grid.occ_u8
    rng = np.random.default_rng(0)
    free = np.array([[2.0, 1.5, 1.0], [5.0, 6.0, 1.5], [15.0, 8.0, 1.0]])
    starts = grid.to_grid(free[rng.integers(0, len(free), args.rays)])
    dirs = rng.normal(size=(args.rays, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    t_max = np.full(args.rays, float(max(grid.dims)) * 2)
    a = grid.to_grid(rng.uniform(grid.bounds_min, grid.bounds_max, (args.rays, 3)))
    b = grid.to_grid(rng.uniform(grid.bounds_min, grid.bounds_max, (args.rays, 3)))
    sphere = fibonacci_sphere(min(args.rays, 4096))
    src = np.ascontiguousarray(grid.to_grid(free[0]))
    max_len = 4.0 * float(np.linalg.norm(np.array(grid.dims)))

    cases = {
        "raycast_batch": lambda k: k.raycast_batch(occ, starts, dirs, t_max),
        "segments_blocked": lambda k: k.segments_blocked(occ, a, b),
        "trace_specular(3)": lambda k: k.trace_specular(occ, src, sphere, 3, max_len),
    }
    impls = implementations()
    print(f"grid {tuple(grid.dims)}, {args.rays} rays, best of {args.repeat}")
    print(f"{'kernel':<20}" + "".join(f"{name:>12}" for name in impls) + "     speedup")
    for label, call in cases.items():
        row = {name: best_of(lambda: call(mod), args.repeat) for name, mod in impls.items()}
        line = f"{label:<20}" + "".join(f"{row[n] * 1e3:>10.1f}ms" for n in impls)
        if "cython" in row:
            line += f"  {row['python'] / row['cython']:>8.1f}x"
        print(line)


if __name__ == "__main__":
    main()
