"""Time the compiled z-buffer kernel against the numpy fallback.

    python3 benchmarks/bench_splat.py [--points N] [--size S] [--repeat R]
"""

import argparse
import timeit

import numpy as np

from pcqa import _splat_py
from pcqa.projection import disc_offsets

try:
    from pcqa import _splat as _splat_c
except ImportError:  # extension not built
    _splat_c = None


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--points", type=int, default=4000)
    ap.add_argument("--size", type=int, default=256)
    ap.add_argument("--radius", type=int, default=4)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    px = rng.integers(0, args.size, args.points).astype(np.int64)
    py = rng.integers(0, args.size, args.points).astype(np.int64)
    z = rng.uniform(0, 1, args.points)
    off = disc_offsets(args.radius)
    call = (px, py, z, off, args.size, args.size)

    backends = {"numpy": _splat_py.splat_zbuffer}
    if _splat_c is not None:
        backends["cython"] = _splat_c.splat_zbuffer
        w_c, z_c = _splat_c.splat_zbuffer(*call)
        w_p, z_p = _splat_py.splat_zbuffer(*call)
        assert np.array_equal(w_c, w_p) and np.array_equal(z_c, z_p), "backends disagree"

    times = {}
    for name, fn in backends.items():
        t = min(timeit.repeat(lambda: fn(*call), number=1, repeat=args.repeat))
        times[name] = t
        print(f"{name:7s} {t * 1e3:8.2f} ms  ({args.points} points, {args.size}px, radius {args.radius})")
    if len(times) == 2:
        print(f"speedup {times['numpy'] / times['cython']:.1f}x")


if __name__ == "__main__":
    main()
