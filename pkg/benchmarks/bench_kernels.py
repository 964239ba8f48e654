"""Time the numba and numpy paths of the pixel kernels.

    python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from charanim import kernels
from charanim.pose import NUM_JOINTS, Pose, rasterize_pose


def _pose(size):
    rng = np.random.default_rng(0)
    kp = np.column_stack([rng.uniform(0, size - 1, (NUM_JOINTS, 2)), np.ones(NUM_JOINTS)])
    return Pose(kp, size, size)


def _cases():
    for size in (64, 256, 512):
        pose = _pose(size)
        r = max(1.0, 4.0 * size / 512)
        yield f"rasterize {size}x{size}", lambda nb, p=pose, s=size, r=r: rasterize_pose(p, s, s, r, r, use_numba=nb)
    rng = np.random.default_rng(1)
    for src, out in (((512, 512), (8, 8)), ((512, 512), (256, 256)), ((64, 64), (512, 512))):
        a = rng.integers(0, 2, src).astype(np.uint8)
        label = f"resample {src[0]}->{out[0]}"
        yield label, lambda nb, a=a, o=out: kernels.nearest_resample(a, *o, use_numba=nb)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args(argv)
    if not kernels.HAVE_NUMBA:
        print("numba disabled or missing; timing the numpy path only")
    print(f"{'kernel':<22}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  same")
    for label, fn in _cases():
        ref = fn(False)
        t_np = min(timeit.repeat(lambda: fn(False), number=1, repeat=args.repeat)) * 1e3
        if kernels.HAVE_NUMBA:
            same = np.array_equal(fn(True), ref)  # also triggers compilation before timing
            t_nb = min(timeit.repeat(lambda: fn(True), number=1, repeat=args.repeat)) * 1e3
            print(f"{label:<22}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>8.1f}x  {same}")
        else:
            print(f"{label:<22}{t_np:>10.3f}{'-':>10}{'-':>9}  -")


if __name__ == "__main__":
    main()
