"""Time the compiled kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat N]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from vlsfusion import _pykernels
from vlsfusion.geometry import quat_canonical

try:
    from vlsfusion import _ckernels
except ImportError:
    _ckernels = None


def workloads(rng: np.random.Generator) -> dict[str, tuple]:
    """Argument tuples sized like one localization request or one fusion tick."""
    D = 64
    query = rng.normal(size=(400, D)).astype(np.float32)
    db = rng.normal(size=(1500, D)).astype(np.float32)
    labels = rng.integers(0, 900, 1500).astype(np.int64)
    R = np.eye(3)
    t = np.zeros(3)
    pts = rng.uniform(-10, 10, (800, 3)) + [0, 0, 30]
    pix = rng.uniform(0, 640, (800, 2))
    cam = (400.0, 400.0, 320.0, 240.0)
    n = 100
    tq = rng.normal(size=(40, 3)), quat_canonical(rng.normal(size=(40, 4)))
    p = rng.normal(size=(n, 3))
    q = quat_canonical(rng.normal(size=(n, 4)))
    dp = rng.normal(size=(n - 1, 3))
    dq = quat_canonical(rng.normal(size=(n - 1, 4)))
    idx = np.arange(0, n, 5, dtype=np.int64)
    vp = rng.normal(size=(len(idx), 3))
    vq = quat_canonical(rng.normal(size=(len(idx), 4)))
    return {
        "ratio_match 400x1500x64": (query, db, labels),
        "reprojection_errors 800": (R, t, pts, pix, *cam),
        "reprojection_jacobian 800": (R, t, pts, pix, *cam),
        "pose_distance_matrix 40": (*tq, 1.0),
        "pgo_linearize 100 nodes": (p, q, dp, dq, idx, vp, vq, 1.0, 10.0, False, False),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<30}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, call_args in workloads(rng).items():
        fn = name.split()[0]
        py = getattr(_pykernels, fn)
        t_py = min(timeit.repeat(lambda: py(*call_args), number=1, repeat=args.repeat)) * 1e3
        if _ckernels is None:
            print(f"{name:<30}{t_py:12.3f}{'n/a':>12}{'':>10}")
            continue
        cy = getattr(_ckernels, fn)
        t_cy = min(timeit.repeat(lambda: cy(*call_args), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<30}{t_py:12.3f}{t_cy:12.3f}{t_py / t_cy:9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
