"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy twins
run. Set ``VLSFUSION_KERNELS=python`` to force the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("VLSFUSION_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        pass

ratio_match = _impl.ratio_match
reprojection_errors = _impl.reprojection_errors
reprojection_jacobian = _impl.reprojection_jacobian
pose_distance_matrix = _impl.pose_distance_matrix
pgo_linearize = _impl.pgo_linearize

__all__ = [
    "BACKEND",
    "ratio_match",
    "reprojection_errors",
    "reprojection_jacobian",
    "pose_distance_matrix",
    "pgo_linearize",
]
