"""Loosely coupled fusion of drifting odometry with a map-based localization service."""

from .geometry import Pose, Trajectory
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "Pose", "Trajectory", "__version__"]
