import numpy as np
import pytest
from hypothesis import strategies as st

from vlsfusion.geometry import Pose


def random_pose(rng: np.random.Generator, scale: float = 10.0) -> Pose:
    return Pose(rng.normal(size=4), rng.normal(scale=scale, size=3))


finite = st.floats(-50.0, 50.0, allow_nan=False, allow_infinity=False)
quat_parts = st.lists(st.floats(-1.0, 1.0, allow_nan=False), min_size=4, max_size=4).filter(
    lambda v: np.linalg.norm(v) > 1e-3
)
poses = st.builds(lambda q, t: Pose(np.array(q), np.array(t)), quat_parts, st.lists(finite, min_size=3, max_size=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
