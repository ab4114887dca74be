import numpy as np
import pytest

from scenefuse import protocol
from scenefuse.se3 import Pose, Twist, exp, relative


def random_pose(rng: np.random.Generator, max_angle: float = 3.0, span: float = 2.0) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return exp(Twist(rng.uniform(-span, span, 3), angle * axis))


def random_twist(rng: np.random.Generator, max_angle: float = 3.0, span: float = 2.0) -> Twist:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Twist(rng.uniform(-span, span, 3), rng.uniform(0.0, max_angle) * axis)


def world_2x2(seed=5):
    """Fixed world poses for two sensors watching two targets."""
    rng = np.random.default_rng(seed)
    sensors = {"s1": random_pose(rng), "s2": random_pose(rng)}
    targets = {"p1": random_pose(rng, span=0.5), "p2": random_pose(rng, span=0.5)}
    return sensors, targets


def consistent_records(t_us, sensors, targets, block=()):
    """Noise-free measurement records; pairs in `block` get status=false."""
    recs = []
    for s, a in sensors.items():
        for j, p in targets.items():
            recs.append(
                protocol.measurement(s, j, t_us, relative(a, p), (s, j) not in block)
            )
    return recs


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)
