"""Shared builders for tests."""
import numpy as np
from scipy.spatial.transform import Rotation

from daba.geometry import CameraState, LossFunction, PointState, ProblemInstance, State


def random_rotation(rng, n=None):
    seed = int(rng.integers(2**31))
    return Rotation.random(n, random_state=seed).as_matrix()


def random_camera(rng, distortion=True):
    d = np.array([rng.uniform(0.5, 2.0), 0.0, 0.0])
    if distortion:
        d[1:] = rng.normal(scale=0.1, size=2)
    return CameraState(random_rotation(rng), rng.normal(size=3), d)


def random_pair(rng, distortion=True):
    """Camera, point and pixel with the point well away from the camera center."""
    cam = random_camera(rng, distortion)
    point = cam.center + rng.normal(size=3)
    while np.linalg.norm(point - cam.center) < 0.3:
        point = cam.center + rng.normal(size=3)
    pixel = rng.normal(scale=0.5, size=2)
    return cam, point, pixel


def make_problem(cameras, points, obs, loss=LossFunction()):
    """Problem from explicit lists; ``obs`` rows are ``(camera, point, u, v)``."""
    obs = np.asarray(obs, dtype=float).reshape(-1, 4)
    state = State.from_items(cameras, [PointState(p) for p in points])
    return ProblemInstance(obs[:, 0].astype(int), obs[:, 1].astype(int), obs[:, 2:], state, loss)
