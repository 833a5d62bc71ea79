"""Camera and point states, the scale-free reprojection error, robust losses.

The reprojection error used throughout is the component of the undistorted
observation ray ``p = (u, d1 + d2|u|^2 + d3|u|^4)`` orthogonal to the
camera-frame point direction ``R^T (l - t)``.  Every function in this module
is vectorized over leading batch axes: a ``CameraState`` may hold a single
camera or a stack of them, in which case the matching point and pixel arrays
broadcast against it.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateGeometry, PointBehindCamera

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-8
_SMALL_ANGLE = 1e-8


# ---------------------------------------------------------------------------
# SO(3) helpers


def hat(w):
    """Skew-symmetric matrix of ``w`` so that ``hat(w) @ v == cross(w, v)``."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def so3_exp(w):
    """Rodrigues formula, with a Taylor fallback for angles below 1e-8."""
    w = np.asarray(w, dtype=float)
    theta2 = np.sum(w * w, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    K = hat(w)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def so3_log(R):
    """Axis-angle vector of a rotation matrix (angle in [0, pi])."""
    R = np.asarray(R, dtype=float)
    flat = R.reshape(-1, 3, 3)
    out = Rotation.from_matrix(flat).as_rotvec()
    return out.reshape(R.shape[:-2] + (3,))


def is_rotation(R, tol=1e-9):
    R = np.asarray(R, dtype=float)
    ortho = np.linalg.norm(np.swapaxes(R, -1, -2) @ R - np.eye(3), axis=(-2, -1))
    det = np.linalg.det(R)
    return bool(np.all(ortho <= tol) and np.all(np.abs(det - 1.0) <= tol))


# ---------------------------------------------------------------------------
# Robust losses


@dataclass(frozen=True)
class LossFunction:
    """Robust loss applied to the squared residual norm ``s = |e|^2``.

    ``scale`` is the Huber threshold ``delta`` in units of ``|e|``; the knot
    sits at ``s = delta**2``.  It is ignored by the trivial loss.
    """

    kind: str = "trivial"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("trivial", "huber"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not self.scale > 0:
            raise ValueError("loss scale must be positive")

    def evaluate(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "trivial":
            return s.copy(), np.ones_like(s)
        delta = float(self.scale)
        knot = delta * delta
        root = np.sqrt(np.maximum(s, knot))
        inside = s <= knot
        value = np.where(inside, s, 2.0 * delta * root - knot)
        deriv = np.where(inside, 1.0, delta / root)
        return value, deriv


def robust_loss(loss, s):
    """Return ``(rho(s), rho'(s))``; negative ``s`` is rejected."""
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr < 0):
        raise ValueError("robust loss is only defined for s >= 0")
    value, deriv = loss.evaluate(s_arr)
    if value.ndim == 0:
        return float(value), float(deriv)
    return value, deriv


# ---------------------------------------------------------------------------
# States


@dataclass(frozen=True)
class CameraState:
    """Camera-to-world rotation, camera center and intrinsics ``(f, f*k1, f*k2)``.

    Fields may carry leading batch axes.
    """

    rotation: np.ndarray
    center: np.ndarray
    intrinsics: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "intrinsics", np.asarray(self.intrinsics, dtype=float))
        if not np.all(np.isfinite(self.intrinsics)):
            raise ValueError("camera intrinsics must be finite")
        if np.any(self.intrinsics[..., 0] <= 0):
            warnings.warn("camera focal length d1 <= 0 is not physically valid", stacklevel=3)


@dataclass(frozen=True)
class PointState:
    position: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        if not np.all(np.isfinite(self.position)):
            raise ValueError("point position must be finite")


@dataclass(frozen=True)
class Observation:
    camera_id: int
    point_id: int
    pixel: tuple


@dataclass
class State:
    """All cameras and points of a problem, or of one device, as stacked arrays."""

    rotations: np.ndarray  # (M, 3, 3)
    centers: np.ndarray  # (M, 3)
    intrinsics: np.ndarray  # (M, 3)
    points: np.ndarray  # (N, 3)

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=float).reshape(-1, 3, 3)
        self.centers = np.asarray(self.centers, dtype=float).reshape(-1, 3)
        self.intrinsics = np.asarray(self.intrinsics, dtype=float).reshape(-1, 3)
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        m = len(self.rotations)
        if len(self.centers) != m or len(self.intrinsics) != m:
            raise ValueError("camera arrays disagree in length")

    @property
    def num_cameras(self):
        return len(self.rotations)

    @property
    def num_points(self):
        return len(self.points)

    @classmethod
    def from_items(cls, cameras, points):
        cameras = list(cameras)
        points = list(points)
        return cls(
            rotations=np.array([c.rotation for c in cameras]).reshape(-1, 3, 3),
            centers=np.array([c.center for c in cameras]).reshape(-1, 3),
            intrinsics=np.array([c.intrinsics for c in cameras]).reshape(-1, 3),
            points=np.array([p.position for p in points]).reshape(-1, 3),
        )

    def copy(self):
        return State(self.rotations.copy(), self.centers.copy(), self.intrinsics.copy(), self.points.copy())

    def camera(self, index):
        """Camera(s) at ``index``; an index array gives a batched ``CameraState``."""
        return CameraState(self.rotations[index], self.centers[index], self.intrinsics[index])

    def point(self, index):
        return PointState(self.points[index])

    def take(self, camera_index, point_index):
        return State(
            self.rotations[camera_index],
            self.centers[camera_index],
            self.intrinsics[camera_index],
            self.points[point_index],
        )

    def distance_squared(self, other):
        """Stacked-Euclidean squared distance; rotations compared in Frobenius norm."""
        return float(
            np.sum((self.rotations - other.rotations) ** 2)
            + np.sum((self.centers - other.centers) ** 2)
            + np.sum((self.intrinsics - other.intrinsics) ** 2)
            + np.sum((self.points - other.points) ** 2)
        )

    def flat(self):
        return np.concatenate(
            [self.rotations.ravel(), self.centers.ravel(), self.intrinsics.ravel(), self.points.ravel()]
        )

    def equals(self, other):
        return (
            np.array_equal(self.rotations, other.rotations)
            and np.array_equal(self.centers, other.centers)
            and np.array_equal(self.intrinsics, other.intrinsics)
            and np.array_equal(self.points, other.points)
        )


@dataclass
class ProblemInstance:
    """Observations ``(camera, point, pixel)`` plus an initial state and a loss.

    Pixels follow the centered convention in which a point in front of the
    camera has a positive optimal scale.
    """

    camera_ids: np.ndarray
    point_ids: np.ndarray
    pixels: np.ndarray
    initial: State
    loss: LossFunction = LossFunction()

    def __post_init__(self):
        self.camera_ids = np.asarray(self.camera_ids, dtype=np.int64).reshape(-1)
        self.point_ids = np.asarray(self.point_ids, dtype=np.int64).reshape(-1)
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        n_obs = len(self.camera_ids)
        if len(self.point_ids) != n_obs or len(self.pixels) != n_obs:
            raise ValueError("observation arrays disagree in length")
        m, n = self.initial.num_cameras, self.initial.num_points
        if n_obs:
            if self.camera_ids.min() < 0 or self.camera_ids.max() >= m:
                raise ValueError("observation references a camera out of range")
            if self.point_ids.min() < 0 or self.point_ids.max() >= n:
                raise ValueError("observation references a point out of range")
            keys = self.camera_ids * max(n, 1) + self.point_ids
            if len(np.unique(keys)) != n_obs:
                raise ValueError("duplicate (camera, point) observation")
        unseen_cams = m - len(np.unique(self.camera_ids))
        unseen_pts = n - len(np.unique(self.point_ids))
        if unseen_cams or unseen_pts:
            warnings.warn(
                f"{unseen_cams} camera(s) and {unseen_pts} point(s) have no observation", stacklevel=2
            )

    @property
    def num_cameras(self):
        return self.initial.num_cameras

    @property
    def num_points(self):
        return self.initial.num_points

    @property
    def num_observations(self):
        return len(self.camera_ids)

    @property
    def cameras(self):
        return [self.initial.camera(i) for i in range(self.num_cameras)]

    @property
    def points(self):
        return [self.initial.point(j) for j in range(self.num_points)]

    @property
    def observations(self):
        return [
            Observation(int(i), int(j), (float(u[0]), float(u[1])))
            for i, j, u in zip(self.camera_ids, self.point_ids, self.pixels)
        ]

    def degenerate_pairs(self, state=None, eps=DEFAULT_EPS):
        """Indices of observations violating ``|l_j - t_i| > eps``."""
        state = self.initial if state is None else state
        y = state.points[self.point_ids] - state.centers[self.camera_ids]
        return np.flatnonzero(np.sum(y * y, axis=-1) <= eps * eps)


# ---------------------------------------------------------------------------
# Reprojection error


def undistorted_ray(intrinsics, pixel):
    """``(u_x, u_y, d1 + d2 |u|^2 + d3 |u|^4)``."""
    d = np.asarray(intrinsics, dtype=float)
    u = np.asarray(pixel, dtype=float)
    s = np.sum(u * u, axis=-1)
    z = d[..., 0] + d[..., 1] * s + d[..., 2] * s * s
    shape = np.broadcast_shapes(u.shape[:-1], z.shape)
    return np.concatenate([np.broadcast_to(u, shape + (2,)), np.broadcast_to(z, shape)[..., None]], axis=-1)


def ray_intrinsics_jacobian(pixel):
    """Derivative of the undistorted ray with respect to the intrinsics."""
    u = np.asarray(pixel, dtype=float)
    s = np.sum(u * u, axis=-1)
    J = np.zeros(u.shape[:-1] + (3, 3))
    J[..., 2, 0] = 1.0
    J[..., 2, 1] = s
    J[..., 2, 2] = s * s
    return J


def _separation(center, point, eps):
    y = np.asarray(point, dtype=float) - np.asarray(center, dtype=float)
    yy = np.sum(y * y, axis=-1)
    bad = yy <= eps * eps
    if np.any(bad):
        idx = np.flatnonzero(np.atleast_1d(bad))[0]
        raise DegenerateGeometry(
            f"camera center and point closer than eps={eps:g} (pair {idx})", observation=int(idx)
        )
    return y, yy


def optimal_scale(rotation, center, point, ray, eps=DEFAULT_EPS):
    """Scale minimizing ``|p - lam R^T (l - t)|^2``."""
    y, yy = _separation(center, point, eps)
    q = np.einsum("...ij,...j->...i", rotation, ray)
    lam = np.sum(y * q, axis=-1) / yy
    return float(lam) if np.ndim(lam) == 0 else lam


def error_terms(camera, point, pixel, eps=DEFAULT_EPS):
    """Intermediates ``(p, y, |y|^2, lam, e)`` with ``y = l - t``."""
    p = undistorted_ray(camera.intrinsics, pixel)
    y, yy = _separation(camera.center, point, eps)
    R = camera.rotation
    v = np.einsum("...ji,...j->...i", R, y)  # R^T y
    lam = np.einsum("...i,...i->...", v, p) / yy
    e = p - lam[..., None] * v
    return p, y, yy, lam, e


def reprojection_error(camera, point, pixel, eps=DEFAULT_EPS):
    """Camera-frame 3-vector error: ``(I - v v^T / |v|^2) p`` with ``v = R^T (l - t)``."""
    return error_terms(camera, point, pixel, eps)[-1]


def penalty(camera, point, pixel, loss, eps=DEFAULT_EPS):
    e = reprojection_error(camera, point, pixel, eps)
    value, _ = loss.evaluate(np.sum(e * e, axis=-1))
    out = 0.5 * value
    return float(out) if np.ndim(out) == 0 else out


def _pair_cameras(problem, state, mask=None):
    ci, pj = problem.camera_ids, problem.point_ids
    if mask is not None:
        ci, pj = ci[mask], pj[mask]
    return state.camera(ci), state.points[pj], ci, pj


def _valid_mask(problem, state, strict, eps):
    bad = problem.degenerate_pairs(state, eps)
    if len(bad) == 0:
        return None
    if strict:
        raise DegenerateGeometry(
            f"observation {bad[0]} (camera {problem.camera_ids[bad[0]]}, point "
            f"{problem.point_ids[bad[0]]}) violates the separation condition",
            observation=int(bad[0]),
        )
    logger.warning("dropping %d degenerate observation(s)", len(bad))
    mask = np.ones(problem.num_observations, dtype=bool)
    mask[bad] = False
    return mask


def total_objective(problem, state, *, strict=True, eps=DEFAULT_EPS):
    """Sum of robust penalties over all observations."""
    if problem.num_observations == 0:
        return 0.0
    mask = _valid_mask(problem, state, strict, eps)
    cams, pts, _, _ = _pair_cameras(problem, state, mask)
    pix = problem.pixels if mask is None else problem.pixels[mask]
    return float(np.sum(penalty(cams, pts, pix, problem.loss, eps)))


def error_norms(problem, state, eps=DEFAULT_EPS):
    """``|e_ij|`` for every observation (the error minimized by the solver)."""
    cams, pts, _, _ = _pair_cameras(problem, state)
    e = reprojection_error(cams, pts, problem.pixels, eps)
    return np.linalg.norm(e, axis=-1)


def pixel_residuals(problem, state):
    """Per-observation pixel residual norms under the conventional projection model.

    The camera-frame point ``X = R^T (l - t)`` is divided by depth and passed
    through the forward radial model ``f (1 + k1 r^2 + k2 r^4)`` with
    ``k1 = d2 * f`` and ``k2 = d3 * f**3`` (normalized-coordinate coefficients).
    Returns ``(residuals, behind)`` where ``behind`` flags points with ``X_z <= 0``.
    """
    if problem.num_observations == 0:
        return np.zeros(0), np.zeros(0, dtype=bool)
    R = state.rotations[problem.camera_ids]
    t = state.centers[problem.camera_ids]
    d = state.intrinsics[problem.camera_ids]
    X = np.einsum("nji,nj->ni", R, state.points[problem.point_ids] - t)
    behind = X[:, 2] <= 0
    z = np.where(behind & (X[:, 2] == 0), np.finfo(float).tiny, X[:, 2])
    xy = X[:, :2] / z[:, None]
    r2 = np.sum(xy * xy, axis=-1)
    f = d[:, 0]
    k1 = d[:, 1] * f
    k2 = d[:, 2] * f**3
    pred = (f * (1.0 + k1 * r2 + k2 * r2 * r2))[:, None] * xy
    return np.linalg.norm(pred - problem.pixels, axis=-1), behind


def mean_pixel_reprojection_error(problem, state, *, lenient=False):
    """Mean pixel residual; points behind the camera are counted and dropped only if lenient."""
    res, behind = pixel_residuals(problem, state)
    if len(res) == 0:
        return 0.0
    n_behind = int(np.count_nonzero(behind))
    if n_behind:
        warnings.warn(f"{n_behind} observation(s) project from behind the camera", PointBehindCamera, stacklevel=2)
        if lenient:
            res = res[~behind]
            if len(res) == 0:
                return 0.0
    return float(np.mean(res))


# ---------------------------------------------------------------------------
# Gradients


@dataclass
class Gradient:
    """Euclidean or Riemannian gradient blocks; fields may be batched."""

    rotation: np.ndarray
    center: np.ndarray
    intrinsics: np.ndarray
    point: np.ndarray

    def norm(self):
        return float(
            np.sqrt(
                np.sum(self.rotation**2)
                + np.sum(self.center**2)
                + np.sum(self.intrinsics**2)
                + np.sum(self.point**2)
            )
        )

    def flat(self):
        return np.concatenate(
            [np.ravel(self.rotation), np.ravel(self.center), np.ravel(self.intrinsics), np.ravel(self.point)]
        )


def euclidean_gradient_penalty(camera, point, pixel, loss, eps=DEFAULT_EPS):
    """Ambient-space gradient of ``1/2 rho(|e|^2)`` w.r.t. ``R, t, d, l``."""
    p, y, yy, lam, e = error_terms(camera, point, pixel, eps)
    R = camera.rotation
    _, w = loss.evaluate(np.sum(e * e, axis=-1))
    n = y[..., :, None] * y[..., None, :] / yy[..., None, None]
    outer = e[..., :, None] * p[..., None, :] + p[..., :, None] * e[..., None, :]
    grad_R = -w[..., None, None] * (n @ R @ outer)
    Re = np.einsum("...ij,...j->...i", R, e)
    grad_t = (w * lam)[..., None] * Re
    # e is linear in p through the normal-plane projector, which fixes e itself
    Jd = ray_intrinsics_jacobian(pixel)
    grad_d = w[..., None] * np.einsum("...ji,...j->...i", Jd, e)
    grad_d = np.broadcast_to(grad_d, grad_t.shape).copy()
    return Gradient(grad_R, grad_t, grad_d, -grad_t)


def riemannian_project(rotation, gradient):
    """Project a Euclidean gradient onto the tangent space at ``rotation``.

    Only the rotation block changes: ``G/2 - R G^T R / 2``.
    """
    R = np.asarray(rotation, dtype=float)
    G = np.asarray(gradient.rotation, dtype=float)
    rot = 0.5 * G - 0.5 * (R @ np.swapaxes(G, -1, -2) @ R)
    return Gradient(rot, gradient.center, gradient.intrinsics, gradient.point)


def objective_gradient(problem, state, eps=DEFAULT_EPS):
    """Euclidean gradient of the total objective, accumulated per variable."""
    g = Gradient(
        np.zeros_like(state.rotations),
        np.zeros_like(state.centers),
        np.zeros_like(state.intrinsics),
        np.zeros_like(state.points),
    )
    if problem.num_observations == 0:
        return g
    cams, pts, ci, pj = _pair_cameras(problem, state)
    pg = euclidean_gradient_penalty(cams, pts, problem.pixels, problem.loss, eps)
    np.add.at(g.rotation, ci, pg.rotation)
    np.add.at(g.center, ci, pg.center)
    np.add.at(g.intrinsics, ci, pg.intrinsics)
    np.add.at(g.point, pj, pg.point)
    return g


def criticality_norm(problem, state, eps=DEFAULT_EPS):
    """Norm of the stacked Riemannian gradient of the objective."""
    g = objective_gradient(problem, state, eps)
    return riemannian_project(state.rotations, g).norm()
