"""Per-device majorizing surrogates of the bundle-adjustment objective.

A crossing observation ``(i, j)`` is split into a camera-only term
``P(c_i) = w |R p + lam t - g|^2 + a/2`` and a point-only term
``Q(l_j) = w |lam l - g|^2 + a/2`` whose coefficients are frozen at an anchor.
Their sum bounds the pair penalty from above and touches it at the anchor, so
each device can minimize its own piece without talking to anyone.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MissingNeighborState
from .geometry import (
    DEFAULT_EPS,
    CameraState,
    Gradient,
    State,
    error_terms,
    euclidean_gradient_penalty,
    penalty,
    ray_intrinsics_jacobian,
    undistorted_ray,
)

DEFAULT_XI = 1e-4


@dataclass(frozen=True)
class PairCoefficients:
    """Anchor-frozen offset ``a``, weight ``w``, scale ``lam`` and midpoint ``g``."""

    a: np.ndarray
    w: np.ndarray
    lam: np.ndarray
    g: np.ndarray

    @classmethod
    def empty(cls):
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros((0, 3)))

    def take(self, index):
        return PairCoefficients(self.a[index], self.w[index], self.lam[index], self.g[index])


def compute_pair_coefficients(camera, point, pixel, loss, eps=DEFAULT_EPS):
    p, y, yy, lam, e = error_terms(camera, point, pixel, eps)
    s = np.sum(e * e, axis=-1)
    rho, w = loss.evaluate(s)
    a = 0.5 * rho - 0.5 * w * s
    q = np.einsum("...ij,...j->...i", camera.rotation, p)
    t = np.asarray(camera.center, dtype=float)
    l = np.asarray(point, dtype=float)
    g = 0.5 * q + 0.5 * lam[..., None] * (t + l)
    return PairCoefficients(a, w, lam, g)


def p_term(coeff, camera, pixel):
    """Camera-side majorizer ``w |R p + lam t - g|^2 + a/2``."""
    p = undistorted_ray(camera.intrinsics, pixel)
    q = np.einsum("...ij,...j->...i", camera.rotation, p)
    r = q + coeff.lam[..., None] * camera.center - coeff.g
    out = coeff.w * np.sum(r * r, axis=-1) + 0.5 * coeff.a
    return float(out) if np.ndim(out) == 0 else out


def q_term(coeff, point):
    """Point-side majorizer ``w |lam l - g|^2 + a/2``."""
    r = coeff.lam[..., None] * np.asarray(point, dtype=float) - coeff.g
    out = coeff.w * np.sum(r * r, axis=-1) + 0.5 * coeff.a
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Snapshots of exchanged variables


@dataclass(frozen=True)
class Snapshot:
    """Values of a subset of variables keyed by global id (ids ascending)."""

    camera_ids: np.ndarray
    point_ids: np.ndarray
    values: State

    @classmethod
    def from_state(cls, state, camera_ids=None, point_ids=None):
        cams = np.arange(state.num_cameras) if camera_ids is None else np.asarray(camera_ids, dtype=np.int64)
        pts = np.arange(state.num_points) if point_ids is None else np.asarray(point_ids, dtype=np.int64)
        order_c, order_p = np.argsort(cams, kind="stable"), np.argsort(pts, kind="stable")
        cams, pts = cams[order_c], pts[order_p]
        return cls(cams, pts, state.take(cams, pts))

    @classmethod
    def from_local(cls, camera_ids, point_ids, local_state):
        """Wrap a state whose rows already follow the given ascending ids."""
        return cls(
            np.asarray(camera_ids, dtype=np.int64), np.asarray(point_ids, dtype=np.int64), local_state
        )

    @staticmethod
    def _locate(ids, wanted, kind):
        wanted = np.asarray(wanted, dtype=np.int64)
        pos = np.searchsorted(ids, wanted)
        pos_c = np.minimum(pos, max(len(ids) - 1, 0))
        ok = (pos < len(ids)) & (ids[pos_c] == wanted) if len(ids) else np.zeros(wanted.shape, bool)
        if not np.all(ok):
            missing = wanted[~ok][0]
            raise MissingNeighborState(f"{kind} {int(missing)} is not in the snapshot")
        return pos_c

    def camera_rows(self, ids):
        return self._locate(self.camera_ids, ids, "camera")

    def point_rows(self, ids):
        return self._locate(self.point_ids, ids, "point")

    def cameras(self, ids):
        rows = self.camera_rows(ids)
        return CameraState(self.values.rotations[rows], self.values.centers[rows], self.values.intrinsics[rows])

    def points(self, ids):
        return self.values.points[self.point_rows(ids)]

    def restrict(self, camera_ids, point_ids):
        rc, rp = self.camera_rows(camera_ids), self.point_rows(point_ids)
        return self.values.take(rc, rp)

    def merge(self, other):
        cams = np.concatenate([self.camera_ids, other.camera_ids])
        pts = np.concatenate([self.point_ids, other.point_ids])
        values = State(
            np.concatenate([self.values.rotations, other.values.rotations]),
            np.concatenate([self.values.centers, other.values.centers]),
            np.concatenate([self.values.intrinsics, other.values.intrinsics]),
            np.concatenate([self.values.points, other.values.points]),
        )
        if len(np.unique(cams)) != len(cams) or len(np.unique(pts)) != len(pts):
            raise ValueError("snapshots overlap")
        oc, op = np.argsort(cams, kind="stable"), np.argsort(pts, kind="stable")
        return Snapshot(cams[oc], pts[op], values.take(oc, op))


# ---------------------------------------------------------------------------
# Device-local view of the observations


@dataclass(frozen=True)
class LocalObservations:
    """The observations one device needs, with owned variables in local indexing."""

    device: int
    camera_ids: np.ndarray  # owned, ascending
    point_ids: np.ndarray
    intra_cam: np.ndarray  # local indices
    intra_pt: np.ndarray
    intra_pixels: np.ndarray
    intra_obs: np.ndarray
    cs_cam: np.ndarray  # local camera index
    cs_point: np.ndarray  # foreign global point id
    cs_pixels: np.ndarray
    cs_obs: np.ndarray
    ps_pt: np.ndarray  # local point index
    ps_camera: np.ndarray  # foreign global camera id
    ps_pixels: np.ndarray
    ps_obs: np.ndarray

    @property
    def num_cameras(self):
        return len(self.camera_ids)

    @property
    def num_points(self):
        return len(self.point_ids)


def local_observations(problem, partition, device):
    sets = partition.devices[device]
    cams, pts = sets.cameras, sets.points
    ci, pj, px = problem.camera_ids, problem.point_ids, problem.pixels

    def local(ids, global_ids):
        return np.searchsorted(ids, global_ids).astype(np.int64)

    return LocalObservations(
        device=device,
        camera_ids=cams,
        point_ids=pts,
        intra_cam=local(cams, ci[sets.intra]),
        intra_pt=local(pts, pj[sets.intra]),
        intra_pixels=px[sets.intra],
        intra_obs=sets.intra,
        cs_cam=local(cams, ci[sets.camera_side]),
        cs_point=pj[sets.camera_side],
        cs_pixels=px[sets.camera_side],
        cs_obs=sets.camera_side,
        ps_pt=local(pts, pj[sets.point_side]),
        ps_camera=ci[sets.point_side],
        ps_pixels=px[sets.point_side],
        ps_obs=sets.point_side,
    )


# ---------------------------------------------------------------------------
# Surrogate assembly and evaluation


@dataclass(frozen=True)
class SurrogateSpec:
    """One device's surrogate objective anchored at a snapshot."""

    local: LocalObservations
    cs_coeff: PairCoefficients
    ps_coeff: PairCoefficients
    anchor: State  # owned variables at the anchor, local order
    xi: float
    loss: object
    eps: float = DEFAULT_EPS

    @property
    def device_id(self):
        return self.local.device

    @property
    def intra_pairs(self):
        return self.local.intra_obs

    @property
    def camera_side_pairs(self):
        return self.local.cs_obs

    @property
    def point_side_pairs(self):
        return self.local.ps_obs


def build_surrogate_local(local, snapshot, loss, xi=DEFAULT_XI, eps=DEFAULT_EPS):
    """Freeze coefficients for ``local``'s crossing pairs at ``snapshot``."""
    if not xi >= 0:
        raise ValueError("proximal weight must be nonnegative")
    anchor = snapshot.restrict(local.camera_ids, local.point_ids)
    if len(local.cs_obs):
        cs = compute_pair_coefficients(
            anchor.camera(local.cs_cam), snapshot.points(local.cs_point), local.cs_pixels, loss, eps
        )
    else:
        cs = PairCoefficients.empty()
    if len(local.ps_obs):
        ps = compute_pair_coefficients(
            snapshot.cameras(local.ps_camera), anchor.points[local.ps_pt], local.ps_pixels, loss, eps
        )
    else:
        ps = PairCoefficients.empty()
    return SurrogateSpec(local, cs, ps, anchor, float(xi), loss, eps)


def build_surrogate(problem, partition, snapshot, device, xi=DEFAULT_XI, eps=DEFAULT_EPS):
    """Surrogate of ``device`` at ``snapshot`` (a ``Snapshot`` or a full ``State``)."""
    if isinstance(snapshot, State):
        snapshot = Snapshot.from_state(snapshot)
    local = local_observations(problem, partition, device)
    return build_surrogate_local(local, snapshot, problem.loss, xi, eps)


def surrogate_terms(spec, x):
    """Intra, camera-side, point-side and proximal parts of the surrogate at ``x``."""
    loc = spec.local
    intra = 0.0
    if len(loc.intra_obs):
        intra = float(np.sum(penalty(x.camera(loc.intra_cam), x.points[loc.intra_pt], loc.intra_pixels, spec.loss, spec.eps)))
    p_sum = float(np.sum(p_term(spec.cs_coeff, x.camera(loc.cs_cam), loc.cs_pixels))) if len(loc.cs_obs) else 0.0
    q_sum = float(np.sum(q_term(spec.ps_coeff, x.points[loc.ps_pt]))) if len(loc.ps_obs) else 0.0
    prox = 0.5 * spec.xi * x.distance_squared(spec.anchor)
    return intra, p_sum, q_sum, prox


def evaluate_surrogate(spec, x):
    """Surrogate value at the owned-variable state ``x`` (local order)."""
    intra, p_sum, q_sum, prox = surrogate_terms(spec, x)
    return intra + p_sum + q_sum + prox


def _slack(f, p, q):
    # each pair's slack is nonpositive; clipping removes rounding noise near the anchor
    return float(np.sum(np.minimum(f - p - q, 0.0)))


def delta_e(spec, snapshot):
    """Surrogate gap of ``spec``'s device at the owned and neighbor values in ``snapshot``.

    ``-xi/2 |x - anchor|^2 + 1/2 sum (F - P - Q)`` over the device's crossing
    pairs; never positive.
    """
    loc = spec.local
    x = snapshot.restrict(loc.camera_ids, loc.point_ids)
    gap = -0.5 * spec.xi * x.distance_squared(spec.anchor)
    if len(loc.cs_obs):
        cam = x.camera(loc.cs_cam)
        pt = snapshot.points(loc.cs_point)
        f = penalty(cam, pt, loc.cs_pixels, spec.loss, spec.eps)
        gap += 0.5 * _slack(f, p_term(spec.cs_coeff, cam, loc.cs_pixels), q_term(spec.cs_coeff, pt))
    if len(loc.ps_obs):
        cam = snapshot.cameras(loc.ps_camera)
        pt = x.points[loc.ps_pt]
        f = penalty(cam, pt, loc.ps_pixels, spec.loss, spec.eps)
        gap += 0.5 * _slack(f, p_term(spec.ps_coeff, cam, loc.ps_pixels), q_term(spec.ps_coeff, pt))
    return gap


def delta_E(problem, partition, device, x, anchor_snapshot, xi=DEFAULT_XI, eps=DEFAULT_EPS):
    """Surrogate gap from scratch: build the anchored surrogate, evaluate at ``x``."""
    if isinstance(x, State):
        x = Snapshot.from_state(x)
    spec = build_surrogate(problem, partition, anchor_snapshot, device, xi, eps)
    return delta_e(spec, x)


def p_term_gradient(coeff, camera, pixel):
    """Euclidean gradient of the camera-side term w.r.t. ``(R, t, d)``."""
    p = undistorted_ray(camera.intrinsics, pixel)
    R = camera.rotation
    q = np.einsum("...ij,...j->...i", R, p)
    r = q + coeff.lam[..., None] * camera.center - coeff.g
    two_w = 2.0 * coeff.w
    grad_R = two_w[..., None, None] * r[..., :, None] * p[..., None, :]
    grad_t = (two_w * coeff.lam)[..., None] * r
    Rt_r = np.einsum("...ji,...j->...i", R, r)
    Jd = ray_intrinsics_jacobian(pixel)
    grad_d = two_w[..., None] * np.einsum("...ji,...j->...i", Jd, Rt_r)
    return grad_R, grad_t, grad_d


def q_term_gradient(coeff, point):
    r = coeff.lam[..., None] * np.asarray(point, dtype=float) - coeff.g
    return (2.0 * coeff.w * coeff.lam)[..., None] * r


def surrogate_gradient(spec, x):
    """Euclidean gradient of the surrogate w.r.t. the owned variables (local order)."""
    loc = spec.local
    g = Gradient(
        spec.xi * (x.rotations - spec.anchor.rotations),
        spec.xi * (x.centers - spec.anchor.centers),
        spec.xi * (x.intrinsics - spec.anchor.intrinsics),
        spec.xi * (x.points - spec.anchor.points),
    )
    if len(loc.intra_obs):
        pg = euclidean_gradient_penalty(
            x.camera(loc.intra_cam), x.points[loc.intra_pt], loc.intra_pixels, spec.loss, spec.eps
        )
        np.add.at(g.rotation, loc.intra_cam, pg.rotation)
        np.add.at(g.center, loc.intra_cam, pg.center)
        np.add.at(g.intrinsics, loc.intra_cam, pg.intrinsics)
        np.add.at(g.point, loc.intra_pt, pg.point)
    if len(loc.cs_obs):
        gR, gt, gd = p_term_gradient(spec.cs_coeff, x.camera(loc.cs_cam), loc.cs_pixels)
        np.add.at(g.rotation, loc.cs_cam, gR)
        np.add.at(g.center, loc.cs_cam, gt)
        np.add.at(g.intrinsics, loc.cs_cam, gd)
    if len(loc.ps_obs):
        np.add.at(g.point, loc.ps_pt, q_term_gradient(spec.ps_coeff, x.points[loc.ps_pt]))
    return g
