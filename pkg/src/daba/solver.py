"""Levenberg-Marquardt on one device's surrogate.

Cameras move in a 9-dimensional tangent space (left-multiplied rotation
increment, center, intrinsics) and points in R^3.  The normal equations have
block-diagonal camera and point parts coupled only through intra-device
observations, so points are eliminated with a Schur complement and the
reduced camera system is factorized densely.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse

from .errors import DegenerateGeometry, LinearSolveFailure
from .geometry import State, hat, ray_intrinsics_jacobian, so3_exp, undistorted_ray
from .surrogate import evaluate_surrogate

logger = logging.getLogger(__name__)

CAMERA_DOF = 9
POINT_DOF = 3
_GENERATORS = hat(np.eye(3))  # hat(e_k) for k = 0, 1, 2


@dataclass(frozen=True)
class LMConfig:
    initial_damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 1.0 / 3.0
    max_inner_iterations: int = 5
    min_successful_steps: int = 1
    gradient_tolerance: float = 1e-10
    step_tolerance: float = 1e-12
    damping_mode: str = "levenberg"
    max_damping: float = 1e16

    def __post_init__(self):
        for name in ("initial_damping", "damping_up", "damping_down", "gradient_tolerance", "step_tolerance"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_inner_iterations < 1 or self.min_successful_steps < 1:
            raise ValueError("iteration counts must be at least 1")
        if self.damping_mode not in ("levenberg", "marquardt"):
            raise ValueError(f"unknown damping mode {self.damping_mode!r}")


@dataclass
class SubproblemResult:
    new_state: State
    initial_value: float
    final_value: float
    successful_steps: int
    converged: bool
    damping: float
    attempts: int = 0


def retract(state, camera_step, point_step):
    """Move ``state`` along a tangent step.

    ``camera_step`` has rows ``(omega, dt, dd)``; rotations become
    ``exp(hat(omega)) R``, everything else is updated additively.
    """
    camera_step = np.asarray(camera_step, dtype=float).reshape(-1, CAMERA_DOF)
    point_step = np.asarray(point_step, dtype=float).reshape(-1, POINT_DOF)
    if not (np.all(np.isfinite(camera_step)) and np.all(np.isfinite(point_step))):
        raise ValueError("tangent step must be finite")
    return State(
        so3_exp(camera_step[:, 0:3]) @ state.rotations,
        state.centers + camera_step[:, 3:6],
        state.intrinsics + camera_step[:, 6:9],
        state.points + point_step,
    )


@dataclass
class NormalEquations:
    """Gauss-Newton blocks ``J^T J`` and ``J^T r`` of one surrogate."""

    camera_blocks: np.ndarray  # (C, 9, 9)
    point_blocks: np.ndarray  # (P, 3, 3)
    coupling: np.ndarray  # (K, 9, 3), one block per intra pair
    coupling_cam: np.ndarray
    coupling_pt: np.ndarray
    camera_gradient: np.ndarray  # (C, 9)
    point_gradient: np.ndarray  # (P, 3)

    def gradient_norm(self):
        return float(np.sqrt(np.sum(self.camera_gradient**2) + np.sum(self.point_gradient**2)))

    def dense(self):
        """Full matrix and gradient, cameras first (for small fixtures)."""
        C, P = len(self.camera_blocks), len(self.point_blocks)
        n = CAMERA_DOF * C + POINT_DOF * P
        H = np.zeros((n, n))
        for i in range(C):
            s = slice(CAMERA_DOF * i, CAMERA_DOF * (i + 1))
            H[s, s] = self.camera_blocks[i]
        off = CAMERA_DOF * C
        for j in range(P):
            s = slice(off + POINT_DOF * j, off + POINT_DOF * (j + 1))
            H[s, s] = self.point_blocks[j]
        for W, i, j in zip(self.coupling, self.coupling_cam, self.coupling_pt):
            rs = slice(CAMERA_DOF * i, CAMERA_DOF * (i + 1))
            cs = slice(off + POINT_DOF * j, off + POINT_DOF * (j + 1))
            H[rs, cs] += W
            H[cs, rs] += W.T
        g = np.concatenate([self.camera_gradient.ravel(), self.point_gradient.ravel()])
        return H, g


def _intra_jacobians(R, t, d, l, u, loss):
    """IRLS-weighted residual ``sqrt(w) (q - lam y)`` and its camera/point Jacobians."""
    p = undistorted_ray(d, u)
    q = np.einsum("kij,kj->ki", R, p)
    y = l - t
    yy = np.sum(y * y, axis=-1)
    lam = np.sum(y * q, axis=-1) / yy
    h = q - lam[:, None] * y
    _, w = loss.evaluate(np.sum(h * h, axis=-1))
    sw = np.sqrt(w)

    eye = np.eye(3)
    proj = eye - y[:, :, None] * y[:, None, :] / yy[:, None, None]
    J_omega = -proj @ hat(q)
    J_d = proj @ R @ ray_intrinsics_jacobian(u)
    J_y = -lam[:, None, None] * eye - y[:, :, None] * (q - 2.0 * lam[:, None] * y)[:, None, :] / yy[:, None, None]
    Jc = np.concatenate([J_omega, -J_y, J_d], axis=2) * sw[:, None, None]
    Jp = J_y * sw[:, None, None]
    return sw[:, None] * h, Jc, Jp


def _p_jacobians(R, t, d, u, coeff):
    p = undistorted_ray(d, u)
    q = np.einsum("kij,kj->ki", R, p)
    s2w = np.sqrt(2.0 * coeff.w)
    r = s2w[:, None] * (q + coeff.lam[:, None] * t - coeff.g)
    J_t = coeff.lam[:, None, None] * np.eye(3)
    Jc = np.concatenate([-hat(q), J_t, R @ ray_intrinsics_jacobian(u)], axis=2) * s2w[:, None, None]
    return r, Jc


def linearize_surrogate(spec, x):
    """Normal-equation blocks of the surrogate at ``x`` (owned variables, local order)."""
    loc = spec.local
    C, P = x.num_cameras, x.num_points
    B = np.zeros((C, CAMERA_DOF, CAMERA_DOF))
    Cp = np.zeros((P, POINT_DOF, POINT_DOF))
    gc = np.zeros((C, CAMERA_DOF))
    gp = np.zeros((P, POINT_DOF))

    K = len(loc.intra_obs)
    if K:
        ic, ip = loc.intra_cam, loc.intra_pt
        t, l = x.centers[ic], x.points[ip]
        y = l - t
        if np.any(np.sum(y * y, axis=-1) <= spec.eps**2):
            raise DegenerateGeometry("intra pair violates the separation condition")
        r, Jc, Jp = _intra_jacobians(x.rotations[ic], t, x.intrinsics[ic], l, loc.intra_pixels, spec.loss)
        np.add.at(B, ic, np.einsum("kai,kaj->kij", Jc, Jc))
        np.add.at(Cp, ip, np.einsum("kai,kaj->kij", Jp, Jp))
        np.add.at(gc, ic, np.einsum("kai,ka->ki", Jc, r))
        np.add.at(gp, ip, np.einsum("kai,ka->ki", Jp, r))
        W = np.einsum("kai,kaj->kij", Jc, Jp)
    else:
        W = np.zeros((0, CAMERA_DOF, POINT_DOF))

    if len(loc.cs_obs):
        cc = loc.cs_cam
        r, Jc = _p_jacobians(x.rotations[cc], x.centers[cc], x.intrinsics[cc], loc.cs_pixels, spec.cs_coeff)
        np.add.at(B, cc, np.einsum("kai,kaj->kij", Jc, Jc))
        np.add.at(gc, cc, np.einsum("kai,ka->ki", Jc, r))

    if len(loc.ps_obs):
        pp = loc.ps_pt
        coeff = spec.ps_coeff
        two_w = 2.0 * coeff.w
        r = coeff.lam[:, None] * x.points[pp] - coeff.g
        np.add.at(Cp, pp, (two_w * coeff.lam**2)[:, None, None] * np.eye(3))
        np.add.at(gp, pp, (two_w * coeff.lam)[:, None] * r)

    xi = spec.xi
    if xi > 0:
        dR = x.rotations - spec.anchor.rotations
        basis = np.einsum("kab,cbd->ckad", _GENERATORS, x.rotations)  # hat(e_k) R
        gc[:, 0:3] += xi * np.einsum("ckad,cad->ck", basis, dR)
        gc[:, 3:6] += xi * (x.centers - spec.anchor.centers)
        gc[:, 6:9] += xi * (x.intrinsics - spec.anchor.intrinsics)
        gp += xi * (x.points - spec.anchor.points)
        B[:, 0:3, 0:3] += 2.0 * xi * np.eye(3)
        B[:, 3:9, 3:9] += xi * np.eye(6)
        Cp += xi * np.eye(3)

    return NormalEquations(B, Cp, W, loc.intra_cam, loc.intra_pt, gc, gp)


def _diag(blocks):
    return np.einsum("kii->ki", blocks)


def solve_normal_equations(ne, damping, mode="levenberg"):
    """Damped step ``(camera_step, point_step)`` via the Schur complement.

    Columns are scaled by ``1 / (1 + sqrt(diag))`` before damping is added.
    Raises ``numpy.linalg.LinAlgError`` if a factorization fails.
    """
    C, P = len(ne.camera_blocks), len(ne.point_blocks)
    sc = 1.0 / (1.0 + np.sqrt(np.maximum(_diag(ne.camera_blocks), 0.0)))
    sp = 1.0 / (1.0 + np.sqrt(np.maximum(_diag(ne.point_blocks), 0.0)))
    B = ne.camera_blocks * sc[:, :, None] * sc[:, None, :]
    Cb = ne.point_blocks * sp[:, :, None] * sp[:, None, :]
    gc = ne.camera_gradient * sc
    gp = ne.point_gradient * sp
    ic, ip = ne.coupling_cam, ne.coupling_pt
    W = ne.coupling * sc[ic][:, :, None] * sp[ip][:, None, :]

    if mode == "levenberg":
        B = B + damping * np.eye(CAMERA_DOF)
        Cb = Cb + damping * np.eye(POINT_DOF)
    else:
        B = B + damping * (np.maximum(_diag(B), 1e-12)[:, :, None] * np.eye(CAMERA_DOF))
        Cb = Cb + damping * (np.maximum(_diag(Cb), 1e-12)[:, :, None] * np.eye(POINT_DOF))

    np.linalg.cholesky(Cb)  # positive definiteness of every point block
    C_inv = np.linalg.inv(Cb)
    n_c = CAMERA_DOF * C

    if len(W):
        Y = W @ C_inv[ip]  # (K, 9, 3)
        rows = (CAMERA_DOF * ic)[:, None, None] + np.arange(CAMERA_DOF)[None, :, None]
        cols = (POINT_DOF * ip)[:, None, None] + np.arange(POINT_DOF)[None, None, :]
        rows, cols = np.broadcast_arrays(rows, cols)
        shape = (n_c, POINT_DOF * P)
        Ysp = scipy.sparse.csr_matrix((Y.ravel(), (rows.ravel(), cols.ravel())), shape=shape)
        Wsp = scipy.sparse.csr_matrix((W.ravel(), (rows.ravel(), cols.ravel())), shape=shape)
        reduced = -(Ysp @ Wsp.T).toarray()
        rhs = -gc.ravel() + Ysp @ gp.ravel()
    else:
        reduced = np.zeros((n_c, n_c))
        rhs = -gc.ravel()
    for i in range(C):
        s = slice(CAMERA_DOF * i, CAMERA_DOF * (i + 1))
        reduced[s, s] += B[i]

    if n_c:
        factor = scipy.linalg.cho_factor(reduced, lower=True, check_finite=True)
        dc = scipy.linalg.cho_solve(factor, rhs).reshape(C, CAMERA_DOF)
    else:
        dc = np.zeros((0, CAMERA_DOF))
    rhs_p = -gp.copy()
    if len(W):
        np.add.at(rhs_p, ip, -np.einsum("kij,ki->kj", W, dc[ic]))
    dp = np.einsum("pij,pj->pi", C_inv, rhs_p)
    return dc * sc, dp * sp


def solve_subproblem(spec, x_start, config=LMConfig(), damping=None):
    """Approximately minimize the surrogate from ``x_start`` with damped Gauss-Newton steps.

    Stops after ``min_successful_steps`` accepted steps, ``max_inner_iterations``
    trials, or when the gradient or step falls below tolerance.  A step is
    accepted only if it strictly lowers the surrogate value.
    """
    mu = config.initial_damping if damping is None else float(damping)
    x = x_start
    value = evaluate_surrogate(spec, x)
    initial = value
    successes = 0
    attempts = 0
    converged = False
    factor_failures = 0
    ne = linearize_surrogate(spec, x)
    while attempts < config.max_inner_iterations:
        if ne.gradient_norm() <= config.gradient_tolerance:
            converged = True
            break
        attempts += 1
        try:
            dc, dp = solve_normal_equations(ne, mu, config.damping_mode)
        except (np.linalg.LinAlgError, ValueError):
            factor_failures += 1
            mu = min(mu * config.damping_up, config.max_damping)
            continue
        step_norm = float(np.sqrt(np.sum(dc**2) + np.sum(dp**2)))
        scale = float(np.sqrt(np.sum(x.flat() ** 2)))
        if step_norm <= config.step_tolerance * (scale + config.step_tolerance):
            converged = True
            break
        trial = retract(x, dc, dp)
        try:
            trial_value = evaluate_surrogate(spec, trial)
        except DegenerateGeometry:
            trial_value = np.inf
        if trial_value < value:
            x, value = trial, trial_value
            successes += 1
            mu = max(mu * config.damping_down, 1e-15)
            if successes >= config.min_successful_steps:
                break
            ne = linearize_surrogate(spec, x)
        else:
            mu = min(mu * config.damping_up, config.max_damping)
    if successes == 0 and attempts > 0 and factor_failures == attempts:
        raise LinearSolveFailure(f"reduced system not factorizable after {attempts} damping escalations")
    return SubproblemResult(x, initial, value, successes, converged, mu, attempts)
