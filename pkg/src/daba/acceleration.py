"""Momentum schedule, extrapolation on the rotation manifold and the local restart test.

Every quantity here belongs to a single device.  The restart metrics are
updated from the device's own surrogate values and its surrogate gap, which
only needs neighbor variables, so no device ever sees the global objective.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import NearSingularProjection
from .geometry import State
from .surrogate import evaluate_surrogate

DEFAULT_ETA = 0.1
_AMBIGUITY_GAP = 1e-12


@dataclass(frozen=True)
class NesterovState:
    s: float = 1.0
    gamma: float = 0.0

    def __post_init__(self):
        if not self.s >= 1.0:
            raise ValueError("momentum schedule requires s >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("momentum ratio must lie in [0, 1)")


def advance_schedule(state):
    """Next schedule value and the momentum ratio ``(s - 1) / s_next``."""
    s_next = (math.sqrt(4.0 * state.s * state.s + 1.0) + 1.0) / 2.0
    return NesterovState(s_next, (state.s - 1.0) / s_next)


def proj_rot3d(M):
    """Nearest rotation in Frobenius norm; works on stacks of matrices.

    ``M = U S V^T`` maps to ``U diag(1, 1, det(U V^T)) V^T``.  When the sign
    fix is needed and the two smallest singular values tie, the nearest
    rotation is not unique; the smallest singular direction is flipped and a
    ``NearSingularProjection`` warning is issued.
    """
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise ValueError("cannot project a non-finite matrix")
    U, S, Vt = np.linalg.svd(M)
    det = np.linalg.det(U @ Vt)
    sign = np.where(det < 0, -1.0, 1.0)
    flip = sign < 0
    if np.any(flip & (np.abs(S[..., 1] - S[..., 2]) <= _AMBIGUITY_GAP * np.maximum(S[..., 0], 1.0))):
        warnings.warn("nearest rotation is not unique; flipping the smallest singular direction", NearSingularProjection, stacklevel=2)
    D = np.ones(S.shape)
    D[..., 2] = sign
    return (U * D[..., None, :]) @ Vt


def extrapolate(current, previous, gamma):
    """Momentum step ``x + gamma (x - x_prev)`` with rotations projected back onto SO(3)."""
    if gamma == 0.0:
        return current.copy()
    delta = current.rotations - previous.rotations
    rot = current.rotations.copy()
    # unmoved rotations are kept exactly; the SVD would perturb them by rounding
    moved = np.any(delta != 0.0, axis=(1, 2))
    if np.any(moved):
        rot[moved] = proj_rot3d(rot[moved] + gamma * delta[moved])
    return State(
        rot,
        current.centers + gamma * (current.centers - previous.centers),
        current.intrinsics + gamma * (current.intrinsics - previous.intrinsics),
        current.points + gamma * (current.points - previous.points),
    )


@dataclass(frozen=True)
class RestartState:
    """Local objective estimate ``F``, its running average ``Fbar`` and the bound ``E``."""

    F_alpha: float
    Fbar_alpha: float
    E_alpha: float
    eta: float = DEFAULT_ETA

    def __post_init__(self):
        if not 0.0 < self.eta <= 1.0:
            raise ValueError("eta must lie in (0, 1]")


def init_restart(spec, x0, eta=DEFAULT_ETA):
    """All three metrics start at the device's surrogate value at the initial anchor."""
    v = float(evaluate_surrogate(spec, x0))
    return RestartState(v, v, v, eta)


def update_restart_metrics(state, delta_e, value_new, value_current):
    """One recursion step.

    ``delta_e`` is the surrogate gap at the current iterate under the previous
    anchor; ``value_new`` and ``value_current`` are the surrogate, anchored at
    the current iterate, evaluated at the new and current owned variables.
    """
    F = state.E_alpha + delta_e
    Fbar = (1.0 - state.eta) * state.Fbar_alpha + state.eta * F
    E = value_new + F - value_current
    return RestartState(F, Fbar, E, state.eta)


def rebound(state, value_new, value_current):
    """Recompute ``E`` after a restart replaced the new iterate."""
    return replace(state, E_alpha=value_new + state.F_alpha - value_current)


def should_restart(state):
    return state.E_alpha > state.Fbar_alpha
