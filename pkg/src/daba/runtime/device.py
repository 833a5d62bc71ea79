"""One device's side of an outer iteration.

A device owns a set of cameras and points, keeps its own momentum schedule
and restart metrics, and sees the rest of the problem only through the
messages its neighbors send.  An iteration is split in two halves around
the exchange barrier: ``begin`` extrapolates and emits messages, ``finish``
consumes the inbox, rebuilds both surrogates, solves and runs the restart
test.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..acceleration import (
    NesterovState,
    advance_schedule,
    extrapolate,
    init_restart,
    rebound,
    should_restart,
    update_restart_metrics,
)
from ..errors import DegenerateGeometry, LinearSolveFailure, ProtocolViolation
from ..geometry import DEFAULT_EPS
from ..solver import LMConfig, solve_subproblem
from ..surrogate import Snapshot, build_surrogate_local, delta_e, evaluate_surrogate
from .messages import CAMERA_FLOATS, POINT_FLOATS, decode, encode, make_message, pack_cameras, pack_points, unpack

COEFFICIENT_FLOATS = 6  # a, w, lam and g of one crossing pair
PIXEL_FLOATS = 2


@dataclass(frozen=True)
class DeviceConfig:
    xi: float = 1e-4
    eta: float = 0.1
    accelerate: bool = True
    lm: LMConfig = LMConfig()
    eps: float = DEFAULT_EPS


@dataclass
class DeviceStep:
    """What a device reports after an iteration (all local quantities)."""

    device: int
    F: float
    Fbar: float
    E: float
    restarted: bool
    degraded: bool
    step_sq: float
    extrapolation_sq: float


class Device:
    def __init__(self, local, sets, initial, loss, config=DeviceConfig()):
        self.local = local
        self.sets = sets
        self.loss = loss
        self.config = config
        self.x = initial.copy()
        self.x_prev = self.x
        self.x_bar = self.x
        self.nesterov = NesterovState()
        self.restart = None
        self.spec_prev = None
        self.damping = config.lm.initial_damping
        self.iteration = 0
        self._rows_c = {b: np.searchsorted(local.camera_ids, ids) for b, ids in sets.send_cameras.items()}
        self._rows_p = {b: np.searchsorted(local.point_ids, ids) for b, ids in sets.send_points.items()}

    @property
    def device(self):
        return self.local.device

    def begin(self, iteration):
        """Advance the schedule, extrapolate and encode one message per neighbor."""
        if iteration != self.iteration:
            raise ProtocolViolation(f"device {self.device} expected iteration {self.iteration}, got {iteration}")
        if self.config.accelerate:
            self.nesterov = advance_schedule(self.nesterov)
            self.x_bar = extrapolate(self.x, self.x_prev, self.nesterov.gamma)
        else:
            self.x_bar = self.x
        out = []
        for beta in self.sets.neighbors:
            rc, rp = self._rows_c[beta], self._rows_p[beta]
            msg = make_message(
                self.device,
                beta,
                iteration,
                self.sets.send_cameras[beta],
                pack_cameras(self.x, self.x_bar, rc),
                self.sets.send_points[beta],
                pack_points(self.x, self.x_bar, rp),
            )
            out.append((beta, encode(msg)))
        return out

    def _read_inbox(self, iteration, inbox):
        seen = set()
        foreign, foreign_bar = [], []
        for data in inbox:
            msg = decode(data)
            beta = msg.sender
            if msg.receiver != self.device or msg.iteration != iteration:
                raise ProtocolViolation(
                    f"device {self.device} got a message for device {msg.receiver}, iteration {msg.iteration}"
                )
            if beta not in self.sets.neighbors or beta in seen:
                raise ProtocolViolation(f"unexpected message from device {beta}")
            seen.add(beta)
            if not (
                np.array_equal(msg.camera_ids, self.sets.recv_cameras[beta])
                and np.array_equal(msg.point_ids, self.sets.recv_points[beta])
            ):
                raise ProtocolViolation(f"device {beta} sent variables device {self.device} does not expect")
            x, x_bar = unpack(msg.camera_values, msg.point_values)
            foreign.append(Snapshot.from_local(msg.camera_ids, msg.point_ids, x))
            foreign_bar.append(Snapshot.from_local(msg.camera_ids, msg.point_ids, x_bar))
        if seen != set(self.sets.neighbors):
            raise ProtocolViolation(f"device {self.device} is missing messages from {sorted(set(self.sets.neighbors) - seen)}")
        return foreign, foreign_bar

    def _snapshot(self, owned, foreign):
        snap = Snapshot.from_local(self.local.camera_ids, self.local.point_ids, owned)
        for other in foreign:
            snap = snap.merge(other)
        return snap

    def _solve(self, spec, start):
        try:
            result = solve_subproblem(spec, start, self.config.lm, damping=self.damping)
        except LinearSolveFailure:
            return None
        self.damping = result.damping
        return result.new_state

    def finish(self, iteration, inbox):
        foreign, foreign_bar = self._read_inbox(iteration, inbox)
        snap = self._snapshot(self.x, foreign)
        cfg = self.config
        spec = build_surrogate_local(self.local, snap, self.loss, cfg.xi, cfg.eps)
        if self.restart is None:
            self.restart = init_restart(spec, self.x, cfg.eta)
            self.spec_prev = spec
        E_before = self.restart.E_alpha
        gap = delta_e(self.spec_prev, snap)
        value_current = evaluate_surrogate(spec, self.x)

        degraded = False
        x_new = None
        momentum = cfg.accelerate and self.nesterov.gamma > 0
        if momentum:
            try:
                spec_bar = build_surrogate_local(self.local, self._snapshot(self.x_bar, foreign_bar), self.loss, cfg.xi, cfg.eps)
                x_new = self._solve(spec_bar, self.x_bar)
                degraded = x_new is None
                value_new = evaluate_surrogate(spec, x_new) if x_new is not None else np.inf
            except DegenerateGeometry:
                x_new, value_new = None, np.inf
        else:
            # without momentum the extrapolated surrogate coincides with the plain one
            x_new = self._solve(spec, self.x)
            degraded = x_new is None
            if x_new is None:
                x_new = self.x
            value_new = evaluate_surrogate(spec, x_new)

        metrics = update_restart_metrics(self.restart, gap, value_new, value_current)
        restarted = False
        if momentum and should_restart(metrics):
            restarted = True
            x_new = self._solve(spec, self.x)
            degraded = x_new is None
            if x_new is None:
                x_new = self.x
            metrics = rebound(metrics, evaluate_surrogate(spec, x_new), value_current)

        step = DeviceStep(
            device=self.device,
            F=metrics.F_alpha,
            Fbar=metrics.Fbar_alpha,
            E=E_before,
            restarted=restarted,
            degraded=degraded,
            step_sq=x_new.distance_squared(self.x),
            extrapolation_sq=x_new.distance_squared(self.x_bar),
        )
        self.restart = metrics
        self.spec_prev = spec
        self.x_prev = self.x
        self.x = x_new
        self.iteration += 1
        return step

    def memory_floats(self):
        """Resident floats: owned variables, received copies, observed pixels and frozen coefficients.

        Coefficients are held for the current and the previous anchor, the
        latter being needed for the surrogate gap.
        """
        owned = CAMERA_FLOATS * self.local.num_cameras + POINT_FLOATS * self.local.num_points
        copies = sum(CAMERA_FLOATS * len(v) for v in self.sets.recv_cameras.values())
        copies += sum(POINT_FLOATS * len(v) for v in self.sets.recv_points.values())
        crossing = len(self.local.cs_obs) + len(self.local.ps_obs)
        pixels = PIXEL_FLOATS * (len(self.local.intra_obs) + crossing)
        return int(owned + copies + pixels + 2 * COEFFICIENT_FLOATS * crossing)
