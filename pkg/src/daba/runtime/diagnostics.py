"""Reporting layer: the only place that looks at all devices at once.

Nothing computed here feeds back into a device's decisions; it runs strictly
between supersteps and exists to produce metrics records.
"""
from __future__ import annotations

import math

import numpy as np

from ..geometry import State, criticality_norm, mean_pixel_reprojection_error, total_objective
from .trace import IterationReport


def assemble_state(problem, devices):
    """Global state stitched together from every device's owned variables."""
    state = State(
        np.empty((problem.num_cameras, 3, 3)),
        np.empty((problem.num_cameras, 3)),
        np.empty((problem.num_cameras, 3)),
        problem.initial.points.copy(),
    )
    for dev in devices:
        c, p = dev.local.camera_ids, dev.local.point_ids
        state.rotations[c] = dev.x.rotations
        state.centers[c] = dev.x.centers
        state.intrinsics[c] = dev.x.intrinsics
        state.points[p] = dev.x.points
    return state


def state_metrics(problem, state, with_criticality):
    objective = total_objective(problem, state)
    pixel = mean_pixel_reprojection_error(problem, state, lenient=True)
    crit = criticality_norm(problem, state) if with_criticality else None
    return objective, pixel, crit


def iteration_report(iteration, metrics, steps, floats_sent, memory):
    objective, pixel, crit = metrics
    return IterationReport(
        iteration=iteration,
        objective=objective,
        mean_pixel_error=pixel,
        criticality=crit,
        restarted=[bool(s.restarted) for s in steps],
        floats_sent=int(floats_sent),
        peak_memory=[int(m) for m in memory],
        device_F=[float(s.F) for s in steps],
        device_Fbar=[float(s.Fbar) for s in steps],
        device_E=[float(s.E) for s in steps],
        step_norm=math.sqrt(sum(s.step_sq for s in steps)),
        extrapolation_gap=math.sqrt(sum(s.extrapolation_sq for s in steps)),
        degraded=[bool(s.degraded) for s in steps],
    )


def global_average(objectives, eta):
    """Exponential average of the objective with the same recursion each device uses."""
    out = []
    avg = objectives[0]
    for f in objectives:
        avg = (1.0 - eta) * avg + eta * f
        out.append(avg)
    return out
