"""Performance profiles over iteration counts."""
from __future__ import annotations

import numpy as np


def target_objective(f_ref, f_init, delta):
    """Objective a run must reach to count as solved: ``f_ref + delta (f_init - f_ref)``."""
    return f_ref + delta * (f_init - f_ref)


def solved_iteration(objectives, f_ref, delta):
    """First iteration whose objective is at or below the target, else ``None``."""
    objectives = np.asarray(objectives, dtype=float)
    if len(objectives) == 0:
        return None
    hit = np.flatnonzero(objectives <= target_objective(f_ref, objectives[0], delta))
    return int(hit[0]) if len(hit) else None


def performance_profile(series, f_refs, delta, iterations=None):
    """Fraction of problems solved by each iteration.

    ``series[p]`` is the objective trace of problem ``p``; a problem counts as
    solved at ``k`` once its best objective so far reaches the target.
    """
    if len(series) != len(f_refs):
        raise ValueError("need one reference objective per trace")
    if iterations is None:
        iterations = max((len(s) for s in series), default=0)
    solved = np.zeros(iterations)
    for s, ref in zip(series, f_refs):
        k = solved_iteration(s, ref, delta)
        if k is not None and k < iterations:
            solved[k:] += 1
    return solved / max(len(series), 1)
