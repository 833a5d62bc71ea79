"""Per-iteration records of a run."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields


@dataclass
class IterationReport:
    """Diagnostics of the iterate entering outer iteration ``iteration``.

    ``device_F``, ``device_Fbar`` and ``device_E`` are each device's restart
    metrics at this iteration (``E`` before it is advanced); ``restarted``
    flags the devices whose accelerated step was discarded while producing
    the next iterate.  ``step_norm`` is the size of that step and
    ``extrapolation_gap`` its distance from the extrapolated point.
    """

    iteration: int
    objective: float
    mean_pixel_error: float
    criticality: float | None = None
    restarted: list = field(default_factory=list)
    floats_sent: int = 0
    peak_memory: list = field(default_factory=list)
    device_F: list = field(default_factory=list)
    device_Fbar: list = field(default_factory=list)
    device_E: list = field(default_factory=list)
    step_norm: float = 0.0
    extrapolation_gap: float = 0.0
    degraded: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names - {"type"}
        if unknown:
            raise ValueError(f"unknown metrics fields {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Trace:
    records: list
    final_state: object
    final_objective: float
    final_mean_pixel_error: float
    final_criticality: float | None = None
    config: dict | None = None

    @property
    def degraded(self):
        return any(any(r.degraded) for r in self.records)

    def objectives(self):
        return [r.objective for r in self.records] + [self.final_objective]
