"""Superstep orchestration of simulated devices, plus a centralized reference solver."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import DabaError, LinearSolveFailure, ProtocolViolation
from ..geometry import DEFAULT_EPS, ProblemInstance
from ..partition import partition_problem
from ..solver import LMConfig, solve_subproblem
from ..surrogate import Snapshot, build_surrogate_local, local_observations
from . import diagnostics
from .device import Device, DeviceConfig
from .messages import decode
from .trace import IterationReport, Trace

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    devices: int = 1
    iterations: int = 1000
    xi: float = 1e-4
    eta: float = 0.1
    accelerate: bool = True
    mode: str = "sequential"
    strategy: str = "observations"
    lm: LMConfig = field(default_factory=LMConfig)
    criticality_every: int = 10
    criticality_tolerance: float = 0.0
    strict_geometry: bool = True
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if self.devices < 1:
            raise ValueError("device count must be at least 1")
        if self.iterations < 0:
            raise ValueError("iteration count must be nonnegative")
        if self.mode not in ("sequential", "parallel"):
            raise ValueError(f"unknown execution mode {self.mode!r}")
        if not self.xi > 0:
            raise ValueError("xi must be positive")
        if not 0 < self.eta <= 1:
            raise ValueError("eta must lie in (0, 1]")

    def to_dict(self):
        return asdict(self)


class _Executor:
    """Runs one callable per device, in device order or on a thread pool."""

    def __init__(self, mode, count):
        self.pool = None
        if mode == "parallel" and count > 1:
            cap = os.environ.get("DABA_THREADS")
            workers = int(cap) if cap else (os.cpu_count() or 1)
            self.pool = ThreadPoolExecutor(max_workers=max(1, min(workers, count)))

    def map(self, fn, items):
        if self.pool is None:
            return [fn(x) for x in items]
        return list(self.pool.map(fn, items))

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def exchange(outgoing, iteration, partition):
    """Route encoded messages to their receivers.

    ``outgoing[a]`` lists ``(receiver, bytes)`` produced by device ``a``.
    Returns the per-device inboxes and the number of payload floats moved.
    """
    inboxes = [[] for _ in range(partition.num_devices)]
    floats = 0
    for sender, messages in enumerate(outgoing):
        for receiver, data in messages:
            msg = decode(data)
            if msg.sender != sender or msg.receiver != receiver or msg.iteration != iteration:
                raise ProtocolViolation(f"misaddressed message from device {sender} at iteration {iteration}")
            if receiver not in partition.devices[sender].neighbors:
                raise ProtocolViolation(f"device {sender} is not a neighbor of device {receiver}")
            floats += msg.payload_floats
            inboxes[receiver].append(data)
    return inboxes, floats


def account_memory(devices):
    return [dev.memory_floats() for dev in devices]


def drop_degenerate(problem, eps=DEFAULT_EPS):
    """Copy of ``problem`` without observations that violate the separation condition."""
    bad = problem.degenerate_pairs(eps=eps)
    if len(bad) == 0:
        return problem
    logger.warning("dropping %d degenerate observation(s)", len(bad))
    keep = np.ones(problem.num_observations, dtype=bool)
    keep[bad] = False
    return ProblemInstance(problem.camera_ids[keep], problem.point_ids[keep], problem.pixels[keep], problem.initial, problem.loss)


def make_devices(problem, partition, config):
    dev_cfg = DeviceConfig(xi=config.xi, eta=config.eta, accelerate=config.accelerate, lm=config.lm, eps=config.eps)
    devices = []
    for sets in partition.devices:
        local = local_observations(problem, partition, sets.device)
        initial = problem.initial.take(sets.cameras, sets.points)
        devices.append(Device(local, sets, initial, problem.loss, dev_cfg))
    return devices


def run(problem, config=RunConfig(), partition=None, callback=None):
    """Execute the decentralized iteration and return its trace."""
    if not config.strict_geometry:
        problem = drop_degenerate(problem, config.eps)
    if partition is None:
        partition = partition_problem(problem, config.devices, config.strategy)
    devices = make_devices(problem, partition, config)
    executor = _Executor(config.mode, len(devices))
    records = []
    try:
        for k in range(config.iterations):
            outgoing = executor.map(lambda d: _guard(d, k, d.begin, k), devices)
            state = diagnostics.assemble_state(problem, devices)
            with_crit = config.criticality_every > 0 and k % config.criticality_every == 0
            metrics = diagnostics.state_metrics(problem, state, with_crit)
            inboxes, floats = exchange(outgoing, k, partition)
            steps = executor.map(lambda d: _guard(d, k, d.finish, k, inboxes[d.device]), devices)
            report = diagnostics.iteration_report(k, metrics, steps, floats, account_memory(devices))
            records.append(report)
            if callback is not None and callback(report):
                break
            if config.criticality_tolerance > 0 and with_crit and metrics[2] <= config.criticality_tolerance:
                break
    finally:
        executor.close()
    final = diagnostics.assemble_state(problem, devices)
    objective, pixel, crit = diagnostics.state_metrics(problem, final, True)
    return Trace(records, final, objective, pixel, crit, config.to_dict())


def _guard(device, iteration, fn, *args):
    try:
        return fn(*args)
    except DabaError as err:
        raise type(err)(f"device {device.device}, iteration {iteration}: {err}") from err


@dataclass(frozen=True)
class ReferenceConfig:
    iterations: int = 40
    lm: LMConfig = field(default_factory=lambda: LMConfig(max_inner_iterations=10))
    criticality_every: int = 1
    eps: float = DEFAULT_EPS


def run_centralized_reference(problem, config=ReferenceConfig()):
    """Plain robust Levenberg-Marquardt on the whole problem: one accepted step per iteration."""
    partition = partition_problem(problem, 1)
    local = local_observations(problem, partition, 0)
    x = problem.initial.copy()
    damping = config.lm.initial_damping
    records = []
    for k in range(config.iterations):
        with_crit = config.criticality_every > 0 and k % config.criticality_every == 0
        objective, pixel, crit = diagnostics.state_metrics(problem, x, with_crit)
        spec = build_surrogate_local(local, Snapshot.from_state(x), problem.loss, 0.0, config.eps)
        try:
            result = solve_subproblem(spec, x, config.lm, damping=damping)
            damping = result.damping
            x_new, degraded = result.new_state, False
        except LinearSolveFailure:
            x_new, degraded = x, True
        records.append(
            IterationReport(
                iteration=k,
                objective=objective,
                mean_pixel_error=pixel,
                criticality=crit,
                restarted=[False],
                step_norm=float(np.sqrt(x_new.distance_squared(x))),
                degraded=[degraded],
            )
        )
        x = x_new
    objective, pixel, crit = diagnostics.state_metrics(problem, x, True)
    return Trace(records, x, objective, pixel, crit, {"reference": asdict(config)})
