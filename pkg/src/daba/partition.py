"""Assignment of cameras and points to devices and the resulting pair sets.

Every observation touching a device falls into exactly one of three groups
from that device's point of view: *intra* (camera and point both owned),
*camera-side* (camera owned, point foreign) or *point-side* (point owned,
camera foreign).  A crossing observation is camera-side on one device and
point-side on another.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STRATEGIES = ("observations", "cameras")


@dataclass(frozen=True)
class DeviceSets:
    device: int
    cameras: np.ndarray  # owned global camera ids, ascending
    points: np.ndarray  # owned global point ids, ascending
    intra: np.ndarray  # observation indices
    camera_side: np.ndarray
    point_side: np.ndarray
    neighbors: tuple
    recv_cameras: dict = field(default_factory=dict)  # neighbor -> foreign camera ids
    recv_points: dict = field(default_factory=dict)
    send_cameras: dict = field(default_factory=dict)  # neighbor -> owned camera ids
    send_points: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Partition:
    num_devices: int
    camera_owner: np.ndarray
    point_owner: np.ndarray
    devices: tuple

    def crossing_count(self):
        return int(sum(len(d.camera_side) for d in self.devices))

    def floats_per_exchange(self, camera_floats=30, point_floats=6):
        """Scalars crossing device boundaries in one exchange round."""
        total = 0
        for d in self.devices:
            for beta in d.neighbors:
                total += camera_floats * len(d.send_cameras[beta]) + point_floats * len(d.send_points[beta])
        return total


def _camera_groups_by_observations(counts, num_devices):
    m = len(counts)
    cum = np.cumsum(counts, dtype=float)
    total = cum[-1] if m else 0.0
    bounds = [0]
    for g in range(1, num_devices):
        target = g * total / num_devices
        # first camera index whose inclusion reaches the target
        k = int(np.searchsorted(cum, target, side="left")) + 1
        if k > 1 and abs(cum[k - 2] - target) < abs(cum[k - 1] - target):
            k -= 1
        k = max(k, bounds[-1] + 1)
        k = min(k, m - (num_devices - g))
        bounds.append(k)
    bounds.append(m)
    owner = np.empty(m, dtype=np.int64)
    for g in range(num_devices):
        owner[bounds[g] : bounds[g + 1]] = g
    return owner


def _camera_groups_by_count(m, num_devices):
    owner = np.empty(m, dtype=np.int64)
    for g, chunk in enumerate(np.array_split(np.arange(m), num_devices)):
        owner[chunk] = g
    return owner


def partition_problem(problem, num_devices, strategy="observations"):
    """Split cameras into contiguous id ranges and give each point to its plurality device."""
    m, n = problem.num_cameras, problem.num_points
    if not isinstance(num_devices, (int, np.integer)) or num_devices < 1:
        raise ValueError("device count must be a positive integer")
    if num_devices > m:
        raise ValueError(f"cannot split {m} camera(s) over {num_devices} devices")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown partition strategy {strategy!r}")
    ci, pj = problem.camera_ids, problem.point_ids
    if strategy == "observations":
        counts = np.bincount(ci, minlength=m)
        camera_owner = _camera_groups_by_observations(counts, num_devices)
    else:
        camera_owner = _camera_groups_by_count(m, num_devices)

    votes = np.bincount(pj * num_devices + camera_owner[ci], minlength=n * num_devices)
    point_owner = np.argmax(votes.reshape(n, num_devices), axis=1).astype(np.int64)
    return build_partition(problem, camera_owner, point_owner)


def build_partition(problem, camera_owner, point_owner):
    """Derive pair sets and neighbor lists from explicit ownership maps."""
    camera_owner = np.asarray(camera_owner, dtype=np.int64)
    point_owner = np.asarray(point_owner, dtype=np.int64)
    num_devices = int(max(camera_owner.max(initial=0), point_owner.max(initial=0))) + 1
    ci, pj = problem.camera_ids, problem.point_ids
    cam_dev = camera_owner[ci]
    pt_dev = point_owner[pj]
    crossing = cam_dev != pt_dev

    devices = []
    recv = {}
    for a in range(num_devices):
        intra = np.flatnonzero((cam_dev == a) & ~crossing)
        camera_side = np.flatnonzero((cam_dev == a) & crossing)
        point_side = np.flatnonzero((pt_dev == a) & crossing)
        rc, rp = {}, {}
        for beta in np.unique(pt_dev[camera_side]):
            rp[int(beta)] = np.unique(pj[camera_side][pt_dev[camera_side] == beta])
        for beta in np.unique(cam_dev[point_side]):
            rc[int(beta)] = np.unique(ci[point_side][cam_dev[point_side] == beta])
        recv[a] = (rc, rp, intra, camera_side, point_side)

    for a in range(num_devices):
        rc, rp, intra, camera_side, point_side = recv[a]
        neighbors = tuple(sorted(set(rc) | set(rp)))
        empty = np.zeros(0, dtype=np.int64)
        recv_cameras = {b: rc.get(b, empty) for b in neighbors}
        recv_points = {b: rp.get(b, empty) for b in neighbors}
        send_cameras = {b: recv[b][0].get(a, empty) for b in neighbors}
        send_points = {b: recv[b][1].get(a, empty) for b in neighbors}
        devices.append(
            DeviceSets(
                device=a,
                cameras=np.flatnonzero(camera_owner == a),
                points=np.flatnonzero(point_owner == a),
                intra=intra,
                camera_side=camera_side,
                point_side=point_side,
                neighbors=neighbors,
                recv_cameras=recv_cameras,
                recv_points=recv_points,
                send_cameras=send_cameras,
                send_points=send_points,
            )
        )
    return Partition(num_devices, camera_owner, point_owner, tuple(devices))
