"""Binary codec for neighbor messages.

Layout (little endian): header ``version u32, sender u32, receiver u32,
iteration u64, entry_count u64`` followed by entries ``kind u8, id u64`` and
their float64 payload.  A camera entry (kind 0) carries rotation (9, row
major), center (3) and intrinsics (3) for the iterate and then for the
extrapolated iterate, 30 floats in all; a point entry (kind 1) carries 3 + 3.
Entries are sorted by ``(kind, id)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ..errors import ProtocolViolation
from ..geometry import State

CODEC_VERSION = 1
CAMERA_FLOATS = 15
POINT_FLOATS = 3
CAMERA_PAYLOAD = 2 * CAMERA_FLOATS
POINT_PAYLOAD = 2 * POINT_FLOATS
KIND_CAMERA = 0
KIND_POINT = 1

_HEADER = struct.Struct("<IIIQQ")
_CAMERA_DTYPE = np.dtype([("kind", "u1"), ("id", "<u8"), ("values", "<f8", CAMERA_PAYLOAD)])
_POINT_DTYPE = np.dtype([("kind", "u1"), ("id", "<u8"), ("values", "<f8", POINT_PAYLOAD)])


@dataclass(frozen=True)
class Message:
    sender: int
    receiver: int
    iteration: int
    camera_ids: np.ndarray
    camera_values: np.ndarray  # (k, 30)
    point_ids: np.ndarray
    point_values: np.ndarray  # (k, 6)

    @property
    def payload_floats(self):
        return int(self.camera_values.size + self.point_values.size)

    def entries(self):
        out = [(KIND_CAMERA, int(i), v) for i, v in zip(self.camera_ids, self.camera_values)]
        out += [(KIND_POINT, int(i), v) for i, v in zip(self.point_ids, self.point_values)]
        return out


def pack_cameras(x, x_bar, rows):
    m = len(rows)
    return np.concatenate(
        [
            x.rotations[rows].reshape(m, 9),
            x.centers[rows],
            x.intrinsics[rows],
            x_bar.rotations[rows].reshape(m, 9),
            x_bar.centers[rows],
            x_bar.intrinsics[rows],
        ],
        axis=1,
    )


def pack_points(x, x_bar, rows):
    return np.concatenate([x.points[rows], x_bar.points[rows]], axis=1)


def unpack(camera_values, point_values):
    """Split payload blocks into ``(state at x, state at x_bar)`` with empty blocks where absent."""
    cv = camera_values.reshape(-1, CAMERA_PAYLOAD)
    pv = point_values.reshape(-1, POINT_PAYLOAD)

    def state(c, p):
        return State(c[:, 0:9].reshape(-1, 3, 3), c[:, 9:12], c[:, 12:15], p)

    return state(cv[:, :CAMERA_FLOATS], pv[:, :POINT_FLOATS]), state(cv[:, CAMERA_FLOATS:], pv[:, POINT_FLOATS:])


def make_message(sender, receiver, iteration, camera_ids, camera_values, point_ids, point_values):
    camera_ids = np.asarray(camera_ids, dtype=np.int64)
    point_ids = np.asarray(point_ids, dtype=np.int64)
    camera_values = np.asarray(camera_values, dtype=float).reshape(-1, CAMERA_PAYLOAD)
    point_values = np.asarray(point_values, dtype=float).reshape(-1, POINT_PAYLOAD)
    oc, op = np.argsort(camera_ids, kind="stable"), np.argsort(point_ids, kind="stable")
    return Message(int(sender), int(receiver), int(iteration), camera_ids[oc], camera_values[oc], point_ids[op], point_values[op])


def encode(msg):
    head = _HEADER.pack(CODEC_VERSION, msg.sender, msg.receiver, msg.iteration, len(msg.camera_ids) + len(msg.point_ids))
    cams = np.empty(len(msg.camera_ids), dtype=_CAMERA_DTYPE)
    cams["kind"] = KIND_CAMERA
    cams["id"] = msg.camera_ids
    cams["values"] = msg.camera_values
    pts = np.empty(len(msg.point_ids), dtype=_POINT_DTYPE)
    pts["kind"] = KIND_POINT
    pts["id"] = msg.point_ids
    pts["values"] = msg.point_values
    return head + cams.tobytes() + pts.tobytes()


def decode(data):
    """Parse and validate a message; malformed input raises ``ProtocolViolation``."""
    data = bytes(data)
    if len(data) < _HEADER.size:
        raise ProtocolViolation("message shorter than its header")
    version, sender, receiver, iteration, count = _HEADER.unpack_from(data)
    if version != CODEC_VERSION:
        raise ProtocolViolation(f"unsupported codec version {version}")
    off = _HEADER.size
    n_cam = 0
    while n_cam < count and off < len(data) and data[off] == KIND_CAMERA:
        off += _CAMERA_DTYPE.itemsize
        n_cam += 1
    n_pt = count - n_cam
    if len(data) != off + n_pt * _POINT_DTYPE.itemsize or off > len(data):
        raise ProtocolViolation("message length does not match its entry count")
    cams = np.frombuffer(data, dtype=_CAMERA_DTYPE, count=n_cam, offset=_HEADER.size)
    pts = np.frombuffer(data, dtype=_POINT_DTYPE, count=n_pt, offset=off)
    if np.any(pts["kind"] != KIND_POINT):
        raise ProtocolViolation("entries not sorted by kind or unknown kind")
    cam_ids = cams["id"].astype(np.int64)
    pt_ids = pts["id"].astype(np.int64)
    if np.any(np.diff(cam_ids) <= 0) or np.any(np.diff(pt_ids) <= 0):
        raise ProtocolViolation("entries not strictly sorted by id")
    cv, pv = cams["values"].copy(), pts["values"].copy()
    if not (np.all(np.isfinite(cv)) and np.all(np.isfinite(pv))):
        raise ProtocolViolation("non-finite payload value")
    return Message(sender, receiver, iteration, cam_ids, cv.reshape(-1, CAMERA_PAYLOAD), pt_ids, pv.reshape(-1, POINT_PAYLOAD))
