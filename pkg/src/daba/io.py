"""BAL files, synthetic problems, PLY export and line-delimited metrics.

BAL cameras map world points into a frame where the camera looks down -z and
project with ``f * r(p) * p``, ``p = -X[:2] / X[2]``.  Internally a camera is
stored as a camera-to-world rotation whose +z axis points forward, so that
the observation ray has a positive scale for points in front of it:

* rotation ``R = R_bal^T diag(1, -1, -1)``, center ``t = -R_bal^T t_bal``;
* pixel ``(u, -v)``;
* intrinsics ``(f, k1 / f, k2 / f**3)``, i.e. the radial polynomial rewritten
  in pixel units so that its value is ``f (1 + k1 |u/f|^2 + k2 |u/f|^4)``.
"""
from __future__ import annotations

import bz2
import gzip
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import CountMismatch, ParseError, SchemaVersionMismatch
from .geometry import LossFunction, ProblemInstance, State, so3_exp, so3_log

_FLIP = np.diag([1.0, -1.0, -1.0])
METRICS_VERSION = 1


# ---------------------------------------------------------------------------
# BAL


@dataclass
class BalFile:
    num_cameras: int
    num_points: int
    num_observations: int
    camera_index: np.ndarray  # (E,)
    point_index: np.ndarray  # (E,)
    pixels: np.ndarray  # (E, 2), BAL convention
    cameras: np.ndarray  # (M, 9): rodrigues, translation, f, k1, k2
    points: np.ndarray  # (N, 3)

    def __eq__(self, other):
        if not isinstance(other, BalFile):
            return NotImplemented
        return (
            (self.num_cameras, self.num_points, self.num_observations)
            == (other.num_cameras, other.num_points, other.num_observations)
            and np.array_equal(self.camera_index, other.camera_index)
            and np.array_equal(self.point_index, other.point_index)
            and np.array_equal(self.pixels, other.pixels)
            and np.array_equal(self.cameras, other.cameras)
            and np.array_equal(self.points, other.points)
        )


def _floats(tokens, lines, start, stop):
    chunk = tokens[start:stop]
    try:
        return np.array(chunk, dtype=float)
    except ValueError:
        for k, tok in enumerate(chunk):
            try:
                float(tok)
            except ValueError:
                raise ParseError(f"not a number: {tok[:32]!r}", line=int(lines[start + k])) from None
        raise


def _indices(values, tokens, lines, start, stride, upper, what):
    idx = values.astype(np.int64)
    bad = (idx != values) | (idx < 0)
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise ParseError(f"{what} index is not a nonnegative integer", line=int(lines[start + k * stride]))
    over = idx >= upper
    if np.any(over):
        k = int(np.flatnonzero(over)[0])
        raise CountMismatch(f"{what} index {idx[k]} out of range (count {upper})", line=int(lines[start + k * stride]))
    return idx


def parse_bal(stream):
    """Parse a BAL problem from a text stream, a string or ``bytes``."""
    if hasattr(stream, "read"):
        stream = stream.read()
    if isinstance(stream, (bytes, bytearray)):
        try:
            stream = stream.decode("ascii")
        except UnicodeDecodeError as err:
            raise ParseError(f"non-ASCII byte at offset {err.start}") from None
    text_lines = stream.splitlines()
    tokens = []
    counts = np.empty(len(text_lines), dtype=np.int64)
    for k, line in enumerate(text_lines):
        parts = line.split()
        counts[k] = len(parts)
        tokens.extend(parts)
    lines = np.repeat(np.arange(1, len(text_lines) + 1), counts)
    last_line = len(text_lines)

    if len(tokens) < 3:
        raise ParseError("missing header", line=1)
    header = _floats(tokens, lines, 0, 3)
    if not np.all(np.isfinite(header)) or np.any(header != np.floor(header)) or np.any(header < 0):
        raise ParseError("header counts must be nonnegative integers", line=int(lines[0]))
    m, n, e = (int(v) for v in header)
    expected = 3 + 4 * e + 9 * m + 3 * n
    if len(tokens) < expected:
        raise CountMismatch(f"file ends after {len(tokens)} numbers, header implies {expected}", line=last_line)
    if len(tokens) > expected:
        raise ParseError("trailing data after the last point", line=int(lines[expected]))

    obs = _floats(tokens, lines, 3, 3 + 4 * e).reshape(e, 4)
    cam_idx = _indices(obs[:, 0], tokens, lines, 3, 4, m, "camera")
    pt_idx = _indices(obs[:, 1], tokens, lines, 4, 4, n, "point")
    off = 3 + 4 * e
    cameras = _floats(tokens, lines, off, off + 9 * m).reshape(m, 9)
    off += 9 * m
    points = _floats(tokens, lines, off, off + 3 * n).reshape(n, 3)
    for arr, name in ((obs[:, 2:], "pixel"), (cameras, "camera"), (points, "point")):
        if not np.all(np.isfinite(arr)):
            raise ParseError(f"non-finite {name} value")
    return BalFile(m, n, e, cam_idx, pt_idx, obs[:, 2:].copy(), cameras, points)


_OPENERS = {".bz2": bz2.open, ".gz": gzip.open}


def read_bal(path):
    """Read a BAL file, decompressing ``.bz2`` and ``.gz`` by suffix."""
    opener = _OPENERS.get(Path(path).suffix, open)
    with opener(path, "rt", encoding="ascii") as fh:
        return parse_bal(fh)


def format_bal(bal):
    out = [f"{bal.num_cameras} {bal.num_points} {bal.num_observations}"]
    for i, j, (u, v) in zip(bal.camera_index, bal.point_index, bal.pixels):
        out.append(f"{i} {j} {float(u)!r} {float(v)!r}")
    out.extend(repr(float(v)) for v in bal.cameras.ravel())
    out.extend(repr(float(v)) for v in bal.points.ravel())
    return "\n".join(out) + "\n"


def write_bal(bal, path):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(format_bal(bal))


def to_problem(bal, loss=LossFunction()):
    R_bal = so3_exp(bal.cameras[:, 0:3])
    R_bal_T = np.swapaxes(R_bal, -1, -2)
    f = bal.cameras[:, 6]
    state = State(
        rotations=R_bal_T @ _FLIP,
        centers=-np.einsum("mij,mj->mi", R_bal_T, bal.cameras[:, 3:6]),
        intrinsics=np.stack([f, bal.cameras[:, 7] / f, bal.cameras[:, 8] / f**3], axis=1),
        points=bal.points,
    )
    pixels = bal.pixels * np.array([1.0, -1.0])
    return ProblemInstance(bal.camera_index, bal.point_index, pixels, state, loss)


def from_problem(problem, state=None):
    state = problem.initial if state is None else state
    R_bal = _FLIP @ np.swapaxes(state.rotations, -1, -2)
    t_bal = -np.einsum("mij,mj->mi", R_bal, state.centers)
    d = state.intrinsics
    f = d[:, 0]
    cameras = np.concatenate(
        [so3_log(R_bal).reshape(-1, 3), t_bal, np.stack([f, d[:, 1] * f, d[:, 2] * f**3], axis=1)], axis=1
    )
    return BalFile(
        problem.num_cameras,
        problem.num_points,
        problem.num_observations,
        problem.camera_ids.copy(),
        problem.point_ids.copy(),
        problem.pixels * np.array([1.0, -1.0]),
        cameras,
        state.points.copy(),
    )


# ---------------------------------------------------------------------------
# Synthetic problems


@dataclass(frozen=True)
class SyntheticConfig:
    num_cameras: int = 20
    num_points: int = 500
    pixel_noise: float = 0.0  # image units, std per coordinate
    rotation_noise: float = 1e-2  # radians
    center_noise: float = 5e-2
    point_noise: float = 5e-2
    focal: float = 1.0
    focal_noise: float = 0.0  # relative
    distortion: tuple = (0.0, 0.0)  # (k1, k2) in normalized coordinates
    ring_radius: float = 7.0
    ball_radius: float = 3.5
    min_views: int = 3
    max_views: int = 6
    seed: int = 0


def _look_at(centers, target):
    z = target - centers
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=2)  # columns are the camera axes in world


def _ray_radius(r, d):
    """Pixel radius ``nu`` solving ``nu = r (d1 + d2 nu^2 + d3 nu^4)`` by Newton's method."""
    nu = r * d[..., 0]
    for _ in range(50):
        g = r * (d[..., 0] + d[..., 1] * nu**2 + d[..., 2] * nu**4) - nu
        dg = r * (2 * d[..., 1] * nu + 4 * d[..., 2] * nu**3) - 1.0
        step = g / dg
        nu = nu - step
        if np.all(np.abs(step) <= 1e-15 * np.maximum(1.0, np.abs(nu))):
            break
    return nu


def project_exact(rotations, centers, intrinsics, points):
    """Pixels whose undistorted ray is exactly parallel to the camera-frame point."""
    X = np.einsum("kji,kj->ki", rotations, points - centers)
    rho = X[:, :2] / X[:, 2:3]
    r = np.linalg.norm(rho, axis=1)
    nu = _ray_radius(r, intrinsics)
    scale = np.where(r > 0, nu / np.where(r > 0, r, 1.0), intrinsics[:, 0])
    return rho * scale[:, None]


def synthesize_problem(config=SyntheticConfig(), loss=LossFunction(), **overrides):
    """Ring of inward-looking cameras around a ball of points.

    Each point is seen by the cameras closest to it in azimuth, so camera
    id ranges correspond to contiguous arcs of the scene.  Returns the
    problem (whose initial state is a perturbed ground truth) and the
    ground-truth state.
    """
    if overrides:
        config = SyntheticConfig(**{**asdict(config), **overrides})
    m, n = config.num_cameras, config.num_points
    if m < 2 or n < 1:
        raise ValueError("need at least 2 cameras and 1 point")
    if not 1 <= config.min_views <= config.max_views:
        raise ValueError("invalid view-count range")
    rng = np.random.default_rng(config.seed)

    theta = 2.0 * np.pi * np.arange(m) / m
    centers = np.stack(
        [config.ring_radius * np.cos(theta), config.ring_radius * np.sin(theta), rng.uniform(-0.5, 0.5, m)], axis=1
    )
    rotations = _look_at(centers, np.zeros(3))
    f = config.focal
    k1, k2 = config.distortion
    intrinsics = np.tile([f, k1 / f, k2 / f**3], (m, 1))

    direction = rng.normal(size=(n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = config.ball_radius * rng.uniform(0.0, 1.0, n) ** (1.0 / 3.0)
    points = direction * radius[:, None]

    views = rng.integers(config.min_views, min(config.max_views, m) + 1, size=n)
    azimuth = np.arctan2(points[:, 1], points[:, 0])
    gap = np.abs(np.angle(np.exp(1j * (azimuth[:, None] - theta[None, :]))))
    ranked = np.argsort(gap + 1e-9 * np.arange(m)[None, :], axis=1, kind="stable")
    cam_ids, pt_ids = [], []
    for j in range(n):
        chosen = np.sort(ranked[j, : views[j]])
        cam_ids.append(chosen)
        pt_ids.append(np.full(len(chosen), j))
    cam_ids = np.concatenate(cam_ids)
    pt_ids = np.concatenate(pt_ids)
    order = np.lexsort((pt_ids, cam_ids))
    cam_ids, pt_ids = cam_ids[order], pt_ids[order]

    truth = State(rotations, centers, intrinsics, points)
    pixels = project_exact(rotations[cam_ids], centers[cam_ids], intrinsics[cam_ids], points[pt_ids])
    if config.pixel_noise > 0:
        pixels = pixels + config.pixel_noise * rng.normal(size=pixels.shape)

    init_rot = so3_exp(config.rotation_noise * rng.normal(size=(m, 3))) @ rotations
    init = State(
        init_rot,
        centers + config.center_noise * rng.normal(size=(m, 3)),
        intrinsics * np.array([1.0 + config.focal_noise * rng.normal(), 1.0, 1.0]),
        points + config.point_noise * rng.normal(size=(n, 3)),
    )
    return ProblemInstance(cam_ids, pt_ids, pixels, init, loss), truth


SUITE_CONFIG = SyntheticConfig(num_cameras=12, num_points=150, pixel_noise=2e-3)


def synthetic_suite(count=10, config=SUITE_CONFIG):
    """Benchmark problems sharing ``config`` and differing only in seed ``0..count-1``."""
    return [synthesize_problem(config, seed=seed)[0] for seed in range(count)]


# ---------------------------------------------------------------------------
# PLY


def export_ply(state, path, binary=False):
    """Write points and camera centers as PLY vertices flagged by ``is_camera``."""
    xyz = np.concatenate([state.points, state.centers]).astype("<f8")
    flag = np.concatenate([np.zeros(state.num_points, np.uint8), np.ones(state.num_cameras, np.uint8)])
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        "comment points followed by camera centers\n"
        f"element vertex {len(xyz)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "property uchar is_camera\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            rec = np.empty(len(xyz), dtype=[("xyz", "<f8", 3), ("cam", "u1")])
            rec["xyz"] = xyz
            rec["cam"] = flag
            fh.write(rec.tobytes())
        else:
            for p, c in zip(xyz, flag):
                fh.write(" ".join([*(repr(float(v)) for v in p), str(int(c))]).encode("ascii") + b"\n")


def read_ply(path):
    """Read back a file written by ``export_ply``: ``(xyz, is_camera)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    fmt = header[1].split()[1]
    count = next(int(l.split()[2]) for l in header if l.startswith("element vertex"))
    body = data[end:]
    if fmt == "binary_little_endian":
        rec = np.frombuffer(body, dtype=[("xyz", "<f8", 3), ("cam", "u1")], count=count)
        return rec["xyz"].copy(), rec["cam"].astype(bool)
    rows = [l.split() for l in body.decode("ascii").splitlines() if l.strip()][:count]
    xyz = np.array([[float(v) for v in r[:3]] for r in rows]).reshape(-1, 3)
    cam = np.array([int(r[3]) for r in rows], dtype=bool)
    return xyz, cam


# ---------------------------------------------------------------------------
# Metrics


def write_metrics(records, path, config=None):
    """One JSON object per line; an optional header line carries the run configuration."""
    with open(path, "w", encoding="utf-8") as fh:
        if config is not None:
            fh.write(json.dumps({"type": "header", "version": METRICS_VERSION, "config": config}, sort_keys=True) + "\n")
        for rec in records:
            d = rec.to_dict() if hasattr(rec, "to_dict") else dict(rec)
            d["version"] = METRICS_VERSION
            fh.write(json.dumps(d, sort_keys=True) + "\n")


def read_metrics(path):
    """Return ``(config, records)``; records come back as ``IterationReport``."""
    from .runtime.trace import IterationReport

    config, records = None, []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as err:
                raise ParseError(f"invalid metrics record: {err.msg}", line=lineno) from None
            if d.get("version") != METRICS_VERSION:
                raise SchemaVersionMismatch(f"line {lineno}: metrics version {d.get('version')!r}, expected {METRICS_VERSION}")
            if d.get("type") == "header":
                config = d.get("config")
                continue
            d.pop("version")
            records.append(IterationReport.from_dict(d))
    return config, records
