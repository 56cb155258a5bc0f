"""File formats: trajectory text, binary point clouds and line-delimited records.

Trajectory text
    One pose per line, ``timestamp tx ty tz qx qy qz qw``, separated by single
    spaces.  The timestamp is written with ``%.9f``; every other value uses
    the shortest decimal string that reads back to the same float64, with
    ``-0`` written as ``0``.  Blank lines and lines starting with ``#`` are
    ignored on read.  Timestamps must increase strictly and quaternions must
    have unit norm within ``1e-6``.

Scene bundle
    ``.npz`` archive with ``config`` (JSON text of the oracle settings),
    ``boxes`` (B, 2, 3), ``poses`` (N, 7 as qw qx qy qz tx ty tz, camera to
    world, metres), ``intrinsics`` (3, 3), ``descriptors`` (N, C) and
    ``timestamps`` (N,).

Point cloud
    Binary little-endian polygon file: an ASCII header declaring one
    ``vertex`` element with ``float x, y, z``, then optionally
    ``uchar red, green, blue`` and ``float confidence``, followed by packed
    records in that order.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .geometry import Quat, Sim3Pose
from .oracle import OracleConfig, SyntheticScene

UNIT_TOL = 1e-6


class FormatError(ValueError):
    pass


@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: list[Sim3Pose]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.t for p in self.poses]).reshape(-1, 3)

    @classmethod
    def from_frames(cls, poses: dict[int, Sim3Pose], fps: float = 30.0) -> "Trajectory":
        ids = sorted(poses)
        return cls(np.array(ids, dtype=float) / fps, [poses[i] for i in ids])


def _fmt(v: float) -> str:
    return np.format_float_positional(float(v) + 0.0, trim="-")


def format_pose_line(timestamp: float, pose: Sim3Pose) -> str:
    q = pose.q
    vals = [*pose.t, q.x, q.y, q.z, q.w]
    return " ".join([f"{timestamp:.9f}"] + [_fmt(v) for v in vals])


def write_trajectory(traj: Trajectory, path) -> None:
    ts = traj.timestamps
    if len(ts) > 1 and not np.all(np.diff(ts) > 0):
        raise ValueError("timestamps must increase strictly")
    lines = [format_pose_line(t, p) for t, p in zip(ts, traj.poses)]
    Path(path).write_text("".join(line + "\n" for line in lines))


def parse_trajectory(text: str, source: str = "<string>") -> Trajectory:
    ts, poses = [], []
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        try:
            if len(tok) != 8:
                raise ValueError
            vals = [float(x) for x in tok]
        except ValueError:
            raise FormatError(f"{source}: malformed line {n}") from None
        if not np.all(np.isfinite(vals)):
            raise FormatError(f"{source}: malformed line {n}")
        t, x, y, z, qx, qy, qz, qw = vals
        q = np.array([qw, qx, qy, qz])
        if abs(np.linalg.norm(q) - 1.0) > UNIT_TOL:
            raise FormatError(f"{source}: line {n}: quaternion not unit")
        if ts and not t > ts[-1]:
            raise FormatError(f"{source}: line {n}: timestamps must increase strictly")
        ts.append(t)
        poses.append(Sim3Pose(Quat.from_array(q), np.array([x, y, z])))
    return Trajectory(np.array(ts), poses)


def read_trajectory(path) -> Trajectory:
    return parse_trajectory(Path(path).read_text(), str(path))


# --- point clouds ----------------------------------------------------------------

def _ply_dtype(colors: bool, confidence: bool) -> np.dtype:
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if colors:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    if confidence:
        fields += [("confidence", "<f4")]
    return np.dtype(fields)


def export_pointcloud(points, path, colors=None, confidences=None) -> None:
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if not np.all(np.isfinite(P)):
        raise ValueError("points must be finite")
    dt = _ply_dtype(colors is not None, confidences is not None)
    rec = np.empty(len(P), dtype=dt)
    rec["x"], rec["y"], rec["z"] = P[:, 0], P[:, 1], P[:, 2]
    if colors is not None:
        C = np.asarray(colors).reshape(-1, 3)
        if len(C) != len(P):
            raise ValueError("colors length mismatch")
        rec["red"], rec["green"], rec["blue"] = C[:, 0], C[:, 1], C[:, 2]
    if confidences is not None:
        c = np.asarray(confidences, dtype=float).reshape(-1)
        if len(c) != len(P):
            raise ValueError("confidences length mismatch")
        rec["confidence"] = c
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(P)}"]
    names = {"<f4": "float", "|u1": "uchar"}
    for name in dt.names:
        header.append(f"property {names[dt[name].str]} {name}")
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


def read_pointcloud(path) -> dict[str, np.ndarray]:
    """Read a file written by :func:`export_pointcloud` into named arrays."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError(f"{path}: not a binary point cloud")
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise FormatError(f"{path}: unsupported format")
    count, fields = None, []
    types = {"float": "<f4", "uchar": "u1"}
    for line in header:
        tok = line.split()
        if tok[:2] == ["element", "vertex"]:
            count = int(tok[2])
        elif tok and tok[0] == "property":
            if tok[1] not in types:
                raise FormatError(f"{path}: unsupported property type {tok[1]}")
            fields.append((tok[2], types[tok[1]]))
    if count is None:
        raise FormatError(f"{path}: missing vertex element")
    rec = np.frombuffer(data, dtype=np.dtype(fields), count=count, offset=end + len(b"end_header\n"))
    out = {"points": np.stack([rec["x"], rec["y"], rec["z"]], axis=1)}
    if "red" in rec.dtype.names:
        out["colors"] = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1)
    if "confidence" in rec.dtype.names:
        out["confidence"] = rec["confidence"].copy()
    return out


# --- line-delimited records ----------------------------------------------------------

def write_jsonl(records: Iterable[dict], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]



# --- synthetic scene bundle ------------------------------------------------------------

def save_scene(scene: SyntheticScene, path) -> None:
    """``.npz`` bundle: config as JSON text plus boxes, poses, intrinsics, descriptors."""
    cfg = json.dumps(dataclasses.asdict(scene.config), sort_keys=True)
    poses = np.array([np.concatenate([p.q.array, p.t]) for p in scene.poses])
    with open(path, "wb") as fh:
        np.savez(fh, config=np.array(cfg), boxes=scene.boxes, poses=poses,
                 intrinsics=scene.intrinsics, descriptors=scene.descriptors,
                 timestamps=scene.timestamps)


def load_scene(path) -> SyntheticScene:
    try:
        with np.load(path, allow_pickle=False) as z:
            cfg = OracleConfig(**json.loads(str(z["config"])))
            poses = [Sim3Pose(Quat.from_stored(p[:4]), p[4:7]) for p in z["poses"]]
            return SyntheticScene(cfg, z["boxes"].copy(), poses, z["intrinsics"].copy(), z["descriptors"].copy())
    except KeyError as exc:
        raise FormatError(f"{path}: missing array {exc}") from None
