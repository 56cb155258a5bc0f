"""File-based exchange with an external pointmap predictor.

Each request gets its own directory ``<root>/req_<n>/`` holding
``request.json``::

    {"kind": "window", "frames": [ids...], "backend": false}
    {"kind": "descriptor", "frames": [id]}

The external command is run as ``<command> <request_dir>`` and must leave
the answer in the same directory.  A window answer is ``manifest.json``
(``{"frames": [...], "normalizer": float, "version": 1}``) plus one
``.npy`` array per field, stacked over frames in manifest order:

    pointmap.npy          float64 (F, H, W, 3)
    depth.npy             float64 (F, H, W)
    confidence.npy        float64 (F, H, W)
    valid.npy             bool    (F, H, W)
    metric_log_depth.npy  float64 (F,)
    pose.npy              float64 (F, 7)  qw qx qy qz tx ty tz
    intrinsics.npy        float64 (F, 3, 3)

A descriptor answer is ``descriptor.npy`` (float64, 1-D).
"""

from __future__ import annotations

import json
import shlex
import subprocess
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Quat, Sim3Pose
from .io import load_scene
from .oracle import FramePrediction, Predictor, SyntheticPredictor, WindowPrediction

VERSION = 1
FIELDS = ("pointmap", "depth", "confidence", "valid", "metric_log_depth", "pose", "intrinsics")


class ExchangeError(OSError):
    pass


def write_window(window: WindowPrediction, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    fr = window.frames
    arrays = {
        "pointmap": np.stack([f.pointmap for f in fr]).astype(float),
        "depth": np.stack([f.depth for f in fr]).astype(float),
        "confidence": np.stack([f.confidence for f in fr]).astype(float),
        "valid": np.stack([f.valid for f in fr]).astype(bool),
        "metric_log_depth": np.array([f.metric_log_depth for f in fr], dtype=float),
        "pose": np.array([np.concatenate([f.pose.q.array, f.pose.t]) for f in fr]),
        "intrinsics": np.stack([f.intrinsics for f in fr]).astype(float),
    }
    for name, arr in arrays.items():
        np.save(d / f"{name}.npy", arr, allow_pickle=False)
    manifest = {"frames": [int(f.frame_id) for f in fr], "normalizer": float(window.normalizer),
                "version": VERSION}
    (d / "manifest.json").write_text(json.dumps(manifest, sort_keys=True))


def read_window(directory) -> WindowPrediction:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
        arrays = {name: np.load(d / f"{name}.npy", allow_pickle=False) for name in FIELDS}
    except (OSError, ValueError) as exc:
        raise ExchangeError(f"{d}: unreadable window answer: {exc}") from None
    ids = manifest.get("frames")
    if manifest.get("version") != VERSION or not isinstance(ids, list):
        raise ExchangeError(f"{d}/manifest.json: unsupported manifest")
    n = len(ids)
    for name, arr in arrays.items():
        if len(arr) != n:
            raise ExchangeError(f"{d}/{name}.npy: expected {n} frames, found {len(arr)}")
    frames = []
    for i, fid in enumerate(ids):
        p = arrays["pose"][i]
        frames.append(FramePrediction(
            int(fid), arrays["pointmap"][i], arrays["depth"][i],
            Sim3Pose(Quat.from_stored(p[:4]), p[4:7]), arrays["confidence"][i],
            float(arrays["metric_log_depth"][i]), arrays["valid"][i].astype(bool), arrays["intrinsics"][i]))
    return WindowPrediction(frames, float(manifest.get("normalizer", 1.0)))


def answer_request(request_dir, predictor: Predictor) -> None:
    """Serve one request directory with an in-process predictor."""
    d = Path(request_dir)
    req = json.loads((d / "request.json").read_text())
    frames = [int(f) for f in req["frames"]]
    if req.get("kind") == "descriptor":
        np.save(d / "descriptor.npy", np.asarray(predictor.descriptor(frames[0]), dtype=float))
    else:
        write_window(predictor.predict(frames, backend=bool(req.get("backend", False))), d)


class ExchangePredictor:
    """Predictor that delegates every call to an external command via files."""

    def __init__(self, root, command: str | Sequence[str]):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.calls = 0

    def _request(self, payload: dict) -> Path:
        d = self.root / f"req_{self.calls:06d}"
        self.calls += 1
        d.mkdir(parents=True, exist_ok=False)
        (d / "request.json").write_text(json.dumps(payload, sort_keys=True))
        proc = subprocess.run(self.command + [str(d)], capture_output=True, text=True)
        if proc.returncode != 0:
            raise ExchangeError(f"{d}: predictor command failed ({proc.returncode}): {proc.stderr.strip()}")
        return d

    def predict(self, frames: Sequence[int], backend: bool = False) -> WindowPrediction:
        d = self._request({"kind": "window", "frames": [int(f) for f in frames], "backend": bool(backend)})
        w = read_window(d)
        if w.frame_ids != [int(f) for f in frames]:
            raise ExchangeError(f"{d}/manifest.json: frame order differs from request")
        return w

    def descriptor(self, frame: int) -> np.ndarray:
        d = self._request({"kind": "descriptor", "frames": [int(frame)]})
        try:
            return np.load(d / "descriptor.npy", allow_pickle=False)
        except (OSError, ValueError) as exc:
            raise ExchangeError(f"{d}/descriptor.npy: {exc}") from None


def synthetic_responder_command(scene_path) -> list[str]:
    """Command line serving requests with the synthetic predictor of a saved scene."""
    return [sys.executable, "-m", "ffrecon.exchange", str(scene_path)]


def _main(argv=None) -> int:
    args = sys.argv[1:] if argv is None else argv
    if len(args) != 2:
        print("usage: python -m ffrecon.exchange SCENE.npz REQUEST_DIR", file=sys.stderr)
        return 2
    scene = load_scene(args[0])
    answer_request(args[1], SyntheticPredictor(scene, scene.config))
    return 0


if __name__ == "__main__":
    sys.exit(_main())
