"""Pointmap predictor interface and a deterministic synthetic implementation.

A predictor maps an ordered list of frame ids to a :class:`WindowPrediction`:
every frame's pointmap and pose live in the coordinate frame of the first
listed frame, and the whole window is divided by the median distance of its
valid points to that origin.  The synthetic predictor ray-casts a box room
with furniture-like boxes from a smooth camera path, then optionally adds
noise with :func:`corrupt`.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .geometry import PoseDistanceParams, Quat, Sim3Pose, compose, inverse, look_at
from .scale import metric_factor_from_frames

FPS = 30.0


def pixel_rays(K: np.ndarray, height: int, width: int) -> np.ndarray:
    """(H, W, 3) camera-frame rays with unit z through pixel centers."""
    v, u = np.mgrid[0:height, 0:width] + 0.5
    pix = np.stack([u, v, np.ones_like(u)], axis=-1)
    return pix @ np.linalg.inv(K).T


@dataclass
class FramePrediction:
    frame_id: int
    pointmap: np.ndarray     # (H, W, 3) window reference coordinates
    depth: np.ndarray        # (H, W) z-depth, window units
    pose: Sim3Pose           # camera-to-reference, s == 1
    confidence: np.ndarray   # (H, W)
    metric_log_depth: float
    valid: np.ndarray        # (H, W) bool
    intrinsics: np.ndarray   # (3, 3)

    def frame_confidence(self) -> float:
        """Median confidence over valid pixels."""
        c = self.confidence[self.valid]
        return float(np.median(c)) if c.size else 0.0

    def metric_scale(self) -> float:
        """Metric units per window unit implied by this frame's metric head."""
        d = self.depth[self.valid]
        return math.exp(self.metric_log_depth) / float(np.median(d))

    def copy(self) -> "FramePrediction":
        return replace(self, pointmap=self.pointmap.copy(), depth=self.depth.copy(),
                       confidence=self.confidence.copy(), valid=self.valid.copy(),
                       intrinsics=self.intrinsics.copy())


@dataclass
class WindowPrediction:
    frames: list[FramePrediction]
    normalizer: float = 1.0

    @property
    def frame_ids(self) -> list[int]:
        return [f.frame_id for f in self.frames]

    def frame(self, frame_id: int) -> FramePrediction:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise KeyError(f"frame {frame_id} not in window")

    def metric_factor(self) -> float:
        return metric_factor_from_frames([f.metric_scale() for f in self.frames if f.valid.any()])

    def median_confidence(self) -> float:
        c = np.concatenate([f.confidence[f.valid] for f in self.frames])
        return float(np.median(c)) if c.size else 0.0


class Predictor(Protocol):
    def predict(self, frames: Sequence[int], backend: bool = False) -> WindowPrediction: ...

    def descriptor(self, frame: int) -> np.ndarray: ...


@dataclass(frozen=True)
class OracleConfig:
    seed: int = 0
    n_frames: int = 200
    height: int = 24
    width: int = 32
    focal: float = 28.0
    trajectory: str = "open"        # "open" or "loop"
    n_waypoints: int = 6
    n_boxes: int = 6
    sigma: float = 0.0              # point noise, fraction of depth (mean displacement)
    pose_noise_rot: float = 0.0     # rad
    pose_noise_trans: float = 0.0   # window units
    metric_noise: float | None = None  # std of metric log depth; defaults to sigma
    dropout: float = 0.0
    conf_base: float = 1.0
    conf_depth_falloff: float = 0.2  # per metre
    backend_noise_scale: float = 0.5
    n_outlier_frames: int = 0
    descriptor_noise: float = 0.02

    def __post_init__(self):
        checks = {
            "sigma": self.sigma >= 0.0,
            "pose_noise_rot": self.pose_noise_rot >= 0.0,
            "pose_noise_trans": self.pose_noise_trans >= 0.0,
            "dropout": 0.0 <= self.dropout < 1.0,
            "n_frames": self.n_frames >= 1,
            "height": self.height >= 2,
            "width": self.width >= 2,
            "focal": self.focal > 0.0,
            "trajectory": self.trajectory in ("open", "loop"),
            "n_waypoints": self.n_waypoints >= 2,
            "n_boxes": self.n_boxes >= 0,
            "conf_base": self.conf_base > 0.0,
            "conf_depth_falloff": self.conf_depth_falloff >= 0.0,
            "backend_noise_scale": self.backend_noise_scale >= 0.0,
            "n_outlier_frames": self.n_outlier_frames >= 0,
            "descriptor_noise": self.descriptor_noise >= 0.0,
        }
        if self.metric_noise is not None:
            checks["metric_noise"] = self.metric_noise >= 0.0
        for key, ok in checks.items():
            if not ok:
                raise ValueError(f"invariant violation: {key}")

    @property
    def metric_sigma(self) -> float:
        return self.sigma if self.metric_noise is None else self.metric_noise


ROOM = (np.array([0.0, 0.0, 0.0]), np.array([8.0, 6.0, 3.0]))
CAMERA_REGION = (np.array([2.6, 2.0, 1.2]), np.array([5.4, 4.0, 1.8]))


def _ray_cast(origin: np.ndarray, dirs: np.ndarray, room, boxes: np.ndarray) -> np.ndarray:
    """Ray parameter of the first hit from inside the room shell."""
    d = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    lo, hi = room
    t_exit = np.where(d > 0, (hi - origin) / d, (lo - origin) / d).min(axis=1)
    t = t_exit
    for bmin, bmax in boxes:
        t1 = (bmin - origin) / d
        t2 = (bmax - origin) / d
        tn = np.minimum(t1, t2).max(axis=1)
        tf = np.maximum(t1, t2).min(axis=1)
        hit = (tf >= tn) & (tn > 1e-6)
        t = np.where(hit & (tn < t), tn, t)
    return t


@dataclass
class SyntheticScene:
    config: OracleConfig
    boxes: np.ndarray                 # (B, 2, 3)
    poses: list[Sim3Pose]             # camera-to-world, metres
    intrinsics: np.ndarray
    descriptors: np.ndarray           # (n_frames + n_outliers, C)
    room: tuple = ROOM
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def frame_ids(self) -> list[int]:
        return list(range(self.config.n_frames))

    @property
    def all_frame_ids(self) -> list[int]:
        return list(range(len(self.poses)))

    @property
    def outlier_ids(self) -> set[int]:
        return set(range(self.config.n_frames, len(self.poses)))

    def timestamp(self, frame_id: int) -> float:
        return frame_id / FPS

    @property
    def timestamps(self) -> np.ndarray:
        return np.arange(len(self.poses)) / FPS

    def rays(self) -> np.ndarray:
        return pixel_rays(self.intrinsics, self.config.height, self.config.width)

    def depth(self, frame_id: int) -> np.ndarray:
        """Metric z-depth of every pixel."""
        key = ("depth", frame_id)
        if key not in self._cache:
            pose = self.poses[frame_id]
            r = self.rays().reshape(-1, 3)
            t = _ray_cast(pose.t, r @ pose.R.T, self.room, self.boxes)
            self._cache[key] = t.reshape(self.config.height, self.config.width)
        return self._cache[key]

    def world_points(self, frame_id: int) -> np.ndarray:
        pose = self.poses[frame_id]
        return pose.apply(self.rays() * self.depth(frame_id)[..., None])

    def scale_hint(self) -> float:
        """Median metric depth over a subsample of frames, used to normalize translations."""
        ids = self.frame_ids[:: max(1, len(self.frame_ids) // 20)]
        return float(np.median(np.concatenate([self.depth(i).ravel() for i in ids])))

    def distance_params(self, lam: float = 1.0) -> PoseDistanceParams:
        return PoseDistanceParams(lam, self.scale_hint())

    def trajectory_diameter(self) -> float:
        c = np.array([self.poses[i].t for i in self.frame_ids])
        return float(np.max(np.linalg.norm(c[:, None] - c[None], axis=-1)))

    def surface_points(self, stride: int = 4) -> np.ndarray:
        ids = self.frame_ids[::stride]
        return np.concatenate([self.world_points(i).reshape(-1, 3) for i in ids])


def _random_boxes(rng: np.random.Generator, n: int) -> np.ndarray:
    lo, hi = ROOM
    boxes = []
    for _ in range(n):
        size = rng.uniform([0.4, 0.4, 0.3], [1.4, 1.2, 2.0])
        # Keep boxes out of the camera corridor.
        side = rng.integers(4)
        x = rng.uniform(0.2, 7.8 - size[0])
        y = rng.uniform(0.2, 5.8 - size[1])
        if side == 0:
            x = rng.uniform(0.2, CAMERA_REGION[0][0] - 0.6 - size[0])
        elif side == 1:
            x = rng.uniform(CAMERA_REGION[1][0] + 0.6, 7.8 - size[0])
        elif side == 2:
            y = rng.uniform(0.2, max(0.21, CAMERA_REGION[0][1] - 0.6 - size[1]))
        else:
            y = rng.uniform(CAMERA_REGION[1][1] + 0.6, max(CAMERA_REGION[1][1] + 0.61, 5.8 - size[1]))
        bmin = np.array([x, y, 0.0])
        boxes.append([bmin, np.minimum(bmin + size, hi - 0.05)])
    return np.array(boxes).reshape(-1, 2, 3)


def _trajectory(rng: np.random.Generator, cfg: OracleConfig) -> list[Sim3Pose]:
    lo, hi = CAMERA_REGION
    k = cfg.n_waypoints
    wp = rng.uniform(lo, hi, size=(k, 3))
    yaw = np.cumsum(rng.uniform(-1.0, 1.0, size=k)) + rng.uniform(0, 2 * math.pi)
    pitch = rng.uniform(-0.15, 0.15, size=k)
    n = cfg.n_frames
    if cfg.trajectory == "loop":
        wp = np.vstack([wp, wp[:1]])
        # Close the heading loop with a whole turn or none, whichever is nearer.
        turns = round((yaw[-1] - yaw[0]) / (2 * math.pi))
        yaw = np.append(yaw, yaw[0] + 2 * math.pi * turns)
        pitch = np.append(pitch, pitch[0])
        s = np.linspace(0.0, 1.0, k + 1)
        bc = "periodic"
        sample = np.linspace(0.0, 1.0, n, endpoint=False)
        yaw_off = (yaw[-1] - yaw[0]) * s
        yaw_spline = CubicSpline(s, yaw - yaw_off, bc_type=bc)
        yaw_eval = yaw_spline(sample) + (yaw[-1] - yaw[0]) * sample
    else:
        s = np.linspace(0.0, 1.0, k)
        bc = "natural"
        sample = np.linspace(0.0, 1.0, n)
        yaw_eval = CubicSpline(s, yaw, bc_type=bc)(sample)
    centers = np.clip(CubicSpline(s, wp, bc_type=bc)(sample), ROOM[0] + 0.3, ROOM[1] - 0.3)
    pitch_eval = CubicSpline(s, pitch, bc_type=bc)(sample)
    poses = []
    for c, a, b in zip(centers, yaw_eval, pitch_eval):
        fwd = np.array([math.cos(a) * math.cos(b), math.sin(a) * math.cos(b), math.sin(b)])
        poses.append(look_at(c, c + fwd))
    return poses


def synth_scene(config: OracleConfig = OracleConfig()) -> SyntheticScene:
    """Build a room scene and camera path; identical seeds give identical scenes."""
    rng = np.random.default_rng(config.seed)
    boxes = _random_boxes(rng, config.n_boxes)
    poses = _trajectory(rng, config)
    for _ in range(config.n_outlier_frames):
        c = rng.uniform(*CAMERA_REGION)
        a = rng.uniform(0, 2 * math.pi)
        poses.append(look_at(c, c + np.array([math.cos(a), math.sin(a), 0.0])))
    K = np.array([[config.focal, 0.0, config.width / 2.0],
                  [0.0, config.focal, config.height / 2.0],
                  [0.0, 0.0, 1.0]])
    desc = []
    span = ROOM[1] - ROOM[0]
    for i, p in enumerate(poses):
        if i < config.n_frames:
            d = np.concatenate([4.0 * p.t / span.max(), 2.0 * p.R[:, 2]])
        else:
            d = 20.0 + rng.normal(0.0, 0.3, size=6)
        desc.append(d + rng.normal(0.0, config.descriptor_noise, size=6))
    return SyntheticScene(config, boxes, poses, K, np.array(desc))


def _perturb_rotation(rng: np.random.Generator, sigma: float) -> Quat:
    axis = rng.normal(size=3)
    return Quat.from_axis_angle(axis, rng.normal(0.0, sigma))


def corrupt(gt: WindowPrediction, config: OracleConfig, key: Sequence[int] = (),
            sigma_scale: float = 1.0) -> WindowPrediction:
    """Add depth-proportional point noise, pose jitter and pixel dropout.

    Confidence is divided by ``1 + |noise| / (sigma * depth)``, so it drops as
    the injected error grows.  The noise stream depends only on the config
    seed, ``key`` and each frame's id.
    """
    sigma = config.sigma * sigma_scale
    rot_sigma = config.pose_noise_rot * sigma_scale
    trans_sigma = config.pose_noise_trans * sigma_scale
    msigma = config.metric_sigma * sigma_scale
    dropout = config.dropout
    if sigma == 0.0 and rot_sigma == 0.0 and trans_sigma == 0.0 and msigma == 0.0 and dropout == 0.0:
        return WindowPrediction([f.copy() for f in gt.frames], gt.normalizer)
    frames = []
    for idx, f in enumerate(gt.frames):
        rng = np.random.default_rng([config.seed, *key, f.frame_id])
        out = f.copy()
        if dropout > 0.0:
            out.valid &= rng.random(f.valid.shape) >= dropout
        if sigma > 0.0:
            n = rng.normal(size=f.pointmap.shape) * (sigma * math.sqrt(math.pi / 8.0)) * f.depth[..., None]
            out.pointmap = f.pointmap + n
            out.depth = f.depth + (n @ f.pose.R)[..., 2]
            rel = np.linalg.norm(n, axis=-1) / (sigma * f.depth)
            out.confidence = f.confidence / (1.0 + rel)
        if idx > 0 and (rot_sigma > 0.0 or trans_sigma > 0.0):
            dq = _perturb_rotation(rng, rot_sigma) if rot_sigma > 0.0 else Quat()
            dt = rng.normal(0.0, trans_sigma, size=3) if trans_sigma > 0.0 else np.zeros(3)
            out.pose = Sim3Pose(dq * f.pose.q, f.pose.t + dt)
        if msigma > 0.0:
            out.metric_log_depth = f.metric_log_depth + rng.normal(0.0, msigma)
        frames.append(out)
    return WindowPrediction(frames, gt.normalizer)


class SyntheticPredictor:
    """Ground-truth predictions of a :class:`SyntheticScene`, optionally corrupted.

    ``backend=True`` returns the same window with noise scaled by
    ``config.backend_noise_scale``, standing in for a refined prediction.
    Stateless after construction.
    """

    def __init__(self, scene: SyntheticScene, config: OracleConfig | None = None):
        self.scene = scene
        self.config = scene.config if config is None else config
        self.calls = 0

    def descriptor(self, frame: int) -> np.ndarray:
        self._check([frame])
        return self.scene.descriptors[frame].copy()

    def _check(self, frames):
        n = len(self.scene.poses)
        for f in frames:
            if not (isinstance(f, (int, np.integer)) and 0 <= f < n):
                raise KeyError(f"unknown frame {f!r}")

    def clean_window(self, frames: Sequence[int]) -> WindowPrediction:
        frames = [int(f) for f in frames]
        if not frames:
            raise ValueError("at least one frame is required")
        self._check(frames)
        sc = self.scene
        cfg = self.config
        anchor_inv = inverse(sc.poses[frames[0]])
        outliers = sc.outlier_ids
        pts = {}
        for f in frames:
            if f in outliers:
                continue
            pts[f] = anchor_inv.apply(sc.world_points(f))
        if pts:
            dist = np.concatenate([np.linalg.norm(p, axis=-1).ravel() for p in pts.values()])
            normalizer = float(np.median(dist))
        else:
            normalizer = 1.0
        out = []
        for f in frames:
            depth = sc.depth(f)
            H, W = depth.shape
            if f in outliers:
                rng = np.random.default_rng([cfg.seed, 7919, f])
                pm = rng.uniform(-1.0, 1.0, size=(H, W, 3))
                pm[..., 2] = np.abs(pm[..., 2]) + 0.1
                d = pm[..., 2].copy()
                conf = np.full((H, W), 0.01 * cfg.conf_base)
                pose = compose(anchor_inv, sc.poses[f]).with_scaled_translation(1.0 / normalizer)
                mld = math.log(float(np.median(depth)))
            else:
                pm = pts[f] / normalizer
                d = depth / normalizer
                conf = cfg.conf_base / (1.0 + cfg.conf_depth_falloff * depth)
                pose = compose(anchor_inv, sc.poses[f]).with_scaled_translation(1.0 / normalizer)
                mld = math.log(normalizer * float(np.median(d)))
            out.append(FramePrediction(f, pm, d, pose, conf, mld, np.ones((H, W), dtype=bool),
                                       sc.intrinsics.copy()))
        return WindowPrediction(out, normalizer)

    def predict(self, frames: Sequence[int], backend: bool = False) -> WindowPrediction:
        self.calls += 1
        gt = self.clean_window(frames)
        ids = gt.frame_ids
        member_hash = zlib.crc32(np.array(sorted(ids), dtype=np.int64).tobytes())
        key = (ids[0], member_hash, int(backend))
        scale = self.config.backend_noise_scale if backend else 1.0
        return corrupt(gt, self.config, key, sigma_scale=scale)
