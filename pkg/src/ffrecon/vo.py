"""Keyframe-memory visual odometry on top of a pointmap predictor.

Each mapping window feeds the active keyframes followed by up to ``n_w`` new
frames to the predictor.  The window is brought into the map by re-expressing
the map in the window anchor's frame, estimating a robust scale, and averaging
the per-keyframe relative poses.  Keyframe geometry, pose, confidence and the
map's metric factor are then updated as confidence-weighted running averages.

Map units are those of the bootstrap window, so metric coordinates are map
coordinates times ``GlobalMap.metric_factor``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import (
    DegenerateError,
    PoseDistanceParams,
    Sim3Pose,
    compose,
    inverse,
    pose_distance,
    pose_distance_matrix,
    slerp,
    weighted_quat_mean,
)
from .oracle import FramePrediction, Predictor, WindowPrediction, pixel_rays
from .scale import ScaleUnobservable, metric_factor_from_frames, roe_scale

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VoConfig:
    eta_d: float = 0.15
    n_w: int = 8
    n_max: int = 10
    n_min: int = 7
    eta_b: float = 0.4
    eta_max: float = 1.2
    n_topk: int = 3
    n_old: int = 3
    lam: float = 1.0
    backend_quantile: float = 0.3
    backend_min_history: int = 3
    blend_margin: float = 2.0
    use_backend: bool = True

    def __post_init__(self):
        checks = {
            "eta_d": self.eta_d > 0, "n_w": self.n_w >= 1, "n_max": self.n_max >= 2,
            "n_min": 1 <= self.n_min <= self.n_max, "eta_b": self.eta_b > 0,
            "eta_max": self.eta_max > 0, "n_topk": self.n_topk >= 0, "n_old": self.n_old >= 0,
            "lam": self.lam >= 0, "backend_quantile": 0.0 <= self.backend_quantile <= 1.0,
            "backend_min_history": self.backend_min_history >= 0,
            "blend_margin": self.blend_margin > 0,
        }
        for key, ok in checks.items():
            if not ok:
                raise ValueError(f"invariant violation: {key}")


@dataclass
class KeyframeRecord:
    frame_id: int
    points: np.ndarray    # (H, W, 3) fused, map coordinates
    conf: np.ndarray      # (H, W) accumulated confidence
    valid: np.ndarray     # (H, W)
    pose: Sim3Pose        # camera-to-map
    descriptor: np.ndarray | None = None

    def weight(self) -> float:
        return float(self.conf[self.valid].sum())

    def frame_confidence(self) -> float:
        c = self.conf[self.valid]
        return float(np.median(c)) if c.size else 0.0


@dataclass
class GlobalMap:
    keyframes: dict[int, KeyframeRecord] = field(default_factory=dict)
    poses: dict[int, Sim3Pose] = field(default_factory=dict)
    pose_weights: dict[int, float] = field(default_factory=dict)
    status: dict[int, str] = field(default_factory=dict)
    metric_factor: float = 1.0
    anchor: int | None = None
    active: list[int] = field(default_factory=list)
    translation_normalizer: float = 1.0
    normalizer_history: list[float] = field(default_factory=list)
    confidence_history: list[float] = field(default_factory=list)
    resample_log: list[dict] = field(default_factory=list)
    lam: float = 1.0

    @property
    def keyframe_ids(self) -> list[int]:
        """Keyframes in creation order."""
        return list(self.keyframes)

    def distance_params(self) -> PoseDistanceParams:
        return PoseDistanceParams(self.lam, self.translation_normalizer)

    def pose_of(self, frame_id: int) -> Sim3Pose:
        if frame_id in self.keyframes:
            return self.keyframes[frame_id].pose
        return self.poses[frame_id]

    def update_normalizer(self) -> None:
        pts = [np.linalg.norm(kf.points[kf.valid], axis=-1) for kf in self.keyframes.values()]
        pts = np.concatenate(pts) if pts else np.zeros(0)
        if pts.size and np.median(pts) > 0:
            self.translation_normalizer = float(np.median(pts))

    def metric_trajectory(self, frame_ids: Iterable[int] | None = None) -> dict[int, Sim3Pose]:
        """Registered poses in metric units, keyed by frame id in ascending order."""
        ids = sorted(self.poses) if frame_ids is None else sorted(frame_ids)
        return {f: self.pose_of(f).with_scaled_translation(self.metric_factor) for f in ids}

    def fused_points(self, metric: bool = True) -> tuple[np.ndarray, np.ndarray]:
        pts = [kf.points[kf.valid] for kf in self.keyframes.values()]
        conf = [kf.conf[kf.valid] for kf in self.keyframes.values()]
        P = np.concatenate(pts) if pts else np.zeros((0, 3))
        C = np.concatenate(conf) if conf else np.zeros(0)
        return (P * self.metric_factor if metric else P), C


# --- window algebra ------------------------------------------------------------

def estimate_window_scale(gmap: GlobalMap, window: WindowPrediction, shared_keyframes: Sequence[int],
                          k0: int | None = None) -> float:
    """Scale ``s`` with ``s * window_points ~ map_points`` on shared keyframes.

    Map keyframe points are first expressed in the frame of ``k0`` (the window
    anchor by default).  Weights are ``min(C_map, C_window)`` per pixel.
    """
    k0 = window.frame_ids[0] if k0 is None else k0
    to_local = inverse(gmap.pose_of(k0))
    src, dst, ws = [], [], []
    for k in shared_keyframes:
        rec = gmap.keyframes[k]
        f = window.frame(k)
        m = rec.valid & f.valid
        if not m.any():
            continue
        src.append(f.pointmap[m])
        dst.append(to_local.apply(rec.points[m]))
        ws.append(np.minimum(rec.conf[m], f.confidence[m]))
    if not src:
        raise ScaleUnobservable("scale unobservable")
    return roe_scale(np.concatenate(src), np.concatenate(dst), np.concatenate(ws))


def combine_relative_poses(rel: Sequence[Sim3Pose], weights: Sequence[float]) -> Sim3Pose:
    """Weighted rotation mean and weighted translation mean of rigid transforms."""
    w = np.asarray(weights, dtype=float)
    q = weighted_quat_mean([r.q for r in rel], w)
    t = (w[:, None] * np.array([r.t for r in rel])).sum(axis=0) / w.sum()
    return Sim3Pose(q, t)


def align_coordinates(gmap: GlobalMap, window: WindowPrediction, k0: int,
                      shared_keyframes: Sequence[int]) -> Sim3Pose:
    """Similarity taking window coordinates to map coordinates.

    The scale comes from :func:`estimate_window_scale`; each shared keyframe
    then gives a relative pose ``map_pose o inverse(scaled window pose)`` and
    the confidence-weighted average of those is returned together with the scale.
    """
    s = estimate_window_scale(gmap, window, shared_keyframes, k0)
    rel, wts = [], []
    for k in shared_keyframes:
        f = window.frame(k)
        w = float(f.confidence[f.valid].sum())
        if w <= 0.0:
            continue
        local = Sim3Pose(f.pose.q, s * f.pose.t)
        rel.append(compose(gmap.pose_of(k), inverse(local)))
        wts.append(w)
    if not rel:
        raise DegenerateError("degenerate configuration")
    g = combine_relative_poses(rel, wts)
    return Sim3Pose(g.q, g.t, s)


def window_to_map_frame(window: WindowPrediction, A: Sim3Pose) -> WindowPrediction:
    """Rotate and translate a window into map orientation, keeping window scale.

    Multiplying the result's points and translations by ``A.s`` gives map
    coordinates, which is the form the running-average update expects.
    """
    R = A.R
    t = A.t / A.s
    frames = []
    for f in window.frames:
        g = f.copy()
        g.pointmap = f.pointmap @ R.T + t
        g.pose = Sim3Pose(A.q * f.pose.q, R @ f.pose.t + t)
        frames.append(g)
    return WindowPrediction(frames, window.normalizer)


def window_metric_factor(window: WindowPrediction, frame_ids: Iterable[int] | None = None) -> float:
    if frame_ids is None:
        return window.metric_factor()
    keep = set(frame_ids)
    return metric_factor_from_frames([f.metric_scale() for f in window.frames
                                      if f.frame_id in keep and f.valid.any()])


def fuse_window(gmap: GlobalMap, window: WindowPrediction, s_w: float,
                keyframe_ids: Sequence[int] | None = None,
                metric_frames: Sequence[int] | None = None) -> GlobalMap:
    """Confidence-weighted running-average update of shared keyframes and metric factor.

    ``window`` must already be in map orientation at window scale (see
    :func:`window_to_map_frame`).  Per pixel::

        P <- (C P + C_w s_w P_w) / (C + C_w)
        C <- C + C_w

    and per keyframe, with ``C`` and ``C_w`` the summed valid confidences::

        tau <- (C tau + C_w s_w tau_w) / (C + C_w)
        q   <- slerp(q, q_w, C_w / (C + C_w))

    The metric factor takes ``m_w / s_w`` with the confidences summed over
    all fused keyframes; ``metric_frames`` restricts which window frames
    enter ``m_w``.  The map anchor's pose stays the identity.
    """
    ids = [k for k in (window.frame_ids if keyframe_ids is None else keyframe_ids) if k in gmap.keyframes]
    cm_total = cw_total = 0.0
    for k in ids:
        rec = gmap.keyframes[k]
        f = window.frame(k)
        c_old = np.where(rec.valid, rec.conf, 0.0)
        c_new = np.where(f.valid, f.confidence, 0.0)
        ck, cw = float(c_old.sum()), float(c_new.sum())
        if cw <= 0.0:
            continue
        P_new = s_w * f.pointmap
        denom = c_old + c_new
        both = rec.valid & f.valid
        only_new = f.valid & ~rec.valid
        fused = rec.points.copy()
        fused[both] = (c_old[both, None] * rec.points[both] + c_new[both, None] * P_new[both]) / denom[both, None]
        fused[only_new] = P_new[only_new]
        rec.points = fused
        rec.conf = np.where(rec.valid | f.valid, denom, rec.conf)
        rec.valid = rec.valid | f.valid
        if k != gmap.anchor:
            a = cw / (ck + cw)
            t = (ck * rec.pose.t + cw * s_w * f.pose.t) / (ck + cw)
            rec.pose = Sim3Pose(slerp(rec.pose.q, f.pose.q, a), t)
            gmap.poses[k] = rec.pose
        cm_total += ck
        cw_total += cw
    if cw_total > 0.0:
        m_w = window_metric_factor(window, metric_frames)
        gmap.metric_factor = (cm_total * gmap.metric_factor + cw_total * m_w / s_w) / (cm_total + cw_total)
    return gmap


def fuse_pose(gmap: GlobalMap, frame_id: int, pose: Sim3Pose, weight: float) -> None:
    """Running-average update of a registered non-keyframe pose."""
    old = gmap.poses.get(frame_id)
    c = gmap.pose_weights.get(frame_id, 0.0)
    if old is None or c <= 0.0:
        gmap.poses[frame_id] = pose
        gmap.pose_weights[frame_id] = weight
    elif weight > 0.0:
        a = weight / (c + weight)
        gmap.poses[frame_id] = Sim3Pose(slerp(old.q, pose.q, a), (c * old.t + weight * pose.t) / (c + weight))
        gmap.pose_weights[frame_id] = c + weight
    gmap.status[frame_id] = "registered"


def frame_map_pose(f: FramePrediction, s_w: float) -> Sim3Pose:
    return Sim3Pose(f.pose.q, s_w * f.pose.t)


def make_keyframe(f: FramePrediction, s_w: float, descriptor=None) -> KeyframeRecord:
    return KeyframeRecord(f.frame_id, s_w * f.pointmap, np.where(f.valid, f.confidence, 0.0),
                          f.valid.copy(), frame_map_pose(f, s_w), descriptor)


# --- keyframes -----------------------------------------------------------------

def select_keyframes(candidates: Sequence[tuple[int, Sim3Pose, float]], existing: Sequence[Sim3Pose],
                     eta_d: float, params: PoseDistanceParams) -> list[int]:
    """Greedy selection: repeatedly add the most confident candidate farther than
    ``eta_d`` from every keyframe pose (existing and newly added)."""
    kf = list(existing)
    remaining = list(candidates)
    chosen = []
    while remaining:
        elig = [c for c in remaining if all(pose_distance(c[1], k, params) > eta_d for k in kf)]
        if not elig:
            break
        best = max(elig, key=lambda c: (c[2], -c[0]))
        chosen.append(best[0])
        kf.append(best[1])
        remaining.remove(best)
    return chosen


def needs_resample(active: Sequence[int], poses: dict[int, Sim3Pose], cfg: VoConfig,
                   params: PoseDistanceParams) -> bool:
    if len(active) >= cfg.n_max:
        return True
    if len(active) < 2:
        return False
    D = pose_distance_matrix([poses[k] for k in active], params)
    return bool(D.max() > cfg.eta_max)


def resample_active_set(keyframe_ids: Sequence[int], poses: dict[int, Sim3Pose], cfg: VoConfig,
                        params: PoseDistanceParams) -> tuple[list[int], list[int]]:
    """Pick a fresh active set from all keyframes (given in creation order).

    Returns ``(active, backward)``: ``active[0]`` is the member with the least
    summed pose distance to the others; ``backward`` lists members admitted
    through the backward search window.
    """
    ids = list(keyframe_ids)
    if not ids:
        return [], []
    last = ids[-1]
    Dall = pose_distance_matrix([poses[k] for k in ids], params)
    to_last = Dall[-1]
    rank = {k: i for i, k in enumerate(ids)}
    others = sorted(ids[:-1], key=lambda k: (to_last[rank[k]], rank[k]))
    topk = others[: cfg.n_topk]
    old = [k for k in ids[:-1] if to_last[rank[k]] <= cfg.eta_b][: cfg.n_old]
    members = list(dict.fromkeys([last] + topk + old))[: cfg.n_min]
    # Keep the set inside the pose range the predictor handles.
    while len(members) > 2:
        sub = Dall[np.ix_([rank[k] for k in members], [rank[k] for k in members])]
        if sub.max() <= cfg.eta_max:
            break
        far = max(members[1:], key=lambda k: (to_last[rank[k]], rank[k]))
        members.remove(far)
    sub = Dall[np.ix_([rank[k] for k in members], [rank[k] for k in members])]
    anchor = members[int(np.lexsort(([rank[k] for k in members], sub.sum(axis=1)))[0])]
    rest = sorted((k for k in members if k != anchor), key=rank.get)
    return [anchor] + rest, [k for k in old if k in members]


def manage_active_set(gmap: GlobalMap, cfg: VoConfig) -> list[int]:
    params = gmap.distance_params()
    poses = {k: kf.pose for k, kf in gmap.keyframes.items()}
    if needs_resample(gmap.active, poses, cfg, params):
        active, backward = resample_active_set(gmap.keyframe_ids, poses, cfg, params)
        gmap.resample_log.append({"active": list(active), "backward": list(backward),
                                  "last": gmap.keyframe_ids[-1]})
        gmap.active = active
    return gmap.active


# --- robust front-end / backend choice --------------------------------------------

def self_consistency(f: FramePrediction) -> np.ndarray:
    """Per-pixel distance between the raw pointmap and the depth unprojection, over depth."""
    H, W = f.depth.shape
    unproj = f.pose.apply(pixel_rays(f.intrinsics, H, W) * f.depth[..., None])
    d = np.where(f.depth > 0, f.depth, 1.0)
    return np.linalg.norm(f.pointmap - unproj, axis=-1) / np.abs(d)


def robust_blend(front: WindowPrediction, back: WindowPrediction | None,
                 cfg: VoConfig = VoConfig()) -> WindowPrediction:
    """Per pixel: keep the more self-consistent source when the two disagree by
    more than ``blend_margin`` times the smaller inconsistency, else blend by confidence."""
    if back is None:
        return front
    frames = []
    for ff, fb in zip(front.frames, back.frames):
        sf, sb = self_consistency(ff), self_consistency(fb)
        d = np.where(ff.depth > 0, ff.depth, 1.0)
        dis = np.linalg.norm(ff.pointmap - fb.pointmap, axis=-1) / np.abs(d)
        both = ff.valid & fb.valid
        hard = both & (dis > cfg.blend_margin * np.minimum(sf, sb))
        take_back = (hard & (sb < sf)) | (fb.valid & ~ff.valid)
        soft = both & ~hard & (dis > 0)
        out = ff.copy()
        out.pointmap[take_back] = fb.pointmap[take_back]
        out.depth[take_back] = fb.depth[take_back]
        out.confidence[take_back] = fb.confidence[take_back]
        cf, cb = ff.confidence[soft], fb.confidence[soft]
        tot = cf + cb
        out.pointmap[soft] = (cf[:, None] * ff.pointmap[soft] + cb[:, None] * fb.pointmap[soft]) / tot[:, None]
        out.depth[soft] = (cf * ff.depth[soft] + cb * fb.depth[soft]) / tot
        out.confidence[soft] = (cf * cf + cb * cb) / tot
        out.valid = ff.valid | fb.valid
        vf = ff.valid
        vb = fb.valid
        if vb.any() and (not vf.any() or np.median(sb[vb]) < np.median(sf[vf])):
            out.pose = fb.pose
            out.metric_log_depth = fb.metric_log_depth
        frames.append(out)
    return WindowPrediction(frames, front.normalizer)


def predict_window(predictor: Predictor, frames: Sequence[int], gmap: GlobalMap, cfg: VoConfig) -> WindowPrediction:
    """Front-end prediction, with the backend run only for low-confidence windows."""
    front = predictor.predict(list(frames))
    c = front.median_confidence()
    hist = gmap.confidence_history
    trigger = (cfg.use_backend and len(hist) >= max(1, cfg.backend_min_history)
               and c < float(np.quantile(hist, cfg.backend_quantile)))
    hist.append(c)
    if not trigger:
        return front
    log.debug("backend triggered for window starting at %s", frames[0])
    return robust_blend(front, predictor.predict(list(frames), backend=True), cfg)


# --- pipeline ------------------------------------------------------------------------

def bootstrap_map(window: WindowPrediction, eta_d: float, lam: float = 1.0,
                  accept: Iterable[int] | None = None, descriptors: dict | None = None) -> GlobalMap:
    """Start a map from one window; its first frame becomes the permanent anchor."""
    accept = set(window.frame_ids if accept is None else accept)
    anchor = window.frame_ids[0]
    accept.add(anchor)
    gmap = GlobalMap(lam=lam)
    gmap.anchor = anchor
    gmap.metric_factor = window_metric_factor(window, accept)
    gmap.normalizer_history.append(window.normalizer)
    P = np.concatenate([f.pointmap[f.valid] for f in window.frames])
    if len(P):
        gmap.translation_normalizer = float(np.median(np.linalg.norm(P, axis=-1))) or 1.0
    descriptors = descriptors or {}
    for f in window.frames:
        if f.frame_id in accept:
            fuse_pose(gmap, f.frame_id, f.pose, float(f.confidence[f.valid].sum()))
    a = window.frame(anchor)
    gmap.keyframes[anchor] = make_keyframe(a, 1.0, descriptors.get(anchor))
    gmap.keyframes[anchor].pose = Sim3Pose()
    gmap.poses[anchor] = Sim3Pose()
    cands = [(f.frame_id, f.pose, f.frame_confidence()) for f in window.frames
             if f.frame_id in accept and f.frame_id != anchor]
    for k in select_keyframes(cands, [Sim3Pose()], eta_d, gmap.distance_params()):
        gmap.keyframes[k] = make_keyframe(window.frame(k), 1.0, descriptors.get(k))
    gmap.update_normalizer()
    gmap.active = list(gmap.keyframes)
    return gmap


def extrapolate_poses(gmap: GlobalMap, frames: Sequence[int]) -> None:
    """Constant-velocity fallback for frames of a rejected window."""
    for f in frames:
        order = list(gmap.poses)
        if len(order) >= 2:
            last, prev = gmap.pose_of(order[-1]), gmap.pose_of(order[-2])
            pose = compose(last, compose(inverse(prev), last))
        elif order:
            pose = gmap.pose_of(order[-1])
        else:
            pose = Sim3Pose()
        gmap.poses[f] = Sim3Pose(pose.q, pose.t)
        gmap.pose_weights[f] = 0.0
        gmap.status[f] = "extrapolated"


def process_window(gmap: GlobalMap | None, new_frames: Sequence[int], predictor: Predictor,
                   cfg: VoConfig = VoConfig()) -> GlobalMap:
    """Register one mapping window of new frames and update keyframe memory."""
    new_frames = [int(f) for f in new_frames]
    if len(new_frames) > cfg.n_w:
        raise ValueError(f"window has {len(new_frames)} frames, more than n_w={cfg.n_w}")
    if gmap is None or gmap.anchor is None:
        hist = [] if gmap is None else gmap.confidence_history
        window = predictor.predict(new_frames)
        hist.append(window.median_confidence())
        out = bootstrap_map(window, cfg.eta_d, cfg.lam)
        out.confidence_history = hist
        return out
    memory = list(gmap.active)
    window = predict_window(predictor, memory + new_frames, gmap, cfg)
    try:
        A = align_coordinates(gmap, window, memory[0], memory)
    except (ScaleUnobservable, DegenerateError) as exc:
        log.warning("window %s rejected (%s); extrapolating poses", new_frames, exc)
        extrapolate_poses(gmap, new_frames)
        return gmap
    wm = window_to_map_frame(window, A)
    gmap.normalizer_history.append(window.normalizer)
    fuse_window(gmap, wm, A.s, memory)
    for fid in new_frames:
        f = wm.frame(fid)
        fuse_pose(gmap, fid, frame_map_pose(f, A.s), float(f.confidence[f.valid].sum()))
    params = gmap.distance_params()
    cands = [(fid, gmap.poses[fid], wm.frame(fid).frame_confidence()) for fid in new_frames]
    chosen = select_keyframes(cands, [kf.pose for kf in gmap.keyframes.values()], cfg.eta_d, params)
    for k in chosen:
        gmap.keyframes[k] = make_keyframe(wm.frame(k), A.s)
        gmap.active.append(k)
    if chosen:
        gmap.update_normalizer()
    manage_active_set(gmap, cfg)
    return gmap


class VisualOdometry:
    """Sequential driver: feeds frames to :func:`process_window` in chunks of ``n_w``."""

    def __init__(self, predictor: Predictor, cfg: VoConfig = VoConfig()):
        self.predictor = predictor
        self.cfg = cfg
        self.map: GlobalMap | None = None

    def step(self, frames: Sequence[int]) -> GlobalMap:
        self.map = process_window(self.map, frames, self.predictor, self.cfg)
        return self.map

    def run(self, frames: Sequence[int], callback=None) -> GlobalMap:
        frames = list(frames)
        for i in range(0, len(frames), self.cfg.n_w):
            self.step(frames[i:i + self.cfg.n_w])
            if callback is not None:
                callback(self.map)
        return self.map


