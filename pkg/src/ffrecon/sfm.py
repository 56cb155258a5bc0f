"""Divide-and-conquer feed-forward structure from motion.

1. Whiten per-image descriptors and group images into clusters of bounded
   size with farthest point sampling, splitting and merging.
2. Coarse registration: start from the most confident cluster, then keep
   mapping the unmapped clusters closest in feature space against the
   keyframes, committing one cluster per iteration.
3. Global refinement: a confidence-ordered traversal re-maps every keyframe
   with its nearest keyframes, then every other frame is re-mapped with its
   nearest keyframes and its pose averaged in.
"""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import DegenerateError, pose_distance_matrix
from .oracle import Predictor, WindowPrediction
from .scale import ScaleUnobservable
from .vo import (
    GlobalMap,
    align_coordinates,
    bootstrap_map,
    frame_map_pose,
    fuse_pose,
    fuse_window,
    make_keyframe,
    select_keyframes,
    window_to_map_frame,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SfmConfig:
    eta_d: float = 0.2
    top_k: int = 5
    n_kmax: int = 8
    eta_r: float = 1.5
    n_cmin: int = 5
    n_cmax: int = 16
    registration_quantile: float = 0.1
    retry_floor: float = 0.5
    lam: float = 1.0
    whiten_eps: float = 1e-6
    max_cluster_iters: int = 20

    def __post_init__(self):
        checks = {
            "eta_d": self.eta_d > 0, "top_k": self.top_k >= 1, "n_kmax": self.n_kmax >= 1,
            "eta_r": self.eta_r > 0, "n_cmin": self.n_cmin >= 1,
            "n_cmax": self.n_cmax >= max(1, self.n_cmin),
            "registration_quantile": 0.0 <= self.registration_quantile < 1.0,
            "retry_floor": self.retry_floor >= 0, "lam": self.lam >= 0,
            "whiten_eps": self.whiten_eps > 0, "max_cluster_iters": self.max_cluster_iters >= 0,
        }
        for key, ok in checks.items():
            if not ok:
                raise ValueError(f"invariant violation: {key}")


@dataclass
class ImageDescriptorSet:
    ids: list[int]
    descriptors: np.ndarray
    whitened: bool = False

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=float).reshape(len(self.ids), -1)

    def distance_matrix(self) -> np.ndarray:
        X = self.descriptors
        return np.linalg.norm(X[:, None, :] - X[None, :, :], axis=-1)

    def lookup(self) -> dict[int, np.ndarray]:
        return {i: d for i, d in zip(self.ids, self.descriptors)}


@dataclass
class ClusterSet:
    clusters: list[list[int]]
    centroids: np.ndarray
    undersized: bool = False

    def sizes(self) -> list[int]:
        return [len(c) for c in self.clusters]


def whiten(desc: ImageDescriptorSet, eps: float = 1e-6) -> ImageDescriptorSet:
    """Center, rotate onto principal axes and divide by ``sqrt(eigenvalue + eps)``."""
    X = desc.descriptors
    if len(X) < 2:
        raise ValueError("whitening needs at least two descriptors")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / len(X)
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals, 0.0, None)
    Z = (Xc @ evecs) / np.sqrt(evals + eps)
    return ImageDescriptorSet(list(desc.ids), Z, True)


def farthest_point_sampling(D: np.ndarray, k: int, start: int = 0) -> list[int]:
    """Greedy max-min selection of ``k`` indices from a distance matrix."""
    n = len(D)
    k = min(k, n)
    if k <= 0:
        return []
    chosen = [start]
    mind = D[start].copy()
    for _ in range(k - 1):
        nxt = int(np.argmax(mind))
        if mind[nxt] <= 0.0 and len(chosen) >= 1:
            # Remaining points coincide with chosen ones; take unchosen in index order.
            rest = [i for i in range(n) if i not in chosen]
            nxt = rest[0]
        chosen.append(nxt)
        mind = np.minimum(mind, D[nxt])
    return chosen


def _centroids(X: np.ndarray, groups: list[list[int]]) -> np.ndarray:
    return np.array([X[g].mean(axis=0) for g in groups]) if groups else np.zeros((0, X.shape[1]))


def _split2(X: np.ndarray, g: list[int]) -> list[list[int]]:
    c = X[g].mean(axis=0)
    a = g[int(np.argmax(np.linalg.norm(X[g] - c, axis=1)))]
    b = g[int(np.argmax(np.linalg.norm(X[g] - X[a], axis=1)))]
    da = np.linalg.norm(X[g] - X[a], axis=1)
    db = np.linalg.norm(X[g] - X[b], axis=1)
    left = [i for i, p, q in zip(g, da, db) if p <= q]
    right = [i for i, p, q in zip(g, da, db) if p > q]
    if not right:
        half = len(g) // 2
        left, right = g[:half], g[half:]
    return [left, right]


def _move_nearest(X: np.ndarray, src: list[int], dst: list[int]) -> None:
    """Move the member of ``src`` closest to the centroid of ``dst`` into ``dst``."""
    c = X[dst].mean(axis=0)
    m = src[int(np.argmin(np.linalg.norm(X[src] - c, axis=1)))]
    src.remove(m)
    dst.append(m)


def _repair_sizes(X: np.ndarray, groups: list[list[int]], cmin: int, cmax: int) -> list[list[int]]:
    """Force every cluster size into ``[cmin, cmax]`` when some partition allows it.

    The cluster count is first brought into ``[ceil(T/cmax), floor(T/cmin)]``;
    then single members move between neighbouring clusters.  Each move lowers
    the total size violation by one, so the loop ends after at most ``T`` moves.
    """
    groups = [list(g) for g in groups]
    T = sum(len(g) for g in groups)
    lo, hi = math.ceil(T / cmax), T // cmin
    if lo > hi:
        return groups
    while len(groups) < lo:
        big = max(range(len(groups)), key=lambda i: (len(groups[i]), -min(groups[i])))
        groups[big:big + 1] = _split2(X, groups[big])
    while len(groups) > hi:
        small = min(range(len(groups)), key=lambda i: (len(groups[i]), min(groups[i])))
        C = _centroids(X, groups)
        d = np.linalg.norm(C - C[small], axis=1)
        d[small] = np.inf
        j = int(np.argmin(d))
        groups[j] += groups[small]
        del groups[small]

    def nearest(i, candidates):
        C = _centroids(X, groups)
        return min(candidates, key=lambda j: (float(np.linalg.norm(C[j] - C[i])), min(groups[j])))

    while True:
        under = [i for i, g in enumerate(groups) if len(g) < cmin]
        over = [i for i, g in enumerate(groups) if len(g) > cmax]
        if under:
            i = min(under, key=lambda j: (len(groups[j]), min(groups[j])))
            donor = nearest(i, [j for j, g in enumerate(groups) if j != i and len(g) > cmin])
            _move_nearest(X, groups[donor], groups[i])
        elif over:
            i = max(over, key=lambda j: (len(groups[j]), -min(groups[j])))
            recv = nearest(i, [j for j, g in enumerate(groups) if len(g) < cmax])
            _move_nearest(X, groups[i], groups[recv])
        else:
            return groups


def cluster_images(desc: ImageDescriptorSet, cfg: SfmConfig = SfmConfig()) -> ClusterSet:
    """Partition images into clusters whose sizes lie in ``[n_cmin, n_cmax]``."""
    X = desc.descriptors
    T = len(X)
    ids = list(desc.ids)
    if T == 0:
        return ClusterSet([], np.zeros((0, X.shape[1] if X.ndim == 2 else 0)), True)
    if T <= cfg.n_cmax:
        return ClusterSet([sorted(ids)], X.mean(axis=0, keepdims=True), T < cfg.n_cmin)
    D = desc.distance_matrix()
    k = math.ceil(T / cfg.n_cmax)
    start = int(np.argmin(np.linalg.norm(X - X.mean(axis=0), axis=1)))
    seeds = farthest_point_sampling(D, k, start)
    labels = np.argmin(D[:, seeds], axis=1)
    groups = [sorted(np.flatnonzero(labels == j).tolist()) for j in range(len(seeds))]
    groups = [g for g in groups if g]

    def in_range(gs):
        return all(cfg.n_cmin <= len(g) <= cfg.n_cmax for g in gs)

    for _ in range(cfg.max_cluster_iters):
        if in_range(groups):
            break
        out = []
        for g in groups:
            out.extend(_split2(X, g) if len(g) > cfg.n_cmax else [g])
        groups = out
        while len(groups) > 1:
            small = [i for i, g in enumerate(groups) if len(g) < cfg.n_cmin]
            if not small:
                break
            i = min(small, key=lambda j: (len(groups[j]), groups[j][0]))
            C = _centroids(X, groups)
            d = np.linalg.norm(C - C[i], axis=1)
            d[i] = np.inf
            j = int(np.argmin(d))
            groups[j] = sorted(groups[j] + groups[i])
            del groups[i]
    if not in_range(groups):
        groups = _repair_sizes(X, groups, cfg.n_cmin, cfg.n_cmax)
    groups = sorted((sorted(g) for g in groups), key=lambda g: g[0])
    clusters = [[ids[i] for i in g] for g in groups]
    # Still out of range only when no partition of T into [n_cmin, n_cmax] exists.
    return ClusterSet(clusters, _centroids(X, groups), not in_range(groups))


def feature_distance(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> float:
    """Minimum pairwise Euclidean distance between two descriptor sets."""
    A, B = np.asarray(a), np.asarray(b)
    if len(A) == 0 or len(B) == 0:
        return math.inf
    return float(np.min(np.linalg.norm(A[:, None, :] - B[None, :, :], axis=-1)))


def partition_keyframes(gmap: GlobalMap, n_kmax: int) -> list[list[int]]:
    """Split keyframes into pose-distance groups seeded by farthest point sampling."""
    ids = gmap.keyframe_ids
    if len(ids) <= n_kmax:
        return [ids]
    D = pose_distance_matrix([gmap.keyframes[k].pose for k in ids], gmap.distance_params())
    seeds = farthest_point_sampling(D, math.ceil(len(ids) / n_kmax), 0)
    labels = np.argmin(D[:, seeds], axis=1)
    groups = [[ids[i] for i in np.flatnonzero(labels == j)] for j in range(len(seeds))]
    return [g for g in groups if g]


@dataclass
class SfmResult:
    map: GlobalMap
    clusters: ClusterSet
    unregistered: set[int] = field(default_factory=set)
    cluster_confidence: dict[int, float] = field(default_factory=dict)
    cluster_status: dict[int, str] = field(default_factory=dict)
    frame_cluster: dict[int, int] = field(default_factory=dict)
    refine_order: list[int] = field(default_factory=list)

    def report_records(self) -> list[dict]:
        recs = []
        for cid, members in enumerate(self.clusters.clusters):
            recs.append({"type": "cluster", "id": cid, "frames": list(members),
                         "confidence": self.cluster_confidence.get(cid),
                         "status": self.cluster_status.get(cid, "unmapped")})
        for f in sorted(self.frame_cluster):
            status = "unregistered" if f in self.unregistered else self.map.status.get(f, "unregistered")
            recs.append({"type": "frame", "id": f, "cluster": self.frame_cluster[f], "status": status})
        return recs


def _mean_conf(window: WindowPrediction, frames: Sequence[int]) -> float:
    return float(np.mean([window.frame(f).frame_confidence() for f in frames]))


def _commit(gmap: GlobalMap, window: WindowPrediction, A, memory: Sequence[int], frames: Sequence[int],
            threshold: float, desc: dict, cfg: SfmConfig) -> list[int]:
    """Fuse a mapping into the map; returns frames deferred for low confidence."""
    wm = window_to_map_frame(window, A)
    accepted, deferred = [], []
    for f in frames:
        (accepted if wm.frame(f).frame_confidence() >= threshold else deferred).append(f)
    fuse_window(gmap, wm, A.s, memory, metric_frames=list(memory) + accepted)
    for f in accepted:
        fr = wm.frame(f)
        fuse_pose(gmap, f, frame_map_pose(fr, A.s), float(fr.confidence[fr.valid].sum()))
    params = gmap.distance_params()
    cands = [(f, gmap.poses[f], wm.frame(f).frame_confidence()) for f in accepted if f not in gmap.keyframes]
    for k in select_keyframes(cands, [kf.pose for kf in gmap.keyframes.values()], cfg.eta_d, params):
        gmap.keyframes[k] = make_keyframe(wm.frame(k), A.s, desc.get(k))
    gmap.update_normalizer()
    return deferred


def coarse_register(clusters: ClusterSet, predictor: Predictor, cfg: SfmConfig = SfmConfig(),
                    descriptors: ImageDescriptorSet | None = None) -> SfmResult:
    """Incrementally register clusters; low-confidence frames get one retry at the end."""
    if not clusters.clusters:
        raise ValueError("no clusters to register")
    if descriptors is None:
        ids = [f for c in clusters.clusters for f in c]
        descriptors = whiten(ImageDescriptorSet(ids, [predictor.descriptor(f) for f in ids]), cfg.whiten_eps)
    desc = descriptors.lookup()
    result = SfmResult(GlobalMap(lam=cfg.lam), clusters)
    for cid, members in enumerate(clusters.clusters):
        for f in members:
            result.frame_cluster[f] = cid

    windows = [predictor.predict(list(c)) for c in clusters.clusters]
    for cid, w in enumerate(windows):
        result.cluster_confidence[cid] = _mean_conf(w, clusters.clusters[cid])
    init = max(range(len(windows)), key=lambda c: (result.cluster_confidence[c], -c))
    w0 = windows[init]
    run_conf = [f.frame_confidence() for f in w0.frames]
    thr = float(np.quantile(run_conf, cfg.registration_quantile))
    accept = [f.frame_id for f in w0.frames if f.frame_confidence() >= thr]
    deferred = [f.frame_id for f in w0.frames if f.frame_confidence() < thr and f.frame_id != w0.frame_ids[0]]
    gmap = bootstrap_map(w0, cfg.eta_d, cfg.lam, accept, desc)
    result.map = gmap
    result.cluster_status[init] = "initial"
    unmapped = [c for c in range(len(windows)) if c != init]

    while unmapped:
        kf_desc = [desc[k] for k in gmap.keyframe_ids]
        fd = {c: feature_distance([desc[f] for f in clusters.clusters[c]], kf_desc) for c in unmapped}
        cands = sorted(unmapped, key=lambda c: (fd[c], c))[: cfg.top_k]
        memories = partition_keyframes(gmap, cfg.n_kmax)
        attempts = []
        for c in cands:
            frames = clusters.clusters[c]
            cdesc = [desc[f] for f in frames]
            ranked = sorted(memories, key=lambda m: (feature_distance(cdesc, [desc[k] for k in m]), m[0]))
            for mem in ranked[: cfg.top_k]:
                w = predictor.predict(list(mem) + list(frames))
                try:
                    A = align_coordinates(gmap, w, mem[0], mem)
                except (ScaleUnobservable, DegenerateError):
                    continue
                attempts.append((_mean_conf(w, frames), c, w, A, mem))
        if not attempts:
            for c in cands:
                result.cluster_status[c] = "failed"
                result.unregistered.update(clusters.clusters[c])
                unmapped.remove(c)
            continue
        conf, c, w, A, mem = max(attempts, key=lambda a: (a[0], -a[1]))
        frames = clusters.clusters[c]
        run_conf.extend(w.frame(f).frame_confidence() for f in frames)
        thr = float(np.quantile(run_conf, cfg.registration_quantile))
        deferred += _commit(gmap, w, A, mem, frames, thr, desc, cfg)
        result.cluster_status[c] = "registered"
        unmapped.remove(c)

    # Retry deferred frames once, grouped in cluster-sized chunks.
    floor = cfg.retry_floor * float(np.median(run_conf))
    deferred = sorted(set(deferred), key=lambda f: (result.frame_cluster[f], f))
    for i in range(0, len(deferred), cfg.n_cmax):
        chunk = deferred[i:i + cfg.n_cmax]
        cdesc = [desc[f] for f in chunk]
        memories = partition_keyframes(gmap, cfg.n_kmax)
        mem = min(memories, key=lambda m: (feature_distance(cdesc, [desc[k] for k in m]), m[0]))
        w = predictor.predict(list(mem) + chunk)
        try:
            A = align_coordinates(gmap, w, mem[0], mem)
        except (ScaleUnobservable, DegenerateError):
            result.unregistered.update(chunk)
            continue
        wm = window_to_map_frame(w, A)
        for f in chunk:
            fr = wm.frame(f)
            if fr.frame_confidence() >= floor:
                fuse_pose(gmap, f, frame_map_pose(fr, A.s), float(fr.confidence[fr.valid].sum()))
            else:
                result.unregistered.add(f)
    for f in result.unregistered:
        gmap.poses.pop(f, None)
        gmap.status[f] = "unregistered"
    return result


def _map_keyframe_window(gmap: GlobalMap, predictor: Predictor, members: list[int]) -> None:
    w = predictor.predict(members)
    A = align_coordinates(gmap, w, members[0], members)
    fuse_window(gmap, window_to_map_frame(w, A), A.s, members)


def global_map_refine(gmap: GlobalMap, predictor: Predictor, cfg: SfmConfig = SfmConfig(),
                      skip: set[int] | None = None) -> list[int]:
    """Refine keyframes by confidence-prioritized traversal, then all other frames.

    Returns the keyframe visit order.  Every keyframe is visited once; when the
    traversal runs out of reachable keyframes it restarts from the earliest
    unvisited one.
    """
    skip = skip or set()
    ids = gmap.keyframe_ids
    index = {k: i for i, k in enumerate(ids)}
    params = gmap.distance_params()
    D = pose_distance_matrix([gmap.keyframes[k].pose for k in ids], params)

    def neighbours(k):
        d = D[index[k]]
        near = [j for j in ids if j != k and d[index[j]] <= cfg.eta_r]
        return sorted(near, key=lambda j: (d[index[j]], j))[: cfg.top_k]

    visited: set[int] = set()
    order: list[int] = []
    heap: list[tuple[float, int]] = []
    while len(visited) < len(ids):
        if not heap:
            first = next(k for k in ids if k not in visited)
            heapq.heappush(heap, (-math.inf, first))
        _, k = heapq.heappop(heap)
        if k in visited:
            continue
        visited.add(k)
        order.append(k)
        nb = neighbours(k)
        if nb:
            try:
                _map_keyframe_window(gmap, predictor, [k] + nb)
            except (ScaleUnobservable, DegenerateError) as exc:
                log.warning("keyframe %d refinement skipped: %s", k, exc)
        for j in nb:
            if j not in visited:
                heapq.heappush(heap, (-gmap.keyframes[j].frame_confidence(), j))

    params = gmap.distance_params()
    kposes = [gmap.keyframes[k].pose for k in ids]
    for f in sorted(gmap.poses):
        if f in gmap.keyframes or f in skip:
            continue
        d = pose_distance_matrix([gmap.poses[f]] + kposes, params)[0, 1:]
        nb = [ids[i] for i in np.lexsort((np.arange(len(ids)), d))[: cfg.top_k]]
        w = predictor.predict(nb + [f])
        try:
            A = align_coordinates(gmap, w, nb[0], nb)
        except (ScaleUnobservable, DegenerateError):
            continue
        fr = window_to_map_frame(w, A).frame(f)
        fuse_pose(gmap, f, frame_map_pose(fr, A.s), float(fr.confidence[fr.valid].sum()))
    return order


def run_sfm(frame_ids: Sequence[int], predictor: Predictor, cfg: SfmConfig = SfmConfig(),
            refine: bool = True) -> SfmResult:
    ids = list(frame_ids)
    raw = ImageDescriptorSet(ids, [predictor.descriptor(f) for f in ids])
    wd = whiten(raw, cfg.whiten_eps)
    clusters = cluster_images(wd, cfg)
    result = coarse_register(clusters, predictor, cfg, wd)
    if refine:
        result.refine_order = global_map_refine(result.map, predictor, cfg, result.unregistered)
    return result
