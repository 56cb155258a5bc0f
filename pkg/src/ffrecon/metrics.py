"""Evaluation metrics: depth, point-cloud reconstruction, trajectory and relative pose.

Distances are returned in the units of the inputs; the command line converts
metres to centimetres when writing metric tables.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Sim3Pose, kabsch_umeyama
from .scale import median_scale

ASSOC_TOLERANCE = 0.02
BASELINE_EPS = 1e-6
AUC_THRESHOLDS = tuple(range(1, 31))   # protocol constant: integer degrees 1..30


@dataclass(frozen=True)
class DepthEvalResult:
    rel: float
    delta_103: float
    delta_125: float


@dataclass(frozen=True)
class ReconEvalResult:
    rel: float | None
    accuracy: float
    completeness: float


@dataclass(frozen=True)
class PoseEvalResult:
    ate_rmse: float | None = None
    rra_at: dict[int, float] = field(default_factory=dict)
    rta_at: dict[int, float] | None = None
    auc30: float | None = None


def depth_metrics(pred, gt, valid=None, alignment: str = "median") -> DepthEvalResult:
    """Absolute relative error and ``delta_{1.03}`` / ``delta_{1.25}`` inlier ratios."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt shapes differ")
    mask = np.isfinite(gt) & (gt > 0) & np.isfinite(pred)
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    if not mask.any():
        raise ValueError("no valid pixels")
    d, g = pred[mask], gt[mask]
    if alignment == "median":
        d = d * median_scale(d, g)
    elif alignment != "none":
        raise ValueError(f"unknown alignment {alignment!r}")
    rel = float(np.mean(np.abs(d - g) / g))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(d > 0, np.maximum(d / g, g / d), np.inf)
    return DepthEvalResult(rel, float(np.mean(ratio < 1.03)), float(np.mean(ratio < 1.25)))


def _nn_distance(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    d, _ = cKDTree(ref).query(query, k=1)
    return d


def recon_metrics(pred, gt, alignment: str = "none", reduce: str = "mean") -> ReconEvalResult:
    """Relative point error (when pixel-aligned) plus accuracy and completeness.

    ``rel`` needs ``pred`` and ``gt`` of identical shape and is
    ``mean(|p - p*| / |p*|)``.  Accuracy is the nearest-neighbour distance
    from prediction to ground truth, completeness the reverse; no rigid
    registration is applied.
    """
    P = np.asarray(pred, dtype=float)
    G = np.asarray(gt, dtype=float)
    same = P.shape == G.shape
    P, G = P.reshape(-1, 3), G.reshape(-1, 3)
    if len(P) == 0 or len(G) == 0:
        raise ValueError("empty point set")
    if alignment == "median":
        P = P * median_scale(np.linalg.norm(P, axis=1), np.linalg.norm(G, axis=1))
    elif alignment != "none":
        raise ValueError(f"unknown alignment {alignment!r}")
    red = {"mean": np.mean, "median": np.median}.get(reduce)
    if red is None:
        raise ValueError(f"unknown reduction {reduce!r}")
    rel = None
    if same:
        gn = np.linalg.norm(G, axis=1)
        ok = gn > 0
        rel = float(np.mean(np.linalg.norm(P[ok] - G[ok], axis=1) / gn[ok]))
    return ReconEvalResult(rel, float(red(_nn_distance(P, G))), float(red(_nn_distance(G, P))))


def associate(est_t, gt_t, tol: float = ASSOC_TOLERANCE) -> tuple[np.ndarray, np.ndarray]:
    """One-to-one nearest-timestamp matching within ``tol`` seconds."""
    est_t = np.asarray(est_t, dtype=float)
    gt_t = np.asarray(gt_t, dtype=float)
    if len(est_t) == 0 or len(gt_t) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    order = np.argsort(gt_t)
    gs = gt_t[order]
    pos = np.clip(np.searchsorted(gs, est_t), 1, len(gs) - 1) if len(gs) > 1 else np.zeros(len(est_t), int)
    cand = np.stack([pos - 1, pos], 1) if len(gs) > 1 else pos[:, None]
    dt = np.abs(gs[cand] - est_t[:, None])
    pick = cand[np.arange(len(est_t)), np.argmin(dt, axis=1)]
    err = np.abs(gs[pick] - est_t)
    best: dict[int, tuple[float, int]] = {}
    for i in np.flatnonzero(err <= tol):
        g = int(pick[i])
        if g not in best or err[i] < best[g][0]:
            best[g] = (float(err[i]), int(i))
    ei = np.array(sorted(v[1] for v in best.values()), dtype=int)
    gi_map = {v[1]: g for g, v in best.items()}
    gi = np.array([order[gi_map[i]] for i in ei], dtype=int)
    return ei, gi


def ate_rmse(est_t, est_xyz, gt_t, gt_xyz, align: str = "sim3", tol: float = ASSOC_TOLERANCE) -> float:
    """Root-mean-square translation residual after optional trajectory alignment."""
    ei, gi = associate(est_t, gt_t, tol)
    E = np.asarray(est_xyz, dtype=float).reshape(-1, 3)[ei]
    G = np.asarray(gt_xyz, dtype=float).reshape(-1, 3)[gi]
    if align in ("sim3", "se3"):
        if len(E) < 3:
            raise ValueError("fewer than 3 matched poses")
        E = kabsch_umeyama(E, G, with_scale=align == "sim3").apply(E)
    elif align != "none":
        raise ValueError(f"unknown alignment {align!r}")
    if len(E) == 0:
        raise ValueError("no matched poses")
    return float(np.sqrt(np.mean(np.sum((E - G) ** 2, axis=1))))


def _rotation_angles(Ra: np.ndarray, Rb: np.ndarray) -> np.ndarray:
    """Geodesic angles (degrees) between stacks of rotation matrices."""
    M = np.einsum("nji,njk->nik", Ra, Rb)
    tr = np.trace(M, axis1=1, axis2=2)
    v = np.stack([M[:, 2, 1] - M[:, 1, 2], M[:, 0, 2] - M[:, 2, 0], M[:, 1, 0] - M[:, 0, 1]], 1)
    return np.degrees(np.arctan2(0.5 * np.linalg.norm(v, axis=1), 0.5 * (tr - 1.0)))


def _relative(poses: Sequence[Sim3Pose]) -> tuple[np.ndarray, np.ndarray]:
    R = np.array([p.R for p in poses])
    t = np.array([p.t for p in poses])
    n = len(poses)
    i, j = np.where(~np.eye(n, dtype=bool))
    Rij = np.einsum("nji,njk->nik", R[i], R[j])
    tij = np.einsum("nji,nj->ni", R[i], t[j] - t[i])
    return Rij, tij


def relpose_accuracy(est: Sequence[Sim3Pose], gt: Sequence[Sim3Pose],
                     thresholds: Sequence[int] = (5, 15, 30)) -> PoseEvalResult:
    """RRA/RTA at each threshold over all ordered pairs, plus AUC@30.

    A pair counts as accurate at ``theta`` when its error is strictly below
    ``theta`` degrees.  Pairs whose estimated or true baseline is shorter than
    ``1e-6`` are left out of the translation statistics; when nothing is left
    RTA and AUC are ``None``.
    """
    if len(est) != len(gt):
        raise ValueError("pose lists differ in length")
    if len(est) < 2:
        raise ValueError("need at least 2 poses")
    Re, te = _relative(est)
    Rg, tg = _relative(gt)
    rot_err = _rotation_angles(Re, Rg)
    ne, ng = np.linalg.norm(te, axis=1), np.linalg.norm(tg, axis=1)
    ok = (ne >= BASELINE_EPS) & (ng >= BASELINE_EPS)
    a, b = te[ok], tg[ok]
    tr_err = np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b), axis=1), np.sum(a * b, axis=1)))
    levels = sorted(set(thresholds) | set(AUC_THRESHOLDS))
    rra = {int(t): float(np.mean(rot_err < t)) for t in levels}
    if not ok.any():
        return PoseEvalResult(None, {t: rra[t] for t in thresholds}, None, None)
    rta = {int(t): float(np.mean(tr_err < t)) for t in levels}
    auc = 100.0 * float(np.mean([min(rra[t], rta[t]) for t in AUC_THRESHOLDS]))
    return PoseEvalResult(None, {int(t): rra[t] for t in thresholds}, {int(t): rta[t] for t in thresholds}, auc)
