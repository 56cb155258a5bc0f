"""Similarity transforms, quaternion helpers and point-set registration.

Quaternions are stored scalar-first ``(w, x, y, z)`` and canonicalized to the
``w >= 0`` hemisphere.  A :class:`Sim3Pose` maps a point ``p`` to
``s * R @ p + t``.  Camera poses are camera-to-world with ``s == 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class DegenerateError(ValueError):
    """Input geometry does not determine a unique solution."""


def _canonical(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError("quaternion has zero or non-finite norm")
    v = v / n
    if v[0] < 0.0:
        v = -v
    return v


@dataclass(frozen=True)
class Quat:
    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        v = _canonical(np.array([self.w, self.x, self.y, self.z], dtype=float))
        object.__setattr__(self, "w", float(v[0]))
        object.__setattr__(self, "x", float(v[1]))
        object.__setattr__(self, "y", float(v[2]))
        object.__setattr__(self, "z", float(v[3]))

    @classmethod
    def from_array(cls, v) -> "Quat":
        v = np.asarray(v, dtype=float)
        return cls(v[0], v[1], v[2], v[3])

    @classmethod
    def from_stored(cls, v) -> "Quat":
        """Rebuild a quaternion read back from disk, bit-exact when it is already canonical.

        Values within a few ulp of unit norm with ``w >= 0`` are kept as they are;
        anything else is normalized as usual.
        """
        v = np.asarray(v, dtype=float)
        if v[0] >= 0.0 and abs(float(np.dot(v, v)) - 1.0) <= 8 * np.finfo(float).eps:
            q = object.__new__(cls)
            for name, c in zip("wxyz", v):
                object.__setattr__(q, name, float(c))
            return q
        return cls.from_array(v)

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "Quat":
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        h = 0.5 * angle
        return cls(math.cos(h), *(math.sin(h) * axis))

    @classmethod
    def from_matrix(cls, R) -> "Quat":
        R = np.asarray(R, dtype=float)
        # Shepperd's method: branch on the largest diagonal term.
        tr = np.trace(R)
        if tr > 0.0:
            s = 2.0 * math.sqrt(tr + 1.0)
            q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
            s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
            q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        elif R[1, 1] > R[2, 2]:
            s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
            q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        else:
            s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
            q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        return cls(*q)

    @property
    def array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def matrix(self) -> np.ndarray:
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    def __mul__(self, other: "Quat") -> "Quat":
        a, b = self, other
        return Quat(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )

    def conj(self) -> "Quat":
        # Already unit with w >= 0; skip renormalization so conj is exact.
        q = object.__new__(Quat)
        for name, v in zip("wxyz", (self.w, -self.x, -self.y, -self.z)):
            object.__setattr__(q, name, v)
        return q

    def angle(self) -> float:
        """Rotation angle in radians, in [0, pi]."""
        v = math.sqrt(self.x ** 2 + self.y ** 2 + self.z ** 2)
        return 2.0 * math.atan2(v, abs(self.w))


def rotation_angle_between(a: Quat, b: Quat) -> float:
    return (a.conj() * b).angle()


@dataclass(frozen=True)
class Sim3Pose:
    q: Quat = field(default_factory=Quat)
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    s: float = 1.0

    def __post_init__(self):
        t = np.array(self.t, dtype=float).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "s", float(self.s))
        if not self.s > 0.0:
            raise ValueError(f"scale must be positive, got {self.s}")

    @classmethod
    def identity(cls) -> "Sim3Pose":
        return cls()

    @classmethod
    def from_matrix(cls, R, t, s: float = 1.0) -> "Sim3Pose":
        return cls(Quat.from_matrix(R), np.asarray(t, dtype=float), s)

    @property
    def R(self) -> np.ndarray:
        return self.q.matrix()

    def apply(self, p) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        p = np.asarray(p, dtype=float)
        return self.s * (p @ self.R.T) + self.t

    def rigid(self) -> "Sim3Pose":
        return Sim3Pose(self.q, self.t, 1.0)

    def with_scaled_translation(self, k: float) -> "Sim3Pose":
        return Sim3Pose(self.q, k * self.t, self.s)

    def matrix4(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.s * self.R
        M[:3, 3] = self.t
        return M

    def __matmul__(self, other: "Sim3Pose") -> "Sim3Pose":
        return compose(self, other)


def compose(a: Sim3Pose, b: Sim3Pose) -> Sim3Pose:
    """Return the pose equivalent to applying ``b`` first, then ``a``."""
    return Sim3Pose(a.q * b.q, a.s * (a.R @ b.t) + a.t, a.s * b.s)


def inverse(p: Sim3Pose) -> Sim3Pose:
    qi = p.q.conj()
    si = 1.0 / p.s
    return Sim3Pose(qi, -si * (qi.matrix() @ p.t), si)


def slerp(a: Quat, b: Quat, w: float) -> Quat:
    """Spherical interpolation from ``a`` (w=0) to ``b`` (w=1) on the short arc."""
    if w == 0.0:
        return a
    va, vb = a.array, b.array
    d = float(va @ vb)
    if d < 0.0:
        vb, d = -vb, -d
    if w == 1.0:
        return Quat.from_array(vb)
    if d > 1.0 - 1e-12:
        return Quat.from_array((1.0 - w) * va + w * vb)
    theta = math.acos(min(d, 1.0))
    st = math.sin(theta)
    return Quat.from_array((math.sin((1.0 - w) * theta) * va + math.sin(w * theta) * vb) / st)


def weighted_quat_mean(qs: Sequence[Quat], ws: Sequence[float]) -> Quat:
    """Normalized weighted sum of sign-aligned quaternions."""
    ws = np.asarray(ws, dtype=float)
    if len(qs) == 0 or len(qs) != len(ws):
        raise ValueError("quaternions and weights must be non-empty and equal length")
    if np.any(ws < 0.0) or not ws.sum() > 0.0:
        raise ValueError("degenerate weights")
    V = np.array([q.array for q in qs])
    signs = np.where(V @ V[0] < 0.0, -1.0, 1.0)
    acc = (ws * signs) @ V
    return Quat.from_array(acc)


@dataclass(frozen=True)
class PoseDistanceParams:
    lam: float = 1.0
    translation_normalizer: float = 1.0

    def __post_init__(self):
        if self.lam < 0.0:
            raise ValueError("invariant violation: lambda must be >= 0")
        if not self.translation_normalizer > 0.0:
            raise ValueError("invariant violation: translation_normalizer must be > 0")


def pose_distance(i: Sim3Pose, j: Sim3Pose, params: PoseDistanceParams = PoseDistanceParams()) -> float:
    """Geodesic rotation angle plus weighted normalized translation distance."""
    rot = rotation_angle_between(i.q, j.q)
    n = params.translation_normalizer
    return rot + params.lam * float(np.linalg.norm(i.t / n - j.t / n))


def pose_distance_matrix(poses: Sequence[Sim3Pose], params: PoseDistanceParams = PoseDistanceParams()) -> np.ndarray:
    """Pairwise :func:`pose_distance` for a list of poses."""
    if len(poses) == 0:
        return np.zeros((0, 0))
    Q = np.array([p.q.array for p in poses])
    ts = np.array([p.t for p in poses]) / params.translation_normalizer
    # Relative quaternion conj(q_i) * q_j, whose angle is the geodesic distance.
    w, v = Q[:, 0], Q[:, 1:]
    rw = np.abs(w[:, None] * w[None, :] + v @ v.T)
    rv = w[:, None, None] * v[None, :, :] - w[None, :, None] * v[:, None, :] - np.cross(v[:, None, :], v[None, :, :])
    rot = 2.0 * np.arctan2(np.linalg.norm(rv, axis=-1), rw)
    trans = np.linalg.norm(ts[:, None, :] - ts[None, :, :], axis=-1)
    D = rot + params.lam * trans
    np.fill_diagonal(D, 0.0)
    return 0.5 * (D + D.T)


def kabsch_umeyama(src, dst, ws=None, with_scale: bool = True) -> Sim3Pose:
    """Weighted least-squares similarity (or rigid) transform taking src onto dst.

    Minimizes ``sum_i w_i |dst_i - s R src_i - t|^2`` with ``det(R) = +1``.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError("src and dst must have the same shape")
    ws = np.ones(len(src)) if ws is None else np.asarray(ws, dtype=float).reshape(-1)
    W = ws.sum()
    if len(src) < 3 or not W > 0.0:
        raise DegenerateError("degenerate configuration")
    wn = ws / W
    mu_s = wn @ src
    mu_d = wn @ dst
    xs = src - mu_s
    xd = dst - mu_d
    sv_src = np.linalg.svd(xs * np.sqrt(wn)[:, None], compute_uv=False)
    if sv_src[0] == 0.0 or sv_src[1] <= 1e-10 * sv_src[0]:
        raise DegenerateError("degenerate configuration")
    cov = (xd * wn[:, None]).T @ xs
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0.0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_s = float(np.sum(wn * np.sum(xs ** 2, axis=1)))
        s = float(np.sum(D * np.diag(S))) / var_s
    else:
        s = 1.0
    t = mu_d - s * R @ mu_s
    return Sim3Pose.from_matrix(R, t, s)


def look_at(center, target, up=(0.0, 0.0, 1.0)) -> Sim3Pose:
    """Camera-to-world pose with an x-right, y-down, z-forward camera frame."""
    center = np.asarray(center, dtype=float)
    f = np.asarray(target, dtype=float) - center
    f /= np.linalg.norm(f)
    r = np.cross(f, np.asarray(up, dtype=float))
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    return Sim3Pose.from_matrix(np.stack([r, d, f], axis=1), center)
