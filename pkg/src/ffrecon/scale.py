"""Scale estimators: robust L1 scale, median depth ratio, per-frame metric median."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ScaleUnobservable(ValueError):
    pass


@dataclass
class Correspondences:
    src: np.ndarray
    dst: np.ndarray
    ws: np.ndarray | None = None

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=float).reshape(-1, 3)
        self.dst = np.asarray(self.dst, dtype=float).reshape(-1, 3)
        if self.ws is None:
            self.ws = np.ones(len(self.src))
        self.ws = np.asarray(self.ws, dtype=float).reshape(-1)
        if not (len(self.src) == len(self.dst) == len(self.ws)):
            raise ValueError("src, dst and ws must have equal lengths")


def roe_breakpoints(src, dst, ws=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate breakpoints ``dst/src`` with weights ``w * |src|``.

    Pairs with non-positive weight or non-finite coordinates are dropped, as
    are coordinates with ``src == 0`` (they do not depend on the scale).
    """
    c = Correspondences(src, dst, ws)
    keep = (c.ws > 0.0) & np.all(np.isfinite(c.src), axis=1) & np.all(np.isfinite(c.dst), axis=1)
    s, d = c.src[keep], c.dst[keep]
    w = np.repeat(c.ws[keep], 3)
    s, d = s.reshape(-1), d.reshape(-1)
    nz = s != 0.0
    return d[nz] / s[nz], w[nz] * np.abs(s[nz])


def roe_objective(scale: float, src, dst, ws=None) -> float:
    """``sum_i w_i |scale * src_i - dst_i|_1``."""
    c = Correspondences(src, dst, ws)
    keep = (c.ws > 0.0) & np.all(np.isfinite(c.src), axis=1) & np.all(np.isfinite(c.dst), axis=1)
    r = np.abs(scale * c.src[keep] - c.dst[keep]).sum(axis=1)
    return float(c.ws[keep] @ r)


def roe_scale(src, dst, ws=None) -> float:
    """Scale ``s > 0`` minimizing the confidence-weighted L1 residual of ``s*src - dst``.

    The objective is convex and piecewise linear in ``s`` with kinks at the
    per-coordinate ratios, so its minimizer is a weighted median of those
    ratios.  When the optimal interval is a whole segment the smaller end is
    returned.
    """
    b, w = roe_breakpoints(src, dst, ws)
    if len(b) == 0:
        raise ScaleUnobservable("scale unobservable")
    order = np.argsort(b, kind="stable")
    b, w = b[order], w[order]
    cw = np.cumsum(w)
    total = cw[-1]
    # Smallest breakpoint where the left mass reaches half the total.
    i = int(np.searchsorted(cw, 0.5 * total * (1.0 - 1e-15), side="left"))
    i = min(i, len(b) - 1)
    s = float(b[i])
    if not s > 0.0:
        raise ScaleUnobservable("scale unobservable")
    return s


def _median(x: np.ndarray) -> float:
    # Even-length median is the mean of the two central order statistics.
    return float(np.median(x))


def median_scale(src_depths, dst_depths) -> float:
    """Ratio of the median valid ``dst`` depth to the median valid ``src`` depth."""
    a = np.asarray(src_depths, dtype=float).reshape(-1)
    b = np.asarray(dst_depths, dtype=float).reshape(-1)
    a = a[np.isfinite(a) & (a > 0.0)]
    b = b[np.isfinite(b) & (b > 0.0)]
    if len(a) == 0 or len(b) == 0:
        raise ValueError("no valid depths")
    return _median(b) / _median(a)


def metric_factor_from_frames(per_frame_factors) -> float:
    """Median of per-frame metric scale factors."""
    f = np.asarray(per_frame_factors, dtype=float).reshape(-1)
    if len(f) == 0:
        raise ValueError("no frames")
    return _median(f)
