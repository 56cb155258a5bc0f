"""Sparse voxel grid: feature pooling, space-filling curve ordering, KNN lookup.

The data path is ``voxelize -> serialize -> process_serialized ->
unserialize -> knn_interpolate``.  Voxel keys follow the floor rule
``floor(p / voxel_size)``; feature anchors for interpolation are voxel
centers ``(key + 0.5) * voxel_size``.

Binary grid layout (little-endian), written by :func:`export_grid`::

    offset  size  field
    0       4     magic b"SVXG"
    4       4     uint32 format version (1)
    8       8     float64 voxel_size
    16      8     uint64 voxel count N
    24      4     uint32 feature width C
    28      1     uint8 curve kind (0 morton, 1 hilbert)
    29      3     zero padding
    32      24*N  int64 keys (N, 3), serialized order
    ...     8*N*C float64 features (N, C), serialized order
    ...     8*N   uint64 member counts, serialized order
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

MAX_BITS = 21
KNN_EPS = 1e-8


class CurveKind(str, enum.Enum):
    MORTON = "morton"
    HILBERT = "hilbert"


@dataclass
class PointFeatureCloud:
    positions: np.ndarray
    features: np.ndarray
    source: np.ndarray | None = None  # (N, 3) rows of (frame index, row, col)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        f = np.asarray(self.features, dtype=float)
        if f.ndim != 2:
            f = f.reshape(len(self.positions), -1) if len(self.positions) else f.reshape(0, 0)
        self.features = f
        if len(self.features) != len(self.positions):
            raise ValueError("positions and features must have equal lengths")
        if self.source is not None and len(self.source) != len(self.positions):
            raise ValueError("source must match positions")


@dataclass(frozen=True)
class SparseVoxelGrid:
    voxel_size: float
    keys: np.ndarray            # (N, 3) int64, unique, lexicographically sorted
    features: np.ndarray        # (N, C) pooled means
    counts: np.ndarray          # (N,)
    point_to_voxel: np.ndarray  # (P,) voxel index of every input point
    order: np.ndarray           # (N,) voxel indices sorted by curve code
    curve: CurveKind = CurveKind.MORTON

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def width(self) -> int:
        return self.features.shape[1]

    @property
    def centers(self) -> np.ndarray:
        return (self.keys + 0.5) * self.voxel_size


# --- curves -----------------------------------------------------------------

def _spread3(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _compact3(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1249249249249249)
    v = (v | (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v


def _interleave(X: np.ndarray) -> np.ndarray:
    # First axis takes the most significant bit of each triple.
    return (_spread3(X[:, 0]) << np.uint64(2)) | (_spread3(X[:, 1]) << np.uint64(1)) | _spread3(X[:, 2])


def _deinterleave(c: np.ndarray) -> np.ndarray:
    c = c.astype(np.uint64)
    return np.stack([_compact3(c >> np.uint64(2)), _compact3(c >> np.uint64(1)), _compact3(c)], axis=1).astype(np.int64)


def _axes_to_transpose(X: np.ndarray, bits: int) -> np.ndarray:
    # Skilling, "Programming the Hilbert curve" (2004), vectorized over rows.
    X = X.copy()
    M = 1 << (bits - 1)
    Q = M
    while Q > 1:
        P = Q - 1
        for i in range(3):
            hit = (X[:, i] & Q) != 0
            t = (X[:, 0] ^ X[:, i]) & P
            X[:, 0] = np.where(hit, X[:, 0] ^ P, X[:, 0] ^ t)
            if i:
                X[:, i] = np.where(hit, X[:, i], X[:, i] ^ t)
        Q >>= 1
    for i in range(1, 3):
        X[:, i] ^= X[:, i - 1]
    t = np.zeros(len(X), dtype=np.int64)
    Q = M
    while Q > 1:
        t = np.where((X[:, 2] & Q) != 0, t ^ (Q - 1), t)
        Q >>= 1
    X ^= t[:, None]
    return X


def _transpose_to_axes(X: np.ndarray, bits: int) -> np.ndarray:
    X = X.copy()
    N = 2 << (bits - 1)
    t = X[:, 2] >> 1
    for i in range(2, 0, -1):
        X[:, i] ^= X[:, i - 1]
    X[:, 0] ^= t
    Q = 2
    while Q != N:
        P = Q - 1
        for i in range(2, -1, -1):
            hit = (X[:, i] & Q) != 0
            t = (X[:, 0] ^ X[:, i]) & P
            X[:, 0] = np.where(hit, X[:, 0] ^ P, X[:, 0] ^ t)
            if i:
                X[:, i] = np.where(hit, X[:, i], X[:, i] ^ t)
        Q <<= 1
    return X


def encode_keys(keys, kind: CurveKind | str = CurveKind.MORTON, bits: int = MAX_BITS) -> np.ndarray:
    """Vectorized curve codes (uint64) for nonnegative integer keys of shape (N, 3)."""
    kind = CurveKind(kind)
    if not 1 <= bits <= MAX_BITS:
        raise ValueError(f"bits must be in [1, {MAX_BITS}]")
    K = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    if K.size and (K.min() < 0 or K.max() >= (1 << bits)):
        raise ValueError("key overflow")
    if kind is CurveKind.HILBERT:
        K = _axes_to_transpose(K, bits)
    return _interleave(K)


def decode_codes(codes, kind: CurveKind | str = CurveKind.MORTON, bits: int = MAX_BITS) -> np.ndarray:
    kind = CurveKind(kind)
    if not 1 <= bits <= MAX_BITS:
        raise ValueError(f"bits must be in [1, {MAX_BITS}]")
    c = np.asarray(codes).reshape(-1)
    if c.size and (np.any(c < 0) or np.any(c.astype(np.uint64) >= np.uint64(1 << (3 * bits)))):
        raise ValueError("code out of range")
    X = _deinterleave(c.astype(np.uint64))
    if kind is CurveKind.HILBERT:
        X = _transpose_to_axes(X, bits)
    return X


def curve_encode(key, kind: CurveKind | str = CurveKind.MORTON, bits: int = MAX_BITS) -> int:
    return int(encode_keys(np.asarray(key).reshape(1, 3), kind, bits)[0])


def curve_decode(code: int, kind: CurveKind | str = CurveKind.MORTON, bits: int = MAX_BITS) -> tuple[int, int, int]:
    if code < 0 or code >= 1 << (3 * bits):
        raise ValueError("code out of range")
    x, y, z = decode_codes(np.array([code], dtype=np.uint64), kind, bits)[0]
    return int(x), int(y), int(z)


# --- grid construction -------------------------------------------------------

def _bits_for_extent(extent: int) -> int:
    if extent >= 1 << MAX_BITS:
        raise ValueError("grid too large")
    return max(1, int(extent).bit_length())


def curve_order(keys: np.ndarray, kind: CurveKind | str = CurveKind.MORTON) -> tuple[np.ndarray, np.ndarray, int]:
    """(order, codes, bits) after shifting keys by their per-axis minimum."""
    if len(keys) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.uint64), 1
    shifted = keys - keys.min(axis=0)
    bits = _bits_for_extent(int(shifted.max()))
    codes = encode_keys(shifted, kind, bits)
    return np.argsort(codes, kind="stable"), codes, bits


def voxelize(cloud: PointFeatureCloud, voxel_size: float = 0.01,
             curve: CurveKind | str = CurveKind.MORTON) -> SparseVoxelGrid:
    """Group points by voxel and average their features."""
    if not voxel_size > 0.0:
        raise ValueError("voxel_size must be positive")
    P = cloud.positions
    if not np.all(np.isfinite(P)):
        raise ValueError("positions must be finite")
    width = cloud.features.shape[1] if cloud.features.ndim == 2 else 0
    if len(P) == 0:
        e = np.zeros(0, dtype=np.int64)
        return SparseVoxelGrid(voxel_size, np.zeros((0, 3), dtype=np.int64), np.zeros((0, width)),
                               e, e, e, CurveKind(curve))
    keys_all = np.floor(P / voxel_size).astype(np.int64)
    keys, inv, counts = np.unique(keys_all, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    sums = np.zeros((len(keys), width))
    np.add.at(sums, inv, cloud.features)
    feats = sums / counts[:, None]
    order, _, _ = curve_order(keys, curve)
    return SparseVoxelGrid(voxel_size, keys, feats, counts, inv, order, CurveKind(curve))


@dataclass(frozen=True)
class SerializedSequence:
    features: np.ndarray  # (N, C) in curve order
    order: np.ndarray     # voxel index at each sequence position
    codes: np.ndarray     # curve code at each sequence position
    kind: CurveKind
    bits: int


def serialize(grid: SparseVoxelGrid, kind: CurveKind | str | None = None) -> SerializedSequence:
    kind = grid.curve if kind is None else CurveKind(kind)
    order, codes, bits = curve_order(grid.keys, kind)
    return SerializedSequence(grid.features[order], order, codes[order], kind, bits)


def unserialize(seq: SerializedSequence) -> np.ndarray:
    """Voxel features back in grid index order."""
    out = np.empty_like(seq.features)
    out[seq.order] = seq.features
    return out


def identity_processor(x: np.ndarray) -> np.ndarray:
    return x


def moving_average_processor(x: np.ndarray) -> np.ndarray:
    """Window-3 mean along the sequence with edge clamping."""
    if len(x) == 0:
        return x.copy()
    pad = np.concatenate([x[:1], x, x[-1:]], axis=0)
    return (pad[:-2] + pad[1:-1] + pad[2:]) / 3.0


def process_serialized(seq: SerializedSequence,
                       processor: Callable[[np.ndarray], np.ndarray] = identity_processor) -> SerializedSequence:
    out = np.asarray(processor(seq.features))
    if out.shape != seq.features.shape:
        raise ValueError("shape contract violated")
    return SerializedSequence(out, seq.order, seq.codes, seq.kind, seq.bits)


def with_features(grid: SparseVoxelGrid, features: np.ndarray) -> SparseVoxelGrid:
    if features.shape != grid.features.shape:
        raise ValueError("shape contract violated")
    return SparseVoxelGrid(grid.voxel_size, grid.keys, features, grid.counts,
                           grid.point_to_voxel, grid.order, grid.curve)


def knn_interpolate(queries, grid: SparseVoxelGrid, k: int = 3) -> np.ndarray:
    """Inverse-distance weighted mean of the ``k`` nearest voxel-center features."""
    if len(grid) == 0:
        raise ValueError("no support")
    if k < 1:
        raise ValueError("k must be >= 1")
    Q = np.asarray(queries, dtype=float).reshape(-1, 3)
    k = min(k, len(grid))
    d, idx = cKDTree(grid.centers).query(Q, k=k)
    d = d.reshape(len(Q), k)
    idx = idx.reshape(len(Q), k)
    w = 1.0 / (d + KNN_EPS)
    w /= w.sum(axis=1, keepdims=True)
    out = np.einsum("qk,qkc->qc", w, grid.features[idx])
    hit = d[:, 0] < KNN_EPS
    out[hit] = grid.features[idx[hit, 0]]
    return out


def run_backend(cloud: PointFeatureCloud, voxel_size: float = 0.01,
                curve: CurveKind | str = CurveKind.MORTON,
                processor: Callable[[np.ndarray], np.ndarray] = identity_processor,
                k: int = 3) -> np.ndarray:
    """Pool, serialize, process, unserialize and interpolate back to every input point."""
    grid = voxelize(cloud, voxel_size, curve)
    seq = process_serialized(serialize(grid, curve), processor)
    return knn_interpolate(cloud.positions, with_features(grid, unserialize(seq)), k)


# --- binary io ----------------------------------------------------------------

_MAGIC = b"SVXG"
_HEADER = struct.Struct("<4sIdQIB3x")
_KIND_CODE = {CurveKind.MORTON: 0, CurveKind.HILBERT: 1}


def export_grid(grid: SparseVoxelGrid, path, kind: CurveKind | str | None = None) -> None:
    kind = grid.curve if kind is None else CurveKind(kind)
    seq = serialize(grid, kind)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, 1, grid.voxel_size, len(grid), grid.width, _KIND_CODE[kind]))
        fh.write(grid.keys[seq.order].astype("<i8").tobytes())
        fh.write(seq.features.astype("<f8").tobytes())
        fh.write(grid.counts[seq.order].astype("<u8").tobytes())


def import_grid(path) -> SparseVoxelGrid:
    """Inverse of :func:`export_grid`; voxels come back in lexicographic key order."""
    raw = Path(path).read_bytes()
    magic, version, voxel_size, n, width, kind_code = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC or version != 1:
        raise ValueError(f"{path}: not a sparse voxel grid file")
    off = _HEADER.size
    keys = np.frombuffer(raw, "<i8", 3 * n, off).reshape(n, 3)
    off += 24 * n
    feats = np.frombuffer(raw, "<f8", n * width, off).reshape(n, width)
    off += 8 * n * width
    counts = np.frombuffer(raw, "<u8", n, off).astype(np.int64)
    kind = CurveKind.HILBERT if kind_code == 1 else CurveKind.MORTON
    lex = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    keys, feats, counts = keys[lex].astype(np.int64), feats[lex].copy(), counts[lex]
    order, _, _ = curve_order(keys, kind)
    # Point membership is not stored in the file.
    return SparseVoxelGrid(float(voxel_size), keys, feats, counts,
                           np.zeros(0, dtype=np.int64), order, kind)
