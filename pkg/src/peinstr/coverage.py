"""Reference semantics of the edge bitmap."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

_BUCKETS = np.zeros(256, dtype=np.uint8)
_BUCKETS[1] = 1
_BUCKETS[2] = 2
_BUCKETS[3] = 4
_BUCKETS[4:8] = 8
_BUCKETS[8:16] = 16
_BUCKETS[16:32] = 32
_BUCKETS[32:128] = 64
_BUCKETS[128:] = 128


class NewBits(enum.IntEnum):
    None_ = 0
    NewHit = 1
    NewEdge = 2


@dataclass
class CoverageMap:
    bitmap: np.ndarray
    map_size_log2: int
    linear: Optional[np.ndarray] = None  # one bool per plan point

    @property
    def size(self) -> int:
        return 1 << self.map_size_log2

    @classmethod
    def empty(cls, map_size_log2: int, points: Optional[int] = None) -> "CoverageMap":
        lin = np.zeros(points, dtype=bool) if points is not None else None
        return cls(np.zeros(1 << map_size_log2, dtype=np.uint8), map_size_log2, lin)

    def edges(self) -> set[int]:
        return set(np.flatnonzero(self.bitmap).tolist())

    def linear_bytes(self) -> bytes:
        """Linear bitset packed LSB-first, as stored in the feedback section."""
        if self.linear is None:
            return b""
        return np.packbits(self.linear, bitorder="little").tobytes()


def simulate_path(ids: Iterable[int], map_size_log2: int, *, saturate: bool = True,
                  points: Optional[Sequence[int]] = None, n_points: Optional[int] = None) -> CoverageMap:
    """Replay a block-id sequence through the edge update rule.

    ``points`` optionally gives, per visited id, the index of the plan point
    so the linear bitset can be filled in (``n_points`` sets its length).
    """
    mask = (1 << map_size_log2) - 1
    counts = np.zeros(1 << map_size_log2, dtype=np.int64)
    prev = 0
    for cur in ids:
        counts[(cur ^ prev) & mask] += 1
        prev = cur >> 1
    if saturate:
        bitmap = np.minimum(counts, 255).astype(np.uint8)
    else:
        bitmap = (counts & 0xFF).astype(np.uint8)
    cov = CoverageMap(bitmap, map_size_log2)
    if n_points is not None:
        cov.linear = np.zeros(n_points, dtype=bool)
        if points is not None:
            cov.linear[list(points)] = True
    return cov


def final_prev(ids: Sequence[int]) -> int:
    return ids[-1] >> 1 if ids else 0


def classify_counts(bitmap: np.ndarray | bytes) -> np.ndarray:
    arr = np.frombuffer(bitmap, dtype=np.uint8) if isinstance(bitmap, (bytes, bytearray, memoryview)) else bitmap
    return _BUCKETS[arr]


def has_new_bits(classified: np.ndarray, virgin: np.ndarray) -> NewBits:
    """Compare against ``virgin`` and clear the bits just seen (in place)."""
    hit = classified & virgin
    if not hit.any():
        return NewBits.None_
    nz = np.flatnonzero(hit)
    result = NewBits.NewEdge if (virgin[nz] == 0xFF).any() else NewBits.NewHit
    virgin &= ~classified
    return result


def update_virgin(bitmap: np.ndarray, virgin: np.ndarray) -> NewBits:
    """``has_new_bits(classify_counts(bitmap), virgin)`` touching only non-zero cells."""
    nz = np.flatnonzero(bitmap)
    if nz.size == 0:
        return NewBits.None_
    cls = _BUCKETS[bitmap[nz]]
    v = virgin[nz]
    hit = cls & v
    if not hit.any():
        return NewBits.None_
    result = NewBits.NewEdge if (v[hit != 0] == 0xFF).any() else NewBits.NewHit
    virgin[nz] = v & ~cls
    return result


def virgin_map(map_size_log2: int) -> np.ndarray:
    return np.full(1 << map_size_log2, 0xFF, dtype=np.uint8)


def count_non_virgin(virgin: np.ndarray) -> int:
    return int(np.count_nonzero(virgin != 0xFF))
