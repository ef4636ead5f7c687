"""Mutual-nearest-neighbour matching and match-count scoring."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

DEFAULT_BLOCK_ROWS = 1024


@dataclass(frozen=True)
class MatchSet:
    index_a: np.ndarray
    index_b: np.ndarray
    similarity: np.ndarray

    @property
    def count(self) -> int:
        return int(self.index_a.size)

    @property
    def pairs(self) -> list[tuple[int, int, float]]:
        return [(int(i), int(j), float(s)) for i, j, s in zip(self.index_a, self.index_b, self.similarity)]

    def __len__(self) -> int:
        return self.count

    @classmethod
    def empty(cls) -> "MatchSet":
        return cls(np.empty(0, np.intp), np.empty(0, np.intp), np.empty(0))


def _mnn_from_blocks(blocks: Iterable[tuple[int, np.ndarray]], m: int, n: int, min_sim: float | None) -> MatchSet:
    """Core MNN pass over row blocks ``(row_offset, S[rows])`` of an ``m x n`` matrix.

    Ties resolve to the lowest index on both axes: ``argmax`` returns the first
    maximum within a block, and a later block only takes over a column when it
    is strictly better.
    """
    row_best = np.empty(m, dtype=np.intp)
    row_val = None
    col_val = np.full(n, -np.inf)
    col_best = np.zeros(n, dtype=np.intp)
    for start, block in blocks:
        stop = start + block.shape[0]
        if row_val is None:
            row_val = np.empty(m, dtype=block.dtype)
        rb = np.argmax(block, axis=1)
        row_best[start:stop] = rb
        row_val[start:stop] = block[np.arange(block.shape[0]), rb]
        cb = np.argmax(block, axis=0)
        cv = block[cb, np.arange(n)]
        better = cv > col_val
        col_val[better] = cv[better]
        col_best[better] = cb[better] + start
    rows = np.arange(m)
    mutual = col_best[row_best] == rows
    if min_sim is not None:
        mutual &= row_val >= min_sim
    ia = rows[mutual]
    return MatchSet(ia, row_best[ia], row_val[ia].astype(np.float64))


def _row_blocks(s: np.ndarray, block_rows: int) -> Iterator[tuple[int, np.ndarray]]:
    for start in range(0, s.shape[0], block_rows):
        yield start, s[start : start + block_rows]


def mnn_match(s: np.ndarray, min_sim: float | None = None, block_rows: int = DEFAULT_BLOCK_ROWS) -> MatchSet:
    """Mutual nearest neighbours of a similarity matrix, ordered by row index."""
    s = np.asarray(s)
    if s.ndim != 2:
        raise ValueError(f"similarity matrix must be 2-D, got shape {s.shape}")
    m, n = s.shape
    if m == 0 or n == 0:
        return MatchSet.empty()
    return _mnn_from_blocks(_row_blocks(s, block_rows), m, n, min_sim)


def match_descriptors(
    a: np.ndarray, b: np.ndarray, min_sim: float | None = None, block_rows: int = DEFAULT_BLOCK_ROWS
) -> MatchSet:
    """MNN between two ``n x d`` descriptor sets; cosine similarity in float32, row-tiled."""
    a = np.ascontiguousarray(a, dtype=np.float32)
    b = np.ascontiguousarray(b, dtype=np.float32)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"descriptor sets {a.shape} and {b.shape} are incompatible")
    if a.shape[0] == 0 or b.shape[0] == 0:
        return MatchSet.empty()
    bt = b.T.copy()
    blocks = ((start, a[start : start + block_rows] @ bt) for start in range(0, a.shape[0], block_rows))
    return _mnn_from_blocks(blocks, a.shape[0], b.shape[0], min_sim)


def match_images(
    local_a: np.ndarray, local_b: np.ndarray, min_sim: float | None = None, block_rows: int = DEFAULT_BLOCK_ROWS
) -> MatchSet:
    """Match two ``U x U x D`` local descriptor grids."""
    if local_a.ndim != 3 or local_a.shape[2:] != local_b.shape[2:] or local_b.ndim != 3:
        raise ValueError(f"local grids {local_a.shape} and {local_b.shape} are incompatible")
    d = local_a.shape[2]
    return match_descriptors(local_a.reshape(-1, d), local_b.reshape(-1, d), min_sim, block_rows)
