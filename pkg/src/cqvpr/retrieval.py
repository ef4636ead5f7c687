"""Exact global search followed by MNN match-count re-ranking."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .formats import load_global_store, load_local_grid
from .matching import match_images


class DuplicateIdError(ValueError):
    pass


class MissingLocalStoreError(KeyError):
    def __init__(self, image_id: str):
        super().__init__(f"no local descriptors for image {image_id!r}")
        self.image_id = image_id

    def __str__(self) -> str:
        return self.args[0]


@dataclass
class RankedList:
    ids: list[str]
    scores: list[float]
    stage: str = "global"
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(zip(self.ids, self.scores))


@dataclass
class DescriptorIndex:
    matrix: np.ndarray
    ids: list[str]
    local_paths: dict[str, Path] = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.ids):
            raise ValueError(f"{len(self.ids)} ids for matrix of shape {self.matrix.shape}")
        seen: dict[str, int] = {}
        for row, image_id in enumerate(self.ids):
            if image_id in seen:
                raise DuplicateIdError(f"duplicate image id {image_id!r} at rows {seen[image_id]} and {row}")
            seen[image_id] = row

    @property
    def count(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def build_index(store_path, local_dir=None) -> DescriptorIndex:
    ids, matrix = load_global_store(store_path)
    local_paths = {}
    if local_dir is not None:
        local_paths = {i: Path(local_dir) / f"{i}.cqvl" for i in ids}
    return DescriptorIndex(matrix, ids, local_paths)


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best scores, descending; equal scores keep insertion order."""
    n = scores.size
    if k >= n:
        cand = np.arange(n)
    else:
        kth = np.partition(scores, n - k)[n - k]
        above = np.flatnonzero(scores > kth)
        ties = np.flatnonzero(scores == kth)[: k - above.size]
        cand = np.concatenate([above, ties])
    return cand[np.lexsort((cand, -scores[cand]))]


def search(index: DescriptorIndex, query: np.ndarray, k: int) -> RankedList:
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    query = np.asarray(query, dtype=np.float32)
    if index.count == 0:
        return RankedList([], [], "global", truncated=True)
    if query.shape != (index.dim,):
        raise ValueError(f"query dim {query.shape} does not match index dim {index.dim}")
    scores = index.matrix @ query
    top = _top_k(scores, k)
    return RankedList([index.ids[i] for i in top], [float(scores[i]) for i in top], "global", truncated=k > index.count)


def search_batch(index: DescriptorIndex, queries: np.ndarray, k: int) -> list[RankedList]:
    queries = np.asarray(queries, dtype=np.float32)
    if index.count == 0:
        return [RankedList([], [], "global", truncated=True) for _ in range(len(queries))]
    if queries.ndim != 2 or queries.shape[1] != index.dim:
        raise ValueError(f"queries {queries.shape} do not match index dim {index.dim}")
    scores = queries @ index.matrix.T
    out = []
    for row in scores:
        top = _top_k(row, k)
        out.append(RankedList([index.ids[i] for i in top], [float(row[i]) for i in top], "global", k > index.count))
    return out


LocalSource = Mapping[str, "np.ndarray | str | Path"] | Callable[[str], np.ndarray]


def _local_loader(stores: LocalSource) -> Callable[[str], np.ndarray]:
    if callable(stores):
        return stores

    def load(image_id: str) -> np.ndarray:
        if image_id not in stores:
            raise MissingLocalStoreError(image_id)
        value = stores[image_id]
        if isinstance(value, (str, Path)):
            if not Path(value).exists():
                raise MissingLocalStoreError(image_id)
            return load_local_grid(value)
        return np.asarray(value)

    return load


def rerank(
    query_local: np.ndarray,
    candidates: RankedList,
    local_stores: LocalSource,
    workers: int = 1,
    min_sim: float | None = None,
) -> RankedList:
    """Reorder candidates by descending MNN match count (stable on ties)."""
    load = _local_loader(local_stores)
    grids = [load(i) for i in candidates.ids]

    def score(grid: np.ndarray) -> int:
        return match_images(query_local, grid, min_sim).count

    if workers > 1 and len(grids) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            counts = list(pool.map(score, grids))
    else:
        counts = [score(g) for g in grids]
    order = sorted(range(len(counts)), key=lambda i: -counts[i])
    return RankedList([candidates.ids[i] for i in order], [counts[i] for i in order], "reranked", candidates.truncated)


RANKED_HEADER = ["query_id", "rank", "image_id", "score", "stage"]


def format_score(score, stage: str) -> str:
    return str(int(score)) if stage == "reranked" else f"{float(score):.7f}"


def ranked_to_csv(results: Sequence[tuple[str, RankedList]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RANKED_HEADER)
    for query_id, ranked in results:
        for rank, (image_id, score) in enumerate(ranked, start=1):
            writer.writerow([query_id, rank, image_id, format_score(score, ranked.stage), ranked.stage])
    return buf.getvalue()


def write_ranked_csv(path, results: Sequence[tuple[str, RankedList]]) -> None:
    Path(path).write_text(ranked_to_csv(results), encoding="utf-8")


def read_ranked_csv(path, stage: str | None = None) -> dict[str, list[str]]:
    """Ranked image ids per query, optionally restricted to one stage."""
    out: dict[str, list[tuple[int, str]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(RANKED_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            if stage is not None and row["stage"] != stage:
                continue
            out.setdefault(row["query_id"], []).append((int(row["rank"]), row["image_id"]))
    return {q: [i for _, i in sorted(rows)] for q, rows in out.items()}
