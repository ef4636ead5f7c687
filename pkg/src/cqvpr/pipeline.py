"""Dataset-level extraction, retrieval and evaluation glue."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, EvalConfig, recall_at_n
from .formats import save_global_store, save_local_grid
from .model import CQVPRModel
from .retrieval import DescriptorIndex, RankedList, rerank, search_batch


@dataclass
class Descriptors:
    ids: list[str]
    globals: np.ndarray  # count x dim, float32
    locals: dict[str, np.ndarray]

    def global_map(self) -> dict[str, np.ndarray]:
        return dict(zip(self.ids, self.globals))

    def subset(self, ids: Sequence[str]) -> "Descriptors":
        pos = {i: n for n, i in enumerate(self.ids)}
        rows = [pos[i] for i in ids]
        return Descriptors(list(ids), self.globals[rows], {i: self.locals[i] for i in ids if i in self.locals})


def describe_dataset(
    model: CQVPRModel, dataset: Dataset, ids: Sequence[str] | None = None, local: bool = True, workers: int = 1
) -> Descriptors:
    """Global (and optionally local) descriptors for ``ids`` in manifest order."""
    ids = [r.id for r in dataset.records] if ids is None else list(ids)
    images = [dataset.image(i) for i in ids]
    if workers > 1 and len(ids) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda im: model.describe(im, local=local), images))
    else:
        results = [model.describe(im, local=local) for im in images]
    dim = model.config.fused_dim
    globals_ = np.stack([g for g, _ in results]) if results else np.zeros((0, dim), np.float32)
    locals_ = {i: loc for i, (_, loc) in zip(ids, results) if loc is not None}
    return Descriptors(ids, globals_, locals_)


def write_stores(out_dir, dataset: Dataset, desc: Descriptors) -> dict[str, Path]:
    """Write ``database.cqvd``, ``queries.cqvd`` and ``local/<id>.cqvl`` files."""
    out_dir = Path(out_dir)
    local_dir = out_dir / "local"
    local_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, records in (("database", dataset.references), ("queries", dataset.queries)):
        sub = desc.subset([r.id for r in records])
        paths[name] = out_dir / f"{name}.cqvd"
        dim = desc.globals.shape[1]
        save_global_store(paths[name], sub.ids, sub.globals.reshape(len(sub.ids), dim))
    for image_id, grid in desc.locals.items():
        save_local_grid(local_dir / f"{image_id}.cqvl", grid)
    paths["local"] = local_dir
    return paths


def retrieve(
    index: DescriptorIndex,
    query_ids: Sequence[str],
    query_globals: np.ndarray,
    k: int = 100,
    query_locals=None,
    local_stores=None,
    workers: int = 1,
) -> list[tuple[str, RankedList, RankedList | None]]:
    """Global top-k per query, then MNN re-ranking when local data is supplied."""
    ranked = search_batch(index, query_globals, k) if len(query_ids) else []
    out = []
    for qid, glob in zip(query_ids, ranked):
        reranked = None
        if query_locals is not None:
            reranked = rerank(query_locals[qid], glob, local_stores, workers=workers)
        out.append((qid, glob, reranked))
    return out


def evaluate_model(
    model: CQVPRModel, dataset: Dataset, config: EvalConfig = EvalConfig(), workers: int = 1
) -> dict[str, dict[int, float]]:
    """Recall@N of the global stage and, if enabled, the re-ranked stage."""
    desc = describe_dataset(model, dataset, local=config.rerank_enabled, workers=workers)
    refs = desc.subset([r.id for r in dataset.references])
    queries = desc.subset([r.id for r in dataset.queries])
    index = DescriptorIndex(refs.globals, refs.ids)
    results = retrieve(
        index,
        queries.ids,
        queries.globals,
        k=config.top_k_retrieve,
        query_locals=queries.locals if config.rerank_enabled else None,
        local_stores=refs.locals,
        workers=workers,
    )
    metrics = {"global": recall_at_n({q: g.ids for q, g, _ in results}, dataset, config)}
    if config.rerank_enabled:
        metrics["reranked"] = recall_at_n({q: r.ids for q, _, r in results}, dataset, config)
    return metrics
