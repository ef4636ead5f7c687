"""Geo-tagged datasets: manifests, synthetic generation, tuple mining, Recall@N."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("id", "path", "easting", "northing", "split")
SPLITS = ("query", "reference")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class GeoImageRecord:
    id: str
    path: Path
    easting: float
    northing: float
    split: str

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.easting, self.northing])


@dataclass
class Dataset:
    records: list[GeoImageRecord]
    root: Path = Path(".")
    _images: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    _index: dict[str, GeoImageRecord] | None = field(default=None, repr=False)

    @property
    def queries(self) -> list[GeoImageRecord]:
        return [r for r in self.records if r.split == "query"]

    @property
    def references(self) -> list[GeoImageRecord]:
        return [r for r in self.records if r.split == "reference"]

    def by_id(self) -> dict[str, GeoImageRecord]:
        if self._index is None:
            self._index = {r.id: r for r in self.records}
        return self._index

    def image(self, image_id: str) -> np.ndarray:
        """Float image in [0, 1], cached after the first read."""
        if image_id not in self._images:
            rec = self.by_id()[image_id]
            path = rec.path if rec.path.is_absolute() else self.root / rec.path
            self._images[image_id] = load_image(path)
        return self._images[image_id]


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def load_manifest(path) -> Dataset:
    path = Path(path)
    records: list[GeoImageRecord] = []
    first_line: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ManifestError(f"{path}:1: empty file, expected header {','.join(MANIFEST_COLUMNS)}")
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise ManifestError(f"{path}:1: missing column(s) {', '.join(missing)}")
        col = {c: header.index(c) for c in MANIFEST_COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ManifestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            image_id = row[col["id"]]
            if image_id in first_line:
                raise ManifestError(
                    f"{path}:{lineno}: duplicate id {image_id!r} (first seen on line {first_line[image_id]})"
                )
            try:
                east = float(row[col["easting"]])
                north = float(row[col["northing"]])
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: unparsable coordinate in {row!r}") from None
            if not (math.isfinite(east) and math.isfinite(north)):
                raise ManifestError(f"{path}:{lineno}: non-finite coordinate")
            split = row[col["split"]]
            if split not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: split must be query or reference, got {split!r}")
            first_line[image_id] = lineno
            records.append(GeoImageRecord(image_id, Path(row[col["path"]]), east, north, split))
    if not records:
        log.warning("manifest %s has no records", path)
    ds = Dataset(records, path.parent)
    log.info("loaded %s: %d queries, %d references", path, len(ds.queries), len(ds.references))
    return ds


def write_manifest(path, records: Sequence[GeoImageRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            writer.writerow([r.id, r.path.as_posix(), f"{r.easting:.3f}", f"{r.northing:.3f}", r.split])


# ---------------------------------------------------------------------------
# synthetic places


def _place_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size, 3))
    for _ in range(rng.integers(3, 6)):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(2.0, 9.0)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        img += wave[..., None] * rng.uniform(-1, 1, size=3)
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        radius = rng.uniform(0.04, 0.15)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))
        img += blob[..., None] * rng.uniform(-2, 2, size=3)
    img -= img.min()
    return img / max(img.max(), 1e-12)


def _view(rng: np.random.Generator, texture: np.ndarray, size: int, max_shift: int) -> np.ndarray:
    margin = (texture.shape[0] - size) // 2
    dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
    crop = texture[margin + dy : margin + dy + size, margin + dx : margin + dx + size]
    gain = rng.uniform(0.7, 1.3)
    cast = rng.uniform(-0.03, 0.03, size=3)
    noisy = crop * gain + cast + rng.normal(0.0, 0.03, size=crop.shape)
    return np.clip(noisy, 0.0, 1.0)


def generate_synthetic_dataset(
    out_dir,
    seed: int = 42,
    num_places: int = 50,
    views_per_place: int = 8,
    image_size: int = 56,
    spacing_m: float = 150.0,
) -> Dataset:
    """Write a procedurally textured geo-tagged dataset plus ``manifest.csv``.

    Every place gets one query view and ``views_per_place - 1`` reference views,
    all within 10 m of each other; places sit on a jittered grid at least 100 m
    apart.
    """
    if num_places < 1 or views_per_place < 2 or image_size < 1:
        raise ValueError("num_places >= 1, views_per_place >= 2 and image_size >= 1 are required")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    cols = math.ceil(math.sqrt(num_places))
    max_shift = max(1, image_size // 8)
    canvas = image_size + 2 * max_shift + 2
    jitter = min(20.0, (spacing_m - 100.0) / 2 - 5.0)
    records = []
    for place in range(num_places):
        centre = np.array([(place % cols) * spacing_m, (place // cols) * spacing_m])
        centre += rng.uniform(-jitter, jitter, size=2)
        texture = _place_texture(rng, canvas)
        for view in range(views_per_place):
            image_id = f"p{place:03d}_v{view}"
            angle, radius = rng.uniform(0, 2 * np.pi), rng.uniform(0, 4.0)
            east, north = centre + radius * np.array([np.cos(angle), np.sin(angle)])
            pixels = np.round(_view(rng, texture, image_size, max_shift) * 255).astype(np.uint8)
            rel = Path("images") / f"{image_id}.png"
            Image.fromarray(pixels, mode="RGB").save(out_dir / rel, format="PNG")
            split = "query" if view == 0 else "reference"
            records.append(GeoImageRecord(image_id, rel, round(east, 3), round(north, 3), split))
    write_manifest(out_dir / "manifest.csv", records)
    return Dataset(records, out_dir)


# ---------------------------------------------------------------------------
# training tuples


@dataclass(frozen=True)
class TrainingTuple:
    query: str
    positive: str
    negatives: tuple[str, ...]


@dataclass
class MiningResult:
    tuples: list[TrainingTuple]
    skipped_no_positive: int = 0
    skipped_no_negative: int = 0


def mine_tuples(
    dataset: Dataset,
    descriptors: Mapping[str, np.ndarray],
    num_negatives: int = 5,
    rng: np.random.Generator | None = None,
    positive_radius: float = 10.0,
    negative_radius: float = 25.0,
    hard_negatives: bool = False,
) -> MiningResult:
    """Weakly supervised (query, positive, negatives) tuples.

    The positive is the reference within ``positive_radius`` whose descriptor is
    most similar to the query's; negatives come from beyond
    ``negative_radius``, sampled uniformly (or the most similar ones when
    ``hard_negatives`` is set).
    """
    rng = rng or np.random.default_rng(0)
    refs = dataset.references
    result = MiningResult([])
    if not refs:
        result.skipped_no_positive = len(dataset.queries)
        return result
    ref_xy = np.stack([r.xy for r in refs])
    ref_ids = [r.id for r in refs]
    for q in dataset.queries:
        dist = np.linalg.norm(ref_xy - q.xy, axis=1)
        pos_idx = np.flatnonzero(dist <= positive_radius)
        if pos_idx.size == 0:
            result.skipped_no_positive += 1
            continue
        neg_idx = np.flatnonzero(dist > negative_radius)
        if neg_idx.size == 0:
            log.warning("query %s has no reference beyond %.1f m; skipped", q.id, negative_radius)
            result.skipped_no_negative += 1
            continue
        qd = descriptors[q.id]
        sims = np.array([float(np.dot(qd, descriptors[ref_ids[i]])) for i in pos_idx])
        positive = ref_ids[pos_idx[int(np.argmax(sims))]]
        n = min(num_negatives, neg_idx.size)
        if hard_negatives:
            neg_sims = np.array([float(np.dot(qd, descriptors[ref_ids[i]])) for i in neg_idx])
            chosen = neg_idx[np.argsort(-neg_sims, kind="stable")[:n]]
        else:
            chosen = rng.choice(neg_idx, size=n, replace=False)
        result.tuples.append(TrainingTuple(q.id, positive, tuple(ref_ids[i] for i in chosen)))
    return result


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalConfig:
    distance_threshold_m: float = 25.0
    recall_ns: tuple[int, ...] = (1, 5, 10, 20)
    top_k_retrieve: int = 100
    rerank_enabled: bool = True

    def __post_init__(self):
        if not self.distance_threshold_m > 0:
            raise ValueError("distance threshold must be positive")
        if list(self.recall_ns) != sorted(self.recall_ns) or not self.recall_ns or self.recall_ns[0] < 1:
            raise ValueError(f"recall_ns must be positive and ascending, got {self.recall_ns}")


def recall_at_n(
    ranked: Mapping[str, Sequence[str]], dataset: Dataset, config: EvalConfig = EvalConfig()
) -> dict[int, float]:
    """Fraction of queries with a reference within the threshold among the top N."""
    queries = dataset.queries
    if not queries:
        return {n: 0.0 for n in config.recall_ns}
    coords = {r.id: r.xy for r in dataset.records}
    first_hit: list[float] = []
    for q in queries:
        if q.id not in ranked:
            raise KeyError(f"query {q.id!r} has no ranked result")
        rank = math.inf
        for pos, image_id in enumerate(ranked[q.id]):
            if np.linalg.norm(coords[image_id] - q.xy) <= config.distance_threshold_m:
                rank = pos
                break
        first_hit.append(rank)
    hits = np.asarray(first_hit)
    return {n: float(np.mean(hits < n)) for n in config.recall_ns}


def write_metrics_csv(path, recalls: Mapping[int, float], metric: str = "recall") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "N", "value"])
        for n, value in recalls.items():
            writer.writerow([metric, n, f"{value:.6f}"])
