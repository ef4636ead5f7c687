"""Binary feature/descriptor files and heatmap images.

All integers are little-endian u32 and all payloads little-endian float32.

CQVF  pixel-feature grid: ``"CQVF" version=1 G G D`` + ``G*G*D`` floats
CQVD  global descriptor store: ``"CQVD" version=1 count dim`` + ``count*dim``
      floats + ``count`` newline-terminated UTF-8 image ids
CQVL  local descriptor grid: ``"CQVL" U U D`` + ``U*U*D`` floats
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .autograd import Tensor

VERSION = 1
_F32 = np.dtype("<f4")


class FormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: offset {offset}: {message}")
        self.path = str(path)
        self.offset = offset


def _read(path) -> bytes:
    return Path(path).read_bytes()


def _header(raw: bytes, path, magic: bytes, nints: int) -> tuple[int, ...]:
    if raw[:4] != magic:
        raise FormatError(path, 0, f"bad magic {raw[:4]!r}, expected {magic!r}")
    need = 4 + 4 * nints
    if len(raw) < need:
        raise FormatError(path, len(raw), f"truncated header ({len(raw)} of {need} bytes)")
    return struct.unpack(f"<{nints}I", raw[4:need])


def _payload(raw: bytes, path, offset: int, count: int) -> np.ndarray:
    end = offset + 4 * count
    if len(raw) < end:
        raise FormatError(path, len(raw), f"truncated payload: need {end} bytes, file has {len(raw)}")
    return np.frombuffer(raw, dtype=_F32, count=count, offset=offset)


def save_pixel_features(path, grid: np.ndarray) -> None:
    grid = np.asarray(grid)
    if grid.ndim != 3 or grid.shape[0] != grid.shape[1]:
        raise ValueError(f"pixel features must be G x G x D, got {grid.shape}")
    g, _, d = grid.shape
    Path(path).write_bytes(
        b"CQVF" + struct.pack("<4I", VERSION, g, g, d) + np.ascontiguousarray(grid, dtype=_F32).tobytes()
    )


def load_precomputed_features(path, grid_size: int | None = None, embed_dim: int | None = None) -> Tensor:
    """Read a CQVF file as a ``G x G x D_C`` tensor, optionally checking dims."""
    raw = _read(path)
    version, g1, g2, d = _header(raw, path, b"CQVF", 4)
    if version != VERSION:
        raise FormatError(path, 4, f"unsupported version {version}")
    if grid_size is not None and (g1, g2) != (grid_size, grid_size):
        raise FormatError(path, 8, f"grid {g1}x{g2} does not match configured {grid_size}x{grid_size}")
    if embed_dim is not None and d != embed_dim:
        raise FormatError(path, 16, f"feature dim {d} does not match configured {embed_dim}")
    data = _payload(raw, path, 20, g1 * g2 * d)
    if len(raw) != 20 + data.nbytes:
        raise FormatError(path, 20 + data.nbytes, "trailing bytes after payload")
    return Tensor(data.reshape(g1, g2, d).copy())


def save_global_store(path, ids: Sequence[str], descriptors: np.ndarray) -> None:
    descriptors = np.asarray(descriptors, dtype=_F32)
    if descriptors.ndim != 2 or descriptors.shape[0] != len(ids):
        raise ValueError(f"{len(ids)} ids for descriptor matrix {descriptors.shape}")
    for i in ids:
        if "\n" in i:
            raise ValueError(f"image id {i!r} contains a newline")
    count, dim = descriptors.shape
    body = b"CQVD" + struct.pack("<3I", VERSION, count, dim) + np.ascontiguousarray(descriptors).tobytes()
    body += "".join(f"{i}\n" for i in ids).encode("utf-8")
    Path(path).write_bytes(body)


def load_global_store(path) -> tuple[list[str], np.ndarray]:
    raw = _read(path)
    version, count, dim = _header(raw, path, b"CQVD", 3)
    if version != VERSION:
        raise FormatError(path, 4, f"unsupported version {version}")
    data = _payload(raw, path, 16, count * dim).reshape(count, dim).copy()
    tail_at = 16 + data.nbytes
    try:
        tail = raw[tail_at:].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(path, tail_at + exc.start, "image ids are not valid UTF-8") from None
    ids = tail.split("\n")
    if ids[-1] != "" or len(ids) - 1 != count:
        raise FormatError(path, len(raw), f"expected {count} newline-terminated ids, found {len(ids) - 1}")
    return ids[:-1], data


def save_local_grid(path, grid: np.ndarray) -> None:
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise ValueError(f"local grid must be U x U x D, got {grid.shape}")
    u1, u2, d = grid.shape
    Path(path).write_bytes(b"CQVL" + struct.pack("<3I", u1, u2, d) + np.ascontiguousarray(grid, dtype=_F32).tobytes())


def load_local_grid(path) -> np.ndarray:
    raw = _read(path)
    u1, u2, d = _header(raw, path, b"CQVL", 3)
    data = _payload(raw, path, 16, u1 * u2 * d)
    if len(raw) != 16 + data.nbytes:
        raise FormatError(path, 16 + data.nbytes, "trailing bytes after payload")
    return data.reshape(u1, u2, d).copy()


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = _read(path)
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise FormatError(path, 0, "not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def export_heatmaps(heatmap: np.ndarray, out_dir) -> list[Path]:
    """One min-max normalised 8-bit PGM per query slice, ``heatmap_q<k>.pgm``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for k, hm in enumerate(np.asarray(heatmap, dtype=np.float64)):
        lo, hi = hm.min(), hm.max()
        scaled = np.zeros_like(hm) if hi <= lo else (hm - lo) / (hi - lo)
        path = out_dir / f"heatmap_q{k}.pgm"
        write_pgm(path, np.round(scaled * 255.0))
        written.append(path)
    return written
