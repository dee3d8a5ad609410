"""Exact (flat) cosine top-k retrieval over the embedded sample space.

Index file layout (little-endian)::

    b"NAVX"  version byte (0x01)
    u32 dim, u16+utf-8 provider id, u16+utf-8 model id, u64 count
    count * (i64 sentence id, dim * f64)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .embeddings import EmbeddingVector
from .errors import DegenerateVectorError, IndexBuildError, IntegrityError
from .io import atomic_write_bytes

INDEX_MAGIC = b"NAVX"
INDEX_VERSION = 1


@dataclass(frozen=True)
class RetrievalHit:
    sentence_id: int
    score: float
    rank: int


class VectorIndex:
    """Immutable flat index. Build with :func:`build_index`."""

    def __init__(self, ids: np.ndarray, matrix: np.ndarray, fingerprint: tuple[str, str]):
        self._ids = ids
        self._matrix = matrix
        self._matrix.setflags(write=False)
        self._ids.setflags(write=False)
        norms = np.sqrt(np.einsum("ij,ij->i", matrix, matrix))
        if np.any(norms == 0.0):
            bad = int(ids[np.argmax(norms == 0.0)])
            raise DegenerateVectorError(f"stored vector for id {bad} has zero norm")
        self._norms = norms
        self.fingerprint = fingerprint

    @property
    def dim(self) -> int:
        return self._matrix.shape[1]

    @property
    def ids(self) -> list[int]:
        return self._ids.tolist()

    def __len__(self) -> int:
        return len(self._ids)

    def vector(self, sentence_id: int) -> np.ndarray:
        pos = np.flatnonzero(self._ids == sentence_id)
        if not len(pos):
            raise KeyError(sentence_id)
        return self._matrix[pos[0]].copy()

    def save(self, path: str | Path) -> None:
        provider, model = self.fingerprint
        parts = [
            INDEX_MAGIC,
            bytes([INDEX_VERSION]),
            struct.pack("<I", self.dim),
            _pstr(provider),
            _pstr(model),
            struct.pack("<Q", len(self)),
        ]
        rec = np.zeros(len(self), dtype=[("id", "<i8"), ("v", "<f8", (self.dim,))])
        rec["id"] = self._ids
        rec["v"] = self._matrix
        parts.append(rec.tobytes())
        atomic_write_bytes(path, b"".join(parts))

    @classmethod
    def load(cls, path: str | Path, expected: tuple[str, str] | None = None) -> "VectorIndex":
        data = Path(path).read_bytes()
        if data[:4] != INDEX_MAGIC:
            raise IntegrityError(f"{path}: not an index file")
        if data[4] != INDEX_VERSION:
            raise IntegrityError(f"{path}: unsupported index version {data[4]}")
        (dim,) = struct.unpack_from("<I", data, 5)
        pos = 9
        provider, pos = _ustr(data, pos)
        model, pos = _ustr(data, pos)
        (count,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        if expected is not None and (provider, model) != tuple(expected):
            raise IntegrityError(
                f"{path}: index built with {provider}/{model}, run expects {expected[0]}/{expected[1]}"
            )
        dt = np.dtype([("id", "<i8"), ("v", "<f8", (dim,))])
        if len(data) - pos != count * dt.itemsize:
            raise IntegrityError(f"{path}: truncated index ({len(data) - pos} payload bytes)")
        rec = np.frombuffer(data, dtype=dt, count=count, offset=pos)
        return cls(rec["id"].astype(np.int64), rec["v"].astype(np.float64), (provider, model))


def _pstr(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def _ustr(data: bytes, pos: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<H", data, pos)
    return data[pos + 2 : pos + 2 + n].decode("utf-8"), pos + 2 + n


def build_index(
    items: Iterable[tuple[int, EmbeddingVector | np.ndarray]],
    fingerprint: tuple[str, str] | None = None,
) -> VectorIndex:
    """Build an index from ``(sentence_id, vector)`` pairs.

    The provider fingerprint comes from the EmbeddingVectors themselves, or
    ``fingerprint`` when raw arrays are passed.
    """
    ids: list[int] = []
    rows: list[np.ndarray] = []
    seen: set[int] = set()
    fp = fingerprint
    dim = None
    for sid, vec in items:
        if isinstance(vec, EmbeddingVector):
            vfp = (vec.provider_id, vec.model_id)
            if fp is None:
                fp = vfp
            elif vfp != fp:
                raise IndexBuildError(f"id {sid}: fingerprint {vfp} differs from {fp}")
            arr = np.asarray(vec.values, dtype=np.float64)
        else:
            arr = np.asarray(vec, dtype=np.float64)
        if arr.ndim != 1:
            raise IndexBuildError(f"id {sid}: vector must be one-dimensional")
        if dim is None:
            dim = arr.shape[0]
        elif arr.shape[0] != dim:
            raise IndexBuildError(f"id {sid}: dimension {arr.shape[0]} != {dim}")
        if sid in seen:
            raise IndexBuildError(f"duplicate sentence id {sid}")
        seen.add(sid)
        ids.append(int(sid))
        rows.append(arr)
    if not ids:
        raise IndexBuildError("cannot build an empty index")
    return VectorIndex(
        np.array(ids, dtype=np.int64), np.vstack(rows), fp or ("unknown", "unknown")
    )


def cosine_scores(index: VectorIndex, query: np.ndarray) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    qn = np.sqrt(np.dot(q, q))
    if qn == 0.0:
        raise DegenerateVectorError("query vector has zero norm")
    return (index._matrix @ q) / (index._norms * qn)


def query_top_k(
    index: VectorIndex, query: EmbeddingVector | np.ndarray, k: int
) -> list[RetrievalHit]:
    """Top-``k`` entries by cosine similarity; ties go to the smaller id."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    q = np.asarray(query.values if isinstance(query, EmbeddingVector) else query, dtype=np.float64)
    if q.shape != (index.dim,):
        raise ValueError(f"query dim {q.shape} does not match index dim {index.dim}")
    scores = cosine_scores(index, q)
    order = np.lexsort((index._ids, -scores))[: min(k, len(index))]
    return [
        RetrievalHit(int(index._ids[i]), float(scores[i]), rank)
        for rank, i in enumerate(order, start=1)
    ]
