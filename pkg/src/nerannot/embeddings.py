"""Sentence embeddings: a remote OpenAI-style provider, a hashed local test
embedder, and a write-through content-addressed cache.

Cache file layout (all integers little-endian)::

    header   b"NAEC" + version byte (0x01)
    record   u32 payload length, then payload:
               32 bytes  sha256 key
               u16 + utf-8   provider id
               u16 + utf-8   model id
               u32 + utf-8   exact text
               u32           dim
               dim * f64     vector

Records are append-only; a later record for the same key wins. A torn
trailing record (crash mid-append) is ignored on load.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import httpx
from filelock import FileLock

from ._http import post_json
from .errors import ConfigError, IntegrityError, ProtocolError

log = logging.getLogger(__name__)

CACHE_MAGIC = b"NAEC"
CACHE_VERSION = 1


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    provider_id: str
    model_id: str

    def __post_init__(self):
        if not self.values:
            raise ValueError("empty embedding")
        if not all(math.isfinite(v) for v in self.values):
            raise IntegrityError("embedding contains non-finite values")

    @property
    def dim(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class ProviderSpec:
    kind: str  # "remote" or "local-test"
    model_id: str
    dim: int
    endpoint: str | None = None
    batch_size: int = 64
    api_key_env: str = "ANNOTATOR_EMBED_KEY"
    max_in_flight: int = 4
    timeout: float = 60.0

    def __post_init__(self):
        if self.kind not in ("remote", "local-test"):
            raise ConfigError(f"unknown embedding provider kind {self.kind!r}")
        if self.kind == "remote" and not self.endpoint:
            raise ConfigError("remote embedding provider needs an endpoint")
        if self.dim <= 0 or self.batch_size <= 0 or self.max_in_flight <= 0:
            raise ConfigError("dim, batch_size and max_in_flight must be positive")

    @property
    def provider_id(self) -> str:
        return "local-test" if self.kind == "local-test" else f"remote:{self.endpoint}"

    @classmethod
    def local_test(cls, dim: int = 64) -> "ProviderSpec":
        return cls(kind="local-test", model_id=f"hashed-bow-{dim}", dim=dim)


def sentence_text(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


def _hash64(token: str, key: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=key).digest(), "little")


def local_test_embed(text: str, dim: int) -> EmbeddingVector:
    """Hashed bag-of-tokens vector, L2-normalised.

    Each whitespace token lands in bucket ``h1(token) % dim`` and adds +1 or -1
    there depending on the low bit of an independent hash ``h2(token)``. Signed
    contributions can cancel exactly (two tokens, one bucket, opposite signs);
    only then the signs are dropped and the plain bucket counts are used, so
    every non-empty text gets a unit vector.
    """
    if dim < 8:
        raise ConfigError(f"local test embedder needs dim >= 8, got {dim}")
    tokens = text.split()
    if not tokens:
        raise ConfigError("cannot embed empty text")
    acc = [0.0] * dim
    counts = [0.0] * dim
    for tok in tokens:
        bucket = _hash64(tok, b"nerannot-bucket") % dim
        acc[bucket] += 1.0 if _hash64(tok, b"nerannot-sign") & 1 else -1.0
        counts[bucket] += 1.0
    if not any(acc):
        acc = counts
    norm = math.sqrt(math.fsum(v * v for v in acc))
    return EmbeddingVector(tuple(v / norm for v in acc), "local-test", f"hashed-bow-{dim}")


def cache_key(provider_id: str, model_id: str, text: str) -> bytes:
    return hashlib.sha256(json.dumps([provider_id, model_id, text]).encode("utf-8")).digest()


def _pack_str(s: str, fmt: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack(fmt, len(b)) + b


class EmbeddingCache:
    """Content-addressed embedding store.

    ``path=None`` keeps everything in memory. Readers work off an in-memory
    map; appends to the backing file are serialized by a thread lock and a
    sidecar file lock, so several processes can share one cache file.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[bytes, tuple[str, EmbeddingVector]] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def __len__(self) -> int:
        return len(self._entries)

    def _load(self) -> None:
        data = self.path.read_bytes()
        if len(data) < 5 or data[:4] != CACHE_MAGIC:
            raise IntegrityError(f"{self.path}: not an embedding cache file")
        if data[4] != CACHE_VERSION:
            raise IntegrityError(f"{self.path}: unsupported cache version {data[4]}")
        pos = 5
        while pos < len(data):
            if pos + 4 > len(data):
                break
            (n,) = struct.unpack_from("<I", data, pos)
            if pos + 4 + n > len(data):
                log.warning("%s: ignoring torn trailing record at byte %d", self.path, pos)
                break
            key, text, vec = self._decode(data[pos + 4 : pos + 4 + n])
            self._entries[key] = (text, vec)
            pos += 4 + n

    @staticmethod
    def _decode(buf: bytes) -> tuple[bytes, str, EmbeddingVector]:
        key = buf[:32]
        pos = 32
        (n,) = struct.unpack_from("<H", buf, pos)
        provider = buf[pos + 2 : pos + 2 + n].decode("utf-8")
        pos += 2 + n
        (n,) = struct.unpack_from("<H", buf, pos)
        model = buf[pos + 2 : pos + 2 + n].decode("utf-8")
        pos += 2 + n
        (n,) = struct.unpack_from("<I", buf, pos)
        text = buf[pos + 4 : pos + 4 + n].decode("utf-8")
        pos += 4 + n
        (dim,) = struct.unpack_from("<I", buf, pos)
        values = struct.unpack_from(f"<{dim}d", buf, pos + 4)
        return key, text, EmbeddingVector(tuple(values), provider, model)

    @staticmethod
    def _encode(key: bytes, text: str, vec: EmbeddingVector) -> bytes:
        payload = b"".join(
            (
                key,
                _pack_str(vec.provider_id, "<H"),
                _pack_str(vec.model_id, "<H"),
                _pack_str(text, "<I"),
                struct.pack("<I", vec.dim),
                struct.pack(f"<{vec.dim}d", *vec.values),
            )
        )
        return struct.pack("<I", len(payload)) + payload

    def get(self, provider_id: str, model_id: str, text: str) -> EmbeddingVector | None:
        hit = self._entries.get(cache_key(provider_id, model_id, text))
        if hit is None:
            return None
        stored_text, vec = hit
        if stored_text != text or vec.provider_id != provider_id or vec.model_id != model_id:
            log.warning("cache key collision for %r; treating as miss", text[:60])
            return None
        return vec

    def put_many(self, items: Sequence[tuple[str, EmbeddingVector]]) -> None:
        if not items:
            return
        records = []
        with self._lock:
            for text, vec in items:
                key = cache_key(vec.provider_id, vec.model_id, text)
                self._entries[key] = (text, vec)
                records.append(self._encode(key, text, vec))
            if self.path is None:
                return
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with FileLock(str(self.path) + ".lock"):
                new = not self.path.exists() or self.path.stat().st_size == 0
                with open(self.path, "ab") as fh:
                    if new:
                        fh.write(CACHE_MAGIC + bytes([CACHE_VERSION]))
                    fh.write(b"".join(records))
                    fh.flush()
                    os.fsync(fh.fileno())

    def put(self, text: str, vec: EmbeddingVector) -> None:
        self.put_many([(text, vec)])


class RemoteEmbedder:
    """Client for an OpenAI-compatible ``/embeddings`` endpoint."""

    def __init__(
        self,
        spec: ProviderSpec,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.spec = spec
        self.client = client or httpx.Client(timeout=spec.timeout)
        self.sleep = sleep

    def _headers(self) -> dict:
        key = os.environ.get(self.spec.api_key_env)
        return {"Authorization": f"Bearer {key}"} if key else {}

    def embed_chunk(self, texts: Sequence[str]) -> list[list[float]]:
        body = post_json(
            self.client,
            self.spec.endpoint,
            {"model": self.spec.model_id, "input": list(texts)},
            self._headers(),
            sleep=self.sleep,
        )
        try:
            rows = sorted(body["data"], key=lambda r: r["index"])
            vectors = [list(map(float, r["embedding"])) for r in rows]
            indices = [r["index"] for r in rows]
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed embeddings response: {exc!r}", 1) from exc
        if indices != list(range(len(texts))):
            raise ProtocolError(
                f"expected indices 0..{len(texts) - 1}, got {indices[:10]}...", 1
            )
        return vectors


def embed_batch(
    spec: ProviderSpec,
    texts: Sequence[str],
    cache: EmbeddingCache,
    remote: RemoteEmbedder | None = None,
) -> list[EmbeddingVector]:
    """Embed ``texts`` (order preserved), consulting and filling ``cache``.

    Remote misses are chunked at ``spec.batch_size`` and sent with up to
    ``spec.max_in_flight`` concurrent requests.
    """
    if not texts:
        raise ConfigError("embed_batch needs at least one text")
    for i, t in enumerate(texts):
        if not t.strip():
            raise ConfigError(f"text {i} is empty")

    out: dict[str, EmbeddingVector] = {}
    misses: list[str] = []
    for t in dict.fromkeys(texts):
        hit = cache.get(spec.provider_id, spec.model_id, t)
        if hit is not None:
            if hit.dim != spec.dim:
                raise IntegrityError(f"cached vector has dim {hit.dim}, expected {spec.dim}")
            out[t] = hit
        else:
            misses.append(t)

    if misses:
        if spec.kind == "local-test":
            fresh = [local_test_embed(t, spec.dim) for t in misses]
            fresh = [EmbeddingVector(v.values, spec.provider_id, spec.model_id) for v in fresh]
        else:
            remote = remote or RemoteEmbedder(spec)
            chunks = [misses[i : i + spec.batch_size] for i in range(0, len(misses), spec.batch_size)]
            with ThreadPoolExecutor(max_workers=spec.max_in_flight) as pool:
                results = list(pool.map(remote.embed_chunk, chunks))
            fresh = [
                EmbeddingVector(tuple(v), spec.provider_id, spec.model_id)
                for chunk in results
                for v in chunk
            ]
        for vec in fresh:
            if vec.dim != spec.dim:
                raise IntegrityError(f"provider returned dim {vec.dim}, expected {spec.dim}")
        cache.put_many(list(zip(misses, fresh)))
        out.update(zip(misses, fresh))

    return [out[t] for t in texts]
