"""Text embedding backends and the content-addressed vector cache.

The reference embedder hashes character trigrams into a fixed number of
buckets (FNV-1a 64) and L2-normalizes the counts: deterministic, offline,
and similar strings land near each other, which is all the retrieval
pipeline needs for testing. A remote HTTP client covers real sentence
embedders. Every vector handed downstream is unit-norm float32, so cosine
similarity reduces to a dot product.
"""

from __future__ import annotations

import hashlib
import os
import re
import threading
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

_FNV_OFFSET = 14695981039346656037
_FNV_PRIME = 1099511628211
_MASK64 = (1 << 64) - 1

_ID_RE = re.compile(r"^[A-Za-z0-9._-]+$")

DEFAULT_DIM = 256

EMBED_URL_ENV = "REALM_EMBED_URL"
EMBED_KEY_ENV = "REALM_EMBED_KEY"


class EmbeddingError(RuntimeError):
    pass


class EmbedderTransportError(EmbeddingError):
    """Transient remote failure; the call may be retried."""


class CacheCorruptionError(EmbeddingError):
    """A cache file exists but cannot hold a valid vector."""


class Embedder(Protocol):
    id: str
    dim: int

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


def _fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def _trigram_buckets_ascii(norm: str, dim: int) -> np.ndarray:
    b = np.frombuffer(norm.encode("ascii"), dtype=np.uint8).astype(np.uint64)
    prime = np.uint64(_FNV_PRIME)
    h = np.full(b.shape[0] - 2, _FNV_OFFSET, dtype=np.uint64)
    h = (h ^ b[:-2]) * prime
    h = (h ^ b[1:-1]) * prime
    h = (h ^ b[2:]) * prime
    return (h % np.uint64(dim)).astype(np.int64)


def trigram_embed(text: str, dim: int = DEFAULT_DIM) -> np.ndarray:
    """Hash character trigrams of the whitespace-collapsed, lowercased
    text into ``dim`` buckets and L2-normalize the counts. Texts shorter
    than one trigram map to the first basis vector."""
    if dim < 8:
        raise EmbeddingError(f"dim must be >= 8, got {dim}")
    norm = " ".join(text.lower().split())
    if len(norm) < 3:
        vec = np.zeros(dim, dtype=np.float32)
        vec[0] = 1.0
        return vec
    if norm.isascii():
        buckets = _trigram_buckets_ascii(norm, dim)
    else:
        buckets = np.array(
            [_fnv1a_64(norm[i : i + 3].encode("utf-8")) % dim for i in range(len(norm) - 2)],
            dtype=np.int64,
        )
    counts = np.bincount(buckets, minlength=dim).astype(np.float32)
    return counts / np.linalg.norm(counts)


class TrigramEmbedder:
    """Deterministic offline reference embedder."""

    def __init__(self, dim: int = DEFAULT_DIM) -> None:
        if dim < 8:
            raise EmbeddingError(f"dim must be >= 8, got {dim}")
        self.dim = dim
        self.id = f"trigram-{dim}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.stack([trigram_embed(t, self.dim) for t in texts])


# ---------------------------------------------------------------------------
# Disk cache: cache/<embedder_id>/<first-2-hex>/<sha256>.vec
# ---------------------------------------------------------------------------

def content_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class EmbeddingCache:
    """Content-addressed float32 vector store, one file per (embedder, text).

    Writes are atomic (tmp + rename) and internally locked, so a cache can
    be shared by threads embedding different patients.
    """

    def __init__(self, directory: str | Path) -> None:
        self.directory = Path(directory)
        self._lock = threading.Lock()

    def _path(self, embedder_id: str, text: str) -> Path:
        if not _ID_RE.match(embedder_id):
            raise EmbeddingError(f"embedder id {embedder_id!r} is not filesystem-safe")
        h = content_hash(text)
        return self.directory / embedder_id / h[:2] / f"{h}.vec"

    def get(self, embedder_id: str, text: str, dim: int) -> Optional[np.ndarray]:
        path = self._path(embedder_id, text)
        with self._lock:
            if not path.exists():
                return None
            blob = path.read_bytes()
        if len(blob) != 4 * dim:
            raise CacheCorruptionError(
                f"cache file {path} holds {len(blob)} bytes, expected {4 * dim}"
            )
        vec = np.frombuffer(blob, dtype="<f4").copy()
        if not np.all(np.isfinite(vec)):
            raise CacheCorruptionError(f"cache file {path} holds non-finite values")
        return vec

    def put(self, embedder_id: str, text: str, vec: np.ndarray) -> None:
        vec = np.ascontiguousarray(vec, dtype="<f4")
        path = self._path(embedder_id, text)
        with self._lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(vec.tobytes())
            os.replace(tmp, path)


class CachedEmbedder:
    """Wrap any embedder with the disk cache. Backend invocations are
    counted so tests can assert cache hits mean zero backend calls."""

    def __init__(self, backend: Embedder, cache: EmbeddingCache) -> None:
        self.backend = backend
        self.cache = cache
        self.backend_calls = 0

    @property
    def id(self) -> str:
        return self.backend.id

    @property
    def dim(self) -> int:
        return self.backend.dim

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out: list[Optional[np.ndarray]] = []
        misses: list[int] = []
        for i, t in enumerate(texts):
            vec = self.cache.get(self.id, t, self.dim)
            out.append(vec)
            if vec is None:
                misses.append(i)
        if misses:
            self.backend_calls += 1
            fresh = self.backend.embed([texts[i] for i in misses])
            # Only cache after the whole batch came back valid: a transport
            # failure above leaves the cache untouched.
            for j, i in enumerate(misses):
                self.cache.put(self.id, texts[i], fresh[j])
                out[i] = fresh[j]
        if not out:
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.stack(out)  # type: ignore[arg-type]


# ---------------------------------------------------------------------------
# Remote endpoint client
# ---------------------------------------------------------------------------

class RemoteEmbedder:
    """Batched HTTP client for a sentence-embedding endpoint.

    Request: POST {url} with JSON {"model": id, "texts": [...]}; response
    must be {"embeddings": [[...], ...]} with exactly ``dim`` floats per
    text. Vectors are L2-normalized on receipt. ``post`` is injectable for
    tests; by default it is requests.post.
    """

    def __init__(
        self,
        model_id: str,
        dim: int,
        url: Optional[str] = None,
        api_key: Optional[str] = None,
        post: Optional[Callable] = None,
        max_in_flight: int = 4,
        timeout: float = 30.0,
    ) -> None:
        if not _ID_RE.match(model_id):
            raise EmbeddingError(f"embedder id {model_id!r} is not filesystem-safe")
        self.id = model_id
        self.dim = dim
        self.url = url or os.environ.get(EMBED_URL_ENV, "")
        self.api_key = api_key if api_key is not None else os.environ.get(EMBED_KEY_ENV, "")
        if not self.url:
            raise EmbeddingError(f"no embedding endpoint configured (set {EMBED_URL_ENV})")
        if post is None:
            import requests

            post = requests.post
        self._post = post
        self._slots = threading.Semaphore(max_in_flight)
        self.timeout = timeout

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim), dtype=np.float32)
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {"model": self.id, "texts": list(texts)}
        with self._slots:
            try:
                resp = self._post(self.url, json=payload, headers=headers, timeout=self.timeout)
            except Exception as exc:
                raise EmbedderTransportError(f"embedding endpoint {self.url} unreachable: {exc}") from exc
        status = getattr(resp, "status_code", 200)
        if status >= 400:
            raise EmbedderTransportError(f"embedding endpoint {self.url} returned HTTP {status}")
        try:
            body = resp.json()
            rows = body["embeddings"]
        except Exception as exc:
            raise EmbedderTransportError(f"embedding endpoint {self.url} sent malformed JSON") from exc
        if len(rows) != len(texts):
            raise EmbeddingError(
                f"endpoint returned {len(rows)} vectors for {len(texts)} texts"
            )
        mat = np.asarray(rows, dtype=np.float32)
        if mat.ndim != 2 or mat.shape[1] != self.dim:
            raise EmbeddingError(
                f"endpoint returned dimension {mat.shape[-1] if mat.ndim else '?'}, declared {self.dim}"
            )
        norms = np.linalg.norm(mat, axis=1, keepdims=True)
        if np.any(norms == 0) or not np.all(np.isfinite(mat)):
            raise EmbeddingError("endpoint returned a zero or non-finite vector")
        return mat / norms


def make_embedder(
    kind: str = "trigram",
    dim: int = DEFAULT_DIM,
    cache_dir: Optional[str | Path] = None,
    model_id: Optional[str] = None,
) -> Embedder:
    """Factory used by the CLI: trigram (offline) or remote, optionally
    wrapped with the disk cache."""
    if kind == "trigram":
        backend: Embedder = TrigramEmbedder(dim)
    elif kind == "remote":
        backend = RemoteEmbedder(model_id or "remote-embedder", dim)
    else:
        raise EmbeddingError(f"unknown embedder kind {kind!r}")
    if cache_dir is not None:
        return CachedEmbedder(backend, EmbeddingCache(cache_dir))
    return backend
