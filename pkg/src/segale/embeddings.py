"""Overlap blocks, embedding providers and the on-disk embedding format."""

from __future__ import annotations

import hashlib
import os
import re
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

import numpy as np

from segale._http import BackendError, JsonClient
from segale.textseg import SentenceList, joiner

MAGIC = b"SGEM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")
NORM_TOLERANCE = 1e-4


class EmbeddingError(RuntimeError):
    """Embedding failed for the entries in ``[start, stop)``."""

    def __init__(self, message: str, start: int = 0, stop: int = 0):
        super().__init__(f"{message} (entries {start}..{stop})")
        self.start = start
        self.stop = stop


@dataclass(frozen=True)
class OverlapEntry:
    start: int
    length: int
    text: str


@dataclass(frozen=True)
class OverlapIndex:
    entries: tuple[OverlapEntry, ...]
    max_overlap: int
    n_sentences: int

    @property
    def k_side(self) -> int:
        return self.max_overlap - 1

    @property
    def keys(self) -> list[tuple[int, int]]:
        return [(e.start, e.length) for e in self.entries]

    @property
    def texts(self) -> list[str]:
        return [e.text for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


def overlap_count(n: int, k: int) -> int:
    return sum(max(0, n - j + 1) for j in range(1, k + 1))


def build_overlaps(sentences: SentenceList | Sequence[str], max_overlap: int, lang: str | None = None) -> OverlapIndex:
    """Enumerate every block of 1..max_overlap-1 consecutive sentences, ordered by (start, length)."""
    if max_overlap < 2:
        raise ValueError("max_overlap must be >= 2")
    if isinstance(sentences, SentenceList):
        lang = sentences.lang if lang is None else lang
        sents = sentences.sentences
    else:
        sents = tuple(sentences)
    if not sents:
        raise ValueError("cannot build overlaps for an empty sentence list")
    glue = joiner(lang or "und")
    n = len(sents)
    k_side = max_overlap - 1
    entries = [
        OverlapEntry(i, k, glue.join(sents[i:i + k]))
        for i in range(n)
        for k in range(1, k_side + 1)
        if i + k <= n
    ]
    return OverlapIndex(tuple(entries), max_overlap, n)


def _normalize_rows(vectors: np.ndarray) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    if not np.all(np.isfinite(vectors)):
        raise ValueError("embedding contains non-finite values")
    if np.any(norms == 0):
        raise ValueError("cannot normalize a zero vector")
    return (vectors / norms).astype(np.float32)


class EmbeddingMatrix:
    """Immutable float32 matrix of unit-norm rows, optionally keyed by (start, length)."""

    def __init__(self, vectors: np.ndarray, keys: Sequence[tuple[int, int]] | None = None):
        vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[1] == 0:
            raise ValueError(f"expected a 2-d matrix with dim > 0, got shape {vectors.shape}")
        norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
        if vectors.shape[0] and np.max(np.abs(norms - 1.0)) > NORM_TOLERANCE:
            raise ValueError("rows must be unit-norm; use EmbeddingMatrix.from_raw to normalize")
        if keys is not None:
            keys = tuple((int(s), int(k)) for s, k in keys)
            if len(keys) != vectors.shape[0]:
                raise ValueError(f"{len(keys)} keys for {vectors.shape[0]} rows")
        vectors.setflags(write=False)
        self.vectors = vectors
        self.keys = keys
        self._lookup = {key: i for i, key in enumerate(keys)} if keys is not None else None

    @classmethod
    def from_raw(cls, vectors, keys=None) -> EmbeddingMatrix:
        return cls(_normalize_rows(vectors), keys)

    @classmethod
    def from_sentence_vectors(cls, sentence_vectors: np.ndarray, max_overlap: int) -> EmbeddingMatrix:
        """Block vectors as the normalized mean of their sentences' vectors."""
        sv = _normalize_rows(sentence_vectors).astype(np.float64)
        n = sv.shape[0]
        csum = np.vstack([np.zeros((1, sv.shape[1])), np.cumsum(sv, axis=0)])
        keys = [(i, k) for i in range(n) for k in range(1, max_overlap) if i + k <= n]
        starts = np.array([s for s, _ in keys])
        ends = starts + np.array([k for _, k in keys])
        return cls.from_raw(csum[ends] - csum[starts], keys)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return (
            self.vectors.shape == other.vectors.shape
            and self.keys == other.keys
            and self.vectors.tobytes() == other.vectors.tobytes()
        )

    __hash__ = None

    def row(self, start: int, length: int) -> np.ndarray:
        if self._lookup is None:
            raise KeyError("matrix has no (start, length) keys")
        return self.vectors[self._lookup[(start, length)]]

    def as_dict(self) -> dict[tuple[int, int], np.ndarray]:
        if self.keys is None:
            raise KeyError("matrix has no (start, length) keys")
        return {key: self.vectors[i] for i, key in enumerate(self.keys)}

    def n_sentences(self) -> int:
        if self.keys is None:
            raise KeyError("matrix has no (start, length) keys")
        return sum(1 for _, k in self.keys if k == 1)

    def k_side(self) -> int:
        if self.keys is None:
            raise KeyError("matrix has no (start, length) keys")
        return max(k for _, k in self.keys)

    def tensor(self, k_side: int | None = None) -> np.ndarray:
        """float64 array of shape (k_side, N, dim); slot [k-1, i] holds block (i, k), zeros where i+k > N."""
        n = self.n_sentences()
        k_side = self.k_side() if k_side is None else k_side
        out = np.zeros((k_side, n, self.dim))
        for idx, (s, k) in enumerate(self.keys):
            if k <= k_side:
                out[k - 1, s] = self.vectors[idx]
        # Renormalize in float64 so identical blocks give a dot product of exactly 1 up to rounding.
        norms = np.linalg.norm(out, axis=2, keepdims=True)
        np.divide(out, norms, out=out, where=norms > 0)
        return out


def write_matrix(path, matrix: EmbeddingMatrix, texts: Iterable[str] | None = None) -> None:
    """Write the binary matrix and, when texts are given, the sibling ``<path>.txt`` listing."""
    rows, dim = matrix.vectors.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, rows, dim))
        f.write(matrix.vectors.astype("<f4", copy=False).tobytes())
    if texts is not None:
        texts = list(texts)
        if len(texts) != rows:
            raise ValueError(f"{len(texts)} texts for {rows} rows")
        with open(os.fspath(path) + ".txt", "w", encoding="utf-8", newline="\n") as f:
            for t in texts:
                f.write(t.replace("\n", " ") + "\n")


def read_matrix(path, keys: Sequence[tuple[int, int]] | None = None) -> EmbeddingMatrix:
    with open(path, "rb") as f:
        header = f.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, version, rows, dim = _HEADER.unpack(header)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        payload = f.read()
    if len(payload) != rows * dim * 4:
        raise ValueError(f"{path}: expected {rows * dim * 4} payload bytes, found {len(payload)}")
    vectors = np.frombuffer(payload, dtype="<f4").reshape(rows, dim).astype(np.float32)
    return EmbeddingMatrix(vectors, keys)


def read_texts(path) -> list[str]:
    with open(os.fspath(path) + ".txt", encoding="utf-8", newline="\n") as f:
        return f.read().split("\n")[:-1]


class EmbeddingProvider(Protocol):
    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        """Return one raw vector per text, shape (len(texts), dim)."""


def embed(provider: EmbeddingProvider, index: OverlapIndex) -> EmbeddingMatrix:
    texts = index.texts
    try:
        raw = provider.embed_texts(texts)
    except EmbeddingError:
        raise
    except BackendError as e:
        raise EmbeddingError(str(e), 0, len(texts)) from e
    raw = np.asarray(raw)
    if raw.ndim != 2 or raw.shape[0] != len(texts):
        raise EmbeddingError(f"provider returned shape {raw.shape} for {len(texts)} texts", 0, len(texts))
    try:
        return EmbeddingMatrix.from_raw(raw, index.keys)
    except ValueError as e:
        raise EmbeddingError(str(e), 0, len(texts)) from e


def _hash_seed(*parts) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(str(p).encode("utf-8"))
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "little")


_KEY = re.compile(r"⟦([^⟧]*)⟧")


def split_keyed(text: str) -> list[tuple[str, str]]:
    """Split ``text`` into (key, piece) pairs at every ``⟦key⟧`` marker.

    Text before the first marker, or text with no marker at all, is keyed by its own content.
    """
    out = []
    for piece in re.split(r"(?=⟦)", text):
        piece = piece.strip()
        if not piece:
            continue
        m = _KEY.match(piece)
        out.append((m.group(1) if m else piece, piece))
    return out


class SyntheticEmbedder:
    """Seeded hash embedder for tests and benchmarks.

    Each keyed piece maps to the unit vector of its key plus isotropic Gaussian noise
    (per-component std ``noise``, seeded by the piece text), renormalized. A text holding
    several pieces maps to the normalized mean of the piece vectors.
    """

    def __init__(self, seed: int = 0, dim: int = 256, noise: float = 0.0):
        if dim < 8:
            raise ValueError("dim must be >= 8")
        if not 0 <= noise < 0.5:
            raise ValueError("noise must be in [0, 0.5)")
        self.seed = seed
        self.dim = dim
        self.noise = noise
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def key_vector(self, key: str) -> np.ndarray:
        v = np.random.default_rng(_hash_seed(self.seed, "key", key)).standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def piece_vector(self, key: str, piece: str) -> np.ndarray:
        with self._lock:
            cached = self._cache.get(piece)
        if cached is not None:
            return cached
        v = self.key_vector(key)
        if self.noise:
            rng = np.random.default_rng(_hash_seed(self.seed, "noise", piece))
            v = v + self.noise * rng.standard_normal(self.dim)
            v = v / np.linalg.norm(v)
        with self._lock:
            self._cache[piece] = v
        return v

    def embed_text(self, text: str) -> np.ndarray:
        pieces = split_keyed(text)
        if not pieces:
            raise EmbeddingError("cannot embed empty text")
        v = np.mean([self.piece_vector(k, p) for k, p in pieces], axis=0)
        return v / np.linalg.norm(v)

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dim))
        for i, t in enumerate(texts):
            try:
                out[i] = self.embed_text(t)
            except EmbeddingError as e:
                raise EmbeddingError("cannot embed empty text", i, i + 1) from e
        return out


def synthetic_bilingual_embedder(seed: int, dim: int, noise: float) -> SyntheticEmbedder:
    return SyntheticEmbedder(seed, dim, noise)


class FileEmbeddingProvider:
    """Looks texts up in a precomputed matrix file and its sibling text listing."""

    def __init__(self, path):
        matrix = read_matrix(path)
        texts = read_texts(path)
        if len(texts) != len(matrix):
            raise ValueError(f"{path}: {len(matrix)} rows but {len(texts)} texts")
        self.dim = matrix.dim
        self._rows = {t: matrix.vectors[i] for i, t in enumerate(texts)}

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dim), dtype=np.float32)
        for i, t in enumerate(texts):
            vec = self._rows.get(t.replace("\n", " "))
            if vec is None:
                raise EmbeddingError(f"text not found in embedding file: {t[:60]!r}", i, i + 1)
            out[i] = vec
        return out


class HttpEmbeddingProvider:
    """Client for a ``POST /embed`` service, sending batches with bounded parallelism."""

    def __init__(
        self,
        base_url: str,
        batch_size: int = 64,
        max_in_flight: int = 4,
        timeout: float = 60.0,
        retries: int = 3,
        backoff: float = 0.5,
        transport=None,
    ):
        if batch_size < 1 or max_in_flight < 1:
            raise ValueError("batch_size and max_in_flight must be >= 1")
        self.batch_size = batch_size
        self.max_in_flight = max_in_flight
        self._client = JsonClient(base_url, timeout=timeout, retries=retries, backoff=backoff, transport=transport)

    def close(self) -> None:
        self._client.close()

    def _embed_batch(self, texts: Sequence[str], start: int) -> np.ndarray:
        stop = start + len(texts)
        try:
            data = self._client.post("/embed", {"texts": list(texts)})
        except BackendError as e:
            raise EmbeddingError(str(e), start, stop) from e
        try:
            vectors = np.asarray(data["embeddings"], dtype=np.float64)
            dim = int(data.get("dim", vectors.shape[-1]))
        except (KeyError, TypeError, ValueError) as e:
            raise EmbeddingError(f"malformed response: {e}", start, stop) from e
        if vectors.ndim != 2 or vectors.shape != (len(texts), dim):
            raise EmbeddingError(f"response shape {vectors.shape} does not match {len(texts)}x{dim}", start, stop)
        return vectors

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        texts = list(texts)
        starts = list(range(0, len(texts), self.batch_size))
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            futures = [pool.submit(self._embed_batch, texts[s:s + self.batch_size], s) for s in starts]
            batches = [f.result() for f in futures]
        if not batches:
            return np.empty((0, 0))
        dim = batches[0].shape[1]
        for s, b in zip(starts, batches):
            if b.shape[1] != dim:
                raise EmbeddingError(f"dimension mismatch: {b.shape[1]} vs {dim}", s, s + b.shape[0])
        return np.vstack(batches)
