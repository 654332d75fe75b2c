"""Block materialization, metric backends and document-level aggregation."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from segale._http import BackendError, JsonClient
from segale.align import AlignmentBlock, AlignmentPath
from segale.textseg import SentenceList, join_sentences

HIGHER_BETTER = "higher_better"
LOWER_BETTER = "lower_better"


@dataclass(frozen=True)
class MetricSpec:
    name: str
    polarity: str
    worst_value: float
    needs_reference: bool = False

    def __post_init__(self):
        if self.polarity not in (HIGHER_BETTER, LOWER_BETTER):
            raise ValueError(f"unknown polarity {self.polarity!r}")

    @property
    def lower_better(self) -> bool:
        return self.polarity == LOWER_BETTER


METRICS = {
    "comet": MetricSpec("comet", HIGHER_BETTER, 0.0, needs_reference=True),
    "comet-qe": MetricSpec("comet-qe", HIGHER_BETTER, 0.0),
    "metricx": MetricSpec("metricx", LOWER_BETTER, 25.0, needs_reference=True),
    "metricx-qe": MetricSpec("metricx-qe", LOWER_BETTER, 25.0),
    "cosine": MetricSpec("cosine", HIGHER_BETTER, 0.0),
}


def metric_spec(name: str) -> MetricSpec:
    try:
        return METRICS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown metric {name!r}; known: {', '.join(sorted(METRICS))}") from None


class ScoringError(RuntimeError):
    def __init__(self, message: str, unscored: int):
        super().__init__(f"{message} ({unscored} blocks unscored)")
        self.unscored = unscored


@dataclass(frozen=True)
class ScoredBlock:
    block: AlignmentBlock
    src_text: str
    hyp_text: str
    ref_text: str | None = None
    score: float | None = None

    @property
    def is_null(self) -> bool:
        return self.block.is_null

    def to_json(self) -> dict:
        out = {
            "src": list(self.block.src),
            "tgt": list(self.block.tgt),
            "src_text": self.src_text,
            "hyp_text": self.hyp_text,
        }
        if self.ref_text is not None:
            out["ref_text"] = self.ref_text
        out["score"] = self.score
        out["null"] = self.is_null
        return out


@dataclass(frozen=True)
class DocumentScore:
    doc_id: str
    avg_score: float
    na_ratio: float
    blocks: tuple[ScoredBlock, ...]
    metric: str = ""

    def to_json(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "avg_score": self.avg_score,
            "na_ratio": self.na_ratio,
            "metric": self.metric,
            "blocks": [b.to_json() for b in self.blocks],
        }


def _span_text(sentences: SentenceList, span: tuple[int, int]) -> str:
    lo, hi = span
    if lo < 0 or hi > len(sentences) or lo > hi:
        raise IndexError(f"span {span} out of range for {len(sentences)} sentences")
    return join_sentences(sentences.sentences[lo:hi], sentences.lang)


def materialize_blocks(
    path: AlignmentPath,
    src: SentenceList,
    hyp: SentenceList,
    ref: SentenceList | None = None,
) -> list[ScoredBlock]:
    """Concatenate the sentences each block spans. References follow the source span."""
    if path.src_len != len(src) or path.tgt_len != len(hyp):
        raise IndexError(f"path covers {path.src_len}x{path.tgt_len}, documents are {len(src)}x{len(hyp)}")
    if ref is not None and len(ref) != len(src):
        raise ValueError(f"reference has {len(ref)} sentences, source has {len(src)}")
    out = []
    for b in path.blocks:
        ref_text = None
        if ref is not None and b.src_len:
            ref_text = _span_text(ref, b.src)
        out.append(ScoredBlock(b, _span_text(src, b.src), _span_text(hyp, b.tgt), ref_text))
    return out


class MetricBackend(Protocol):
    def score(self, pairs: Sequence[dict]) -> list[float]:
        """Score ``{"src", "hyp", "ref"?}`` pairs, one float per pair."""


def score_document(
    blocks: Sequence[ScoredBlock],
    backend: MetricBackend,
    spec: MetricSpec,
    doc_id: str = "",
) -> DocumentScore:
    """Score non-null blocks with ``backend``; null blocks take ``spec.worst_value``. Averages over all blocks."""
    blocks = list(blocks)
    if not blocks:
        raise ValueError("cannot score a document with no blocks")
    live = [i for i, b in enumerate(blocks) if not b.is_null]
    pairs = []
    for i in live:
        b = blocks[i]
        pair = {"src": b.src_text, "hyp": b.hyp_text}
        if spec.needs_reference:
            if b.ref_text is None:
                raise ValueError(f"metric {spec.name} needs references; block {i} has none")
            pair["ref"] = b.ref_text
        pairs.append(pair)

    scores: list[float] = []
    if pairs:
        try:
            scores = [float(s) for s in backend.score(pairs)]
        except (BackendError, OSError) as e:
            raise ScoringError(f"metric backend failed: {e}", len(pairs)) from e
        if len(scores) != len(pairs):
            raise ScoringError(f"backend returned {len(scores)} scores for {len(pairs)} blocks", len(pairs))
        if not all(math.isfinite(s) for s in scores):
            raise ScoringError("backend returned non-finite scores", len(pairs))

    values = [spec.worst_value] * len(blocks)
    for i, s in zip(live, scores):
        values[i] = s
    scored = tuple(
        ScoredBlock(b.block, b.src_text, b.hyp_text, b.ref_text, v) for b, v in zip(blocks, values)
    )
    avg = math.fsum(values) / len(values)
    na = (len(blocks) - len(live)) / len(blocks)
    return DocumentScore(doc_id, avg, na, scored, spec.name)


class CosinePseudoMetric:
    """Reference-free test metric: ``(1 + cos(src, hyp)) / 2`` under an embedding provider."""

    spec = METRICS["cosine"]

    def __init__(self, provider):
        self.provider = provider

    def score(self, pairs: Sequence[dict]) -> list[float]:
        if not pairs:
            return []
        texts = [p["src"] for p in pairs] + [p["hyp"] for p in pairs]
        vecs = np.asarray(self.provider.embed_texts(texts), dtype=np.float64)
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        n = len(pairs)
        cos = np.einsum("ij,ij->i", vecs[:n], vecs[n:])
        return [float(min(1.0, max(0.0, (1.0 + c) / 2.0))) for c in cos]


def cosine_pseudo_metric(embedding_provider) -> CosinePseudoMetric:
    return CosinePseudoMetric(embedding_provider)


class HttpMetricBackend:
    """Client for a ``POST /score`` service; batches run with bounded parallelism."""

    def __init__(
        self,
        base_url: str,
        metric: str,
        batch_size: int = 64,
        max_in_flight: int = 4,
        timeout: float = 120.0,
        retries: int = 3,
        backoff: float = 0.5,
        transport=None,
    ):
        self.metric = metric
        self.batch_size = batch_size
        self.max_in_flight = max_in_flight
        self._client = JsonClient(base_url, timeout=timeout, retries=retries, backoff=backoff, transport=transport)

    def close(self) -> None:
        self._client.close()

    def _score_batch(self, pairs: list[dict]) -> list[float]:
        data = self._client.post("/score", {"metric": self.metric, "pairs": pairs})
        scores = data.get("scores")
        if not isinstance(scores, list) or len(scores) != len(pairs):
            raise BackendError(f"expected {len(pairs)} scores, got {scores!r:.80}")
        return [float(s) for s in scores]

    def score(self, pairs: Sequence[dict]) -> list[float]:
        pairs = list(pairs)
        batches = [pairs[i:i + self.batch_size] for i in range(0, len(pairs), self.batch_size)]
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            results = list(pool.map(self._score_batch, batches))
        return [s for r in results for s in r]
