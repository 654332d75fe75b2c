"""End-to-end pipeline steps shared by the CLI and library users."""

from __future__ import annotations

import hashlib
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import Callable, Iterable, Sequence, TypeVar

from segale.align import AlignmentBlock, AlignmentPath
from segale.config import EmbeddingConfig, MetricConfig, PipelineConfig
from segale.corpus import Document
from segale.datagen import ManifestEntry
from segale.embeddings import (
    FileEmbeddingProvider,
    HttpEmbeddingProvider,
    SyntheticEmbedder,
    build_overlaps,
    embed,
)
from segale.metaeval import (
    CorrelationReport,
    MqmAnnotation,
    NullJudgment,
    correlation_report,
    doc_human_scores,
    inject_null_judgments,
    zscore_normalize,
)
from segale.penalty_search import AlignmentResult, adaptive_align
from segale.score import (
    CosinePseudoMetric,
    DocumentScore,
    HttpMetricBackend,
    materialize_blocks,
    metric_spec,
    score_document,
)

T = TypeVar("T")
R = TypeVar("R")


def derive_seed(root: int, *parts: str) -> int:
    """64-bit seed for one (subcommand, document) unit, independent of processing order."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(root).encode())
    for p in parts:
        h.update(b"\x00" + str(p).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def make_provider(cfg: EmbeddingConfig):
    if cfg.provider == "synthetic":
        return SyntheticEmbedder(cfg.seed, cfg.dim, cfg.noise)
    if cfg.provider == "file":
        return FileEmbeddingProvider(cfg.path)
    if cfg.provider == "http":
        return HttpEmbeddingProvider(cfg.url, batch_size=cfg.batch_size, max_in_flight=cfg.max_in_flight, timeout=cfg.timeout)
    raise ValueError(f"unknown embedding provider {cfg.provider!r}")


def make_backend(cfg: MetricConfig, provider):
    if cfg.backend == "cosine":
        return CosinePseudoMetric(provider)
    if cfg.backend == "http":
        return HttpMetricBackend(cfg.url, cfg.name, batch_size=cfg.batch_size, max_in_flight=cfg.max_in_flight, timeout=cfg.timeout)
    raise ValueError(f"unknown metric backend {cfg.backend!r}")


def ordered_map(fn: Callable[[T], R], items: Sequence[T], jobs: int = 1) -> list[R]:
    """Apply ``fn`` to items, in parallel when ``jobs`` > 1, returning results in input order."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def align_document(doc: Document, provider, cfg: PipelineConfig) -> AlignmentResult:
    src = doc.src
    hyp = doc.hyp_sentences()
    if not len(hyp):
        raise ValueError(f"document {doc.doc_id!r}: hypothesis has no sentences")
    params = replace(cfg.align, rng_seed=derive_seed(cfg.seed, "align", doc.doc_id, doc.system_id))
    src_m = embed(provider, build_overlaps(src, params.max_overlap))
    hyp_m = embed(provider, build_overlaps(hyp, params.max_overlap))
    return adaptive_align(src_m, hyp_m, params, cfg.search)


def alignment_record(doc: Document, result: AlignmentResult) -> dict:
    return {
        "doc_id": doc.doc_id,
        "system_id": doc.system_id,
        "lang_pair": doc.lang_pair,
        "blocks": [b.to_json() for b in result.path.blocks],
        "na_ratio": result.na_ratio,
        "avg_cost": result.avg_cost,
        "beta_skip_final": result.beta_skip_final,
        "termination_reason": result.termination_reason,
    }


def path_from_record(rec: dict) -> AlignmentPath:
    blocks = tuple(AlignmentBlock.from_json(b) for b in rec["blocks"])
    src_len = max((b.src[1] for b in blocks), default=0)
    tgt_len = max((b.tgt[1] for b in blocks), default=0)
    return AlignmentPath(blocks, src_len, tgt_len)


def evaluate_document(doc: Document, path: AlignmentPath, backend, cfg: PipelineConfig) -> DocumentScore:
    spec = metric_spec(cfg.metric.name)
    blocks = materialize_blocks(path, doc.src, doc.hyp_sentences(), doc.ref if spec.needs_reference else None)
    return score_document(blocks, backend, spec, doc.doc_id)


def score_record(doc: Document, ds: DocumentScore) -> dict:
    out = ds.to_json()
    out["system_id"] = doc.system_id
    out["lang_pair"] = doc.lang_pair
    return out


def null_judgments_from_alignments(records: Iterable[dict]) -> list[NullJudgment]:
    """One judgment per null block, positioned by the side that is not empty."""
    out = []
    for rec in records:
        for b in rec["blocks"]:
            src, tgt = b["src"], b["tgt"]
            if src[0] == src[1]:
                out.append(NullJudgment(rec["doc_id"], rec.get("system_id", ""), f"null:hyp:{tgt[0]}"))
            elif tgt[0] == tgt[1]:
                out.append(NullJudgment(rec["doc_id"], rec.get("system_id", ""), f"null:src:{src[0]}"))
    return out


def null_judgments_from_manifest(manifest: Iterable[ManifestEntry]) -> list[NullJudgment]:
    """Deleted segments become worst-score judgments; segment ids are the 0-based original indices."""
    out = []
    for e in manifest:
        if e.op != "drop":
            continue
        for i in e.indices:
            out.append(NullJudgment(e.doc_id, e.system_id, str(i)))
    return out


def run_metaeval(
    score_records: Sequence[dict],
    annotations: Sequence[MqmAnnotation],
    manifest: Sequence[ManifestEntry] | None = None,
    gold_na: dict[str, float] | None = None,
    pooling: str = "pooled",
) -> CorrelationReport:
    """Inject null judgments, z-normalize and correlate document scores with human scores.

    With a manifest the deleted segments are the gold nulls and overwrite any existing
    judgment of that segment; without one, the metric's own null blocks are used.
    """
    if manifest is not None:
        judgments = null_judgments_from_manifest(manifest)
        injected = inject_null_judgments(annotations, judgments, replace_existing=True)
    else:
        judgments = null_judgments_from_alignments(score_records)
        injected = inject_null_judgments(annotations, judgments)
    human = doc_human_scores(zscore_normalize(injected))

    by_metric: dict[str, dict] = defaultdict(dict)
    human_keyed = {}
    specs = {}
    for rec in score_records:
        key = (rec.get("lang_pair", ""), rec["doc_id"], rec.get("system_id", ""))
        metric = rec.get("metric", "")
        by_metric[metric][key] = (rec["avg_score"], rec["na_ratio"])
        specs[metric] = metric_spec(metric)
        hk = (rec["doc_id"], rec.get("system_id", ""))
        if hk in human:
            human_keyed[key] = human[hk]
    return correlation_report(by_metric, human_keyed, gold_na, specs, pooling)

