"""Segment, align and evaluate unsegmented document-level machine translation."""

__version__ = "0.1.0"

from segale.align import (
    AlignmentBlock,
    AlignmentPath,
    AlignParams,
    block_cost,
    coarse_to_fine_align,
    cost_normalizer,
    exact_align,
    path_stats,
    skip_cost,
)
from segale.embeddings import (
    EmbeddingMatrix,
    OverlapIndex,
    build_overlaps,
    embed,
    read_matrix,
    synthetic_bilingual_embedder,
    write_matrix,
)
from segale.penalty_search import AlignmentResult, SearchParams, adaptive_align
from segale.score import DocumentScore, MetricSpec, materialize_blocks, score_document
from segale.textseg import SentenceList, ingest_segmentation, merge_boundaries, segment

__all__ = [
    "AlignmentBlock",
    "AlignmentPath",
    "AlignmentResult",
    "AlignParams",
    "DocumentScore",
    "EmbeddingMatrix",
    "MetricSpec",
    "OverlapIndex",
    "SearchParams",
    "SentenceList",
    "adaptive_align",
    "block_cost",
    "build_overlaps",
    "coarse_to_fine_align",
    "cost_normalizer",
    "embed",
    "exact_align",
    "ingest_segmentation",
    "materialize_blocks",
    "merge_boundaries",
    "path_stats",
    "read_matrix",
    "score_document",
    "segment",
    "skip_cost",
    "synthetic_bilingual_embedder",
    "write_matrix",
]
