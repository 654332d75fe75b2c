"""Meta-evaluation: MQM z-scores, null-judgment injection, Kendall's tau and correlation reports.

MQM scores are error weights (0 is perfect, 25 the worst), so raw z-scores grow
with badness.  Correlations are computed against the negated document z-mean so
that both axes read "higher is better".
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

from segale.score import MetricSpec

NULL_MQM = 25.0


@dataclass(frozen=True)
class MqmAnnotation:
    doc_id: str
    seg_id: str
    system_id: str
    annotator_id: str
    mqm_score: float
    synthetic: bool = False

    def __post_init__(self):
        if not self.mqm_score >= 0:
            raise ValueError(f"MQM score must be >= 0, got {self.mqm_score}")


@dataclass(frozen=True)
class NullJudgment:
    """A null block to be scored as the worst MQM value; ``position`` becomes the segment id."""

    doc_id: str
    system_id: str
    position: str


def read_mqm(path) -> list[MqmAnnotation]:
    """Read WMT-style TSV (system, doc, seg, annotator, score) or JSONL with the same keys."""
    out = []
    with open(path, encoding="utf-8", newline="") as f:
        first = f.readline()
        f.seek(0)
        if first.lstrip().startswith("{"):
            rows = (json.loads(line) for line in f if line.strip())
        else:
            rows = csv.DictReader(f, delimiter="\t", quoting=csv.QUOTE_NONE)
        for lineno, row in enumerate(rows, start=2):
            try:
                out.append(
                    MqmAnnotation(
                        doc_id=str(row.get("doc", row.get("doc_id"))),
                        seg_id=str(row.get("seg", row.get("seg_id"))),
                        system_id=str(row.get("system", row.get("system_id"))),
                        annotator_id=str(row.get("annotator", row.get("annotator_id"))),
                        mqm_score=float(row.get("score", row.get("mqm_score"))),
                    )
                )
            except (TypeError, ValueError) as e:
                raise ValueError(f"{path}:{lineno}: bad MQM row: {e}") from e
    return out


def zscore_normalize(annotations: Sequence[MqmAnnotation]) -> list[tuple[MqmAnnotation, float]]:
    """Standardize each annotator's raw MQM scores with that annotator's mean and population std."""
    by_annotator: dict[str, list[float]] = defaultdict(list)
    for a in annotations:
        by_annotator[a.annotator_id].append(a.mqm_score)
    stats = {}
    for annotator, scores in by_annotator.items():
        mean = math.fsum(scores) / len(scores)
        std = math.sqrt(math.fsum((s - mean) ** 2 for s in scores) / len(scores))
        stats[annotator] = (mean, std)
    out = []
    for a in annotations:
        mean, std = stats[a.annotator_id]
        z = (a.mqm_score - mean) / std if std > 0 else 0.0
        out.append((a, z))
    return out


def _majority(annotators: Iterable[str]) -> str:
    counts = Counter(annotators)
    top = max(counts.values())
    return min(a for a, c in counts.items() if c == top)


def inject_null_judgments(
    annotations: Sequence[MqmAnnotation],
    null_blocks: Iterable[NullJudgment],
    annotator_policy: str = "document",
    replace_existing: bool = False,
) -> list[MqmAnnotation]:
    """Add one worst-score (25) annotation per null block. Must run before ``zscore_normalize``.

    ``document`` policy credits the single annotator of that (document, system), falling back to
    the document's majority annotator; ``majority`` always uses the majority annotator.  With
    ``replace_existing`` a judgment whose segment is already annotated overwrites that score.
    """
    if annotator_policy not in ("document", "majority"):
        raise ValueError(f"unknown annotator policy {annotator_policy!r}")
    out = list(annotations)
    by_entry: dict[tuple[str, str], list[str]] = defaultdict(list)
    by_doc: dict[str, list[str]] = defaultdict(list)
    index = {}
    for i, a in enumerate(out):
        by_entry[(a.doc_id, a.system_id)].append(a.annotator_id)
        by_doc[a.doc_id].append(a.annotator_id)
        index.setdefault((a.doc_id, a.system_id, a.seg_id), []).append(i)

    for nb in null_blocks:
        pool = by_entry.get((nb.doc_id, nb.system_id)) or by_doc.get(nb.doc_id)
        if not pool:
            raise ValueError(f"document {nb.doc_id!r} has no annotator to attribute a null judgment to")
        key = (nb.doc_id, nb.system_id, str(nb.position))
        if replace_existing and key in index:
            for i in index[key]:
                a = out[i]
                out[i] = MqmAnnotation(a.doc_id, a.seg_id, a.system_id, a.annotator_id, NULL_MQM, True)
            continue
        if annotator_policy == "document" and len(set(pool)) == 1:
            annotator = pool[0]
        else:
            annotator = _majority(pool)
        out.append(MqmAnnotation(nb.doc_id, str(nb.position), nb.system_id, annotator, NULL_MQM, True))
    return out


def doc_human_score(
    z_annotations: Sequence[tuple[MqmAnnotation, float]],
    doc_id: str,
    system_id: str | None = None,
) -> float:
    """Mean z-score over a document's annotated segments (raw MQM orientation: higher is worse)."""
    zs = [z for a, z in z_annotations if a.doc_id == doc_id and (system_id is None or a.system_id == system_id)]
    if not zs:
        raise ValueError(f"no annotations for document {doc_id!r}")
    return math.fsum(zs) / len(zs)


def doc_human_scores(z_annotations: Sequence[tuple[MqmAnnotation, float]]) -> dict[tuple[str, str], float]:
    """Mean z-score per (doc_id, system_id)."""
    groups: dict[tuple[str, str], list[float]] = defaultdict(list)
    for a, z in z_annotations:
        groups[(a.doc_id, a.system_id)].append(z)
    return {k: math.fsum(v) / len(v) for k, v in groups.items()}


def _tie_pairs(sorted_values) -> int:
    total = 0
    run = 1
    for prev, cur in zip(sorted_values, sorted_values[1:]):
        if cur == prev:
            run += 1
        else:
            total += run * (run - 1) // 2
            run = 1
    return total + run * (run - 1) // 2


def _count_swaps(values: list) -> int:
    """Sort ``values`` in place by bottom-up merge sort, returning the number of inversions."""
    n = len(values)
    buf = values[:]
    swaps = 0
    width = 1
    src, dst = values, buf
    while width < n:
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                if src[j] < src[i]:
                    dst[k] = src[j]
                    swaps += mid - i
                    j += 1
                else:
                    dst[k] = src[i]
                    i += 1
                k += 1
            dst[k:hi] = src[i:mid] if i < mid else src[j:hi]
        src, dst = dst, src
        width *= 2
    if src is not values:
        values[:] = src
    return swaps


def kendall_tau_counts(x: Sequence[float], y: Sequence[float]) -> tuple[int, int, int, int]:
    """(n0, x-tied pairs, y-tied pairs, concordant - discordant) in O(n log n)."""
    if len(x) != len(y):
        raise ValueError("x and y must have the same length")
    if len(x) < 2:
        raise ValueError("need at least two observations")
    n = len(x)
    n0 = n * (n - 1) // 2
    pairs = sorted(zip(x, y))
    xs = [p[0] for p in pairs]
    tx = _tie_pairs(xs)
    # Pairs tied on both coordinates.
    txy = _tie_pairs(pairs)
    ys = [p[1] for p in pairs]
    swaps = _count_swaps(ys)
    ty = _tie_pairs(ys)
    return n0, tx, ty, n0 - tx - ty + txy - 2 * swaps


def kendall_tau(x: Sequence[float], y: Sequence[float], variant: str = "b") -> float:
    """Kendall's tau between two score lists; ``variant`` is ``"b"`` (tie-corrected) or ``"a"``."""
    n0, tx, ty, diff = kendall_tau_counts(x, y)
    if variant == "a":
        return diff / n0
    if variant != "b":
        raise ValueError(f"unknown tau variant {variant!r}")
    denom = (n0 - tx) * (n0 - ty)
    if denom == 0:
        raise ValueError("degenerate ranking")
    return diff / math.sqrt(denom)


@dataclass(frozen=True)
class DocSegments:
    doc_id: str
    system_id: str
    seg_ids: tuple[str, ...]


def filter_documents(
    docs: Sequence[DocSegments],
    annotations: Iterable[MqmAnnotation],
    missing_ceiling: float = 0.20,
) -> list[DocSegments]:
    """Drop documents where more than ``missing_ceiling`` of the segments lack an MQM annotation."""
    annotated = {(a.doc_id, a.system_id, a.seg_id) for a in annotations}
    kept = []
    for d in docs:
        if not d.seg_ids:
            continue
        missing = sum(1 for s in d.seg_ids if (d.doc_id, d.system_id, s) not in annotated)
        if missing / len(d.seg_ids) <= missing_ceiling:
            kept.append(d)
    return kept


@dataclass(frozen=True)
class CorrelationCell:
    lang_pair: str
    metric: str
    tau: float | None
    n_docs: int
    na_ratio_mean: float | None
    delta_gold: float | None

    @property
    def absent(self) -> bool:
        return self.tau is None


@dataclass(frozen=True)
class CorrelationReport:
    cells: tuple[CorrelationCell, ...]

    def cell(self, lang_pair: str, metric: str) -> CorrelationCell:
        for c in self.cells:
            if c.lang_pair == lang_pair and c.metric == metric:
                return c
        raise KeyError((lang_pair, metric))

    def to_json(self) -> dict:
        return {"cells": [asdict(c) for c in self.cells]}

    def to_table(self) -> str:
        header = ["lang_pair", "metric", "tau", "n_docs", "na_ratio", "|delta_gold|"]
        rows = [header]
        for c in self.cells:
            rows.append([
                c.lang_pair,
                c.metric,
                "-" if c.tau is None else f"{c.tau:.3f}",
                str(c.n_docs),
                "-" if c.na_ratio_mean is None else f"{100 * c.na_ratio_mean:.1f}%",
                "-" if c.delta_gold is None else f"{100 * c.delta_gold:.1f}%",
            ])
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        lines = ["  ".join(v.ljust(w) if i < 2 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths))) for r in rows]
        return "\n".join(line.rstrip() for line in lines) + "\n"


# Keys of per-document values: (lang_pair, doc_id, system_id).
DocKey = tuple[str, str, str]


def correlation_report(
    doc_scores_by_metric: Mapping[str, Mapping[DocKey, tuple[float, float]]],
    doc_human_scores: Mapping[DocKey, float],
    gold_na_ratios: Mapping[str, float] | None = None,
    specs: Mapping[str, MetricSpec] | None = None,
    pooling: str = "pooled",
) -> CorrelationReport:
    """Kendall's tau per (language pair, metric) between metric scores and human z-means.

    ``doc_scores_by_metric[metric][key]`` is ``(avg_score, na_ratio)``.  Human scores are raw
    z-means and are negated; lower-is-better metrics are negated as well.  ``pooling`` selects
    one tau over all (document, system) points of a language pair, or the mean of per-system taus.
    """
    if pooling not in ("pooled", "per_system"):
        raise ValueError(f"unknown pooling {pooling!r}")
    cells = []
    for metric in sorted(doc_scores_by_metric):
        scores = doc_scores_by_metric[metric]
        sign = -1.0 if specs and metric in specs and specs[metric].lower_better else 1.0
        by_lp: dict[str, list[DocKey]] = defaultdict(list)
        for key in scores:
            if key in doc_human_scores:
                by_lp[key[0]].append(key)
        lps = sorted({k[0] for k in scores})
        for lp in lps:
            keys = sorted(by_lp.get(lp, []))
            na_vals = [scores[k][1] for k in sorted(k for k in scores if k[0] == lp)]
            na_mean = math.fsum(na_vals) / len(na_vals) if na_vals else None
            delta = None
            if gold_na_ratios is not None and lp in gold_na_ratios and na_mean is not None:
                delta = abs(na_mean - gold_na_ratios[lp])
            tau = _cell_tau(keys, scores, doc_human_scores, sign, pooling)
            cells.append(CorrelationCell(lp, metric, tau, len(keys), na_mean, delta))
    return CorrelationReport(tuple(cells))


def _cell_tau(keys, scores, human, sign, pooling) -> float | None:
    def tau_of(ks):
        if len(ks) < 2:
            return None
        try:
            return kendall_tau([sign * scores[k][0] for k in ks], [-human[k] for k in ks])
        except ValueError:
            return None

    if pooling == "pooled":
        return tau_of(keys)
    per_system: dict[str, list[DocKey]] = defaultdict(list)
    for k in keys:
        per_system[k[2]].append(k)
    taus = [t for t in (tau_of(ks) for ks in per_system.values()) if t is not None]
    return math.fsum(taus) / len(taus) if taus else None
