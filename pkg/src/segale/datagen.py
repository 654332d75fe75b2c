"""Synthetic perturbations and auxiliary datasets.

Deletions simulate over- and under-translation, merges simulate translations
whose sentence boundaries differ from the source, and the remaining helpers
build embedding-training triplets, token-budget chunks and overlap-size
estimates.
"""

from __future__ import annotations

import json
import math
import random
import subprocess
import warnings
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Callable, Iterable, Sequence

from segale._http import BackendError, JsonClient
from segale.corpus import Corpus, Document
from segale.textseg import CJK_LANGS, SentenceList, base_lang, join_sentences, segment

OVER_TRANSLATE = "over_translate"
UNDER_TRANSLATE = "under_translate"
FLEX_BOUNDARY = "flex_boundary"
DROPPED_SENTENCE = "dropped_sentence"
NEARBY_SUBSTITUTION = "nearby_substitution"


class PerturbationWarning(UserWarning):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    rate: float = 0.10
    rng_seed: int = 0
    # "corpus" draws one global quota; "document" draws round(rate * n) from each eligible document.
    scope: str = "corpus"

    def __post_init__(self):
        if self.kind not in (OVER_TRANSLATE, UNDER_TRANSLATE, FLEX_BOUNDARY):
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if not 0 < self.rate < 1:
            raise ValueError("rate must be in (0, 1)")
        if self.scope not in ("corpus", "document"):
            raise ValueError(f"unknown scope {self.scope!r}")


@dataclass(frozen=True)
class ManifestEntry:
    doc_id: str
    system_id: str
    op: str
    indices: tuple[int, ...]
    side: str
    text: str | None = None

    def to_json(self) -> dict:
        out = {"doc_id": self.doc_id, "system_id": self.system_id, "op": self.op, "indices": list(self.indices), "side": self.side}
        if self.text is not None:
            out["text"] = self.text
        return out

    @classmethod
    def from_json(cls, obj) -> ManifestEntry:
        return cls(obj["doc_id"], obj.get("system_id", ""), obj["op"], tuple(obj["indices"]), obj["side"], obj.get("text"))


def write_manifest(path, entries: Iterable[ManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for e in entries:
            f.write(json.dumps(e.to_json(), ensure_ascii=False) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    with open(path, encoding="utf-8") as f:
        return [ManifestEntry.from_json(json.loads(line)) for line in f if line.strip()]


def _drop(sl: SentenceList | None, indices: set[int]) -> SentenceList | None:
    if sl is None:
        return None
    kept = tuple(s for i, s in enumerate(sl.sentences) if i not in indices)
    return SentenceList(kept, sl.lang)


def _sample(units: list, sizes: list[int], spec: PerturbationSpec, rng: random.Random) -> list[list[int]]:
    """Indices to delete from each unit (a document side of ``sizes[u]`` segments)."""
    eligible = [u for u, n in enumerate(sizes) if n > 1]
    if not eligible:
        raise ValueError("every document has a single segment; nothing can be deleted")
    picks: list[list[int]] = [[] for _ in units]
    if spec.scope == "document":
        for u in eligible:
            picks[u] = sorted(rng.sample(range(sizes[u]), round_half_up(spec.rate * sizes[u])))
        return picks
    slots = [(u, i) for u in eligible for i in range(sizes[u])]
    quota = round_half_up(spec.rate * len(slots))
    for u, i in sorted(rng.sample(slots, quota)):
        picks[u].append(i)
    return picks


def drop_segments(corpus: Corpus, spec: PerturbationSpec) -> tuple[Corpus, list[ManifestEntry]]:
    """Delete segments to simulate over-translation (source and reference) or under-translation (hypothesis).

    Single-segment documents are never sampled.  Over-translation deletes per source document,
    so every system sharing that source sees the same deletion.
    """
    if spec.kind == FLEX_BOUNDARY:
        raise ValueError("use merge_candidates for flex-boundary perturbations")
    rng = random.Random(spec.rng_seed)
    docs = list(corpus.documents)
    manifest: list[ManifestEntry] = []

    if spec.kind == UNDER_TRANSLATE:
        for d in docs:
            if d.hyp is None:
                raise ValueError(f"document {d.doc_id!r} has no segmented hypothesis to delete from")
        picks = _sample(docs, [len(d.hyp) for d in docs], spec, rng)
        out = []
        for d, idx in zip(docs, picks):
            if idx:
                manifest.append(ManifestEntry(d.doc_id, d.system_id, "drop", tuple(idx), "hyp"))
            out.append(replace(d, hyp=_drop(d.hyp, set(idx))))
        return Corpus(tuple(out)), manifest

    sources: dict[str, Document] = {}
    for d in docs:
        sources.setdefault(d.doc_id, d)
    src_ids = list(sources)
    picks = _sample(src_ids, [len(sources[s].src) for s in src_ids], spec, rng)
    chosen = dict(zip(src_ids, picks))
    out = []
    for d in docs:
        idx = chosen[d.doc_id]
        if idx:
            manifest.append(ManifestEntry(d.doc_id, d.system_id, "drop", tuple(idx), "src"))
        out.append(replace(d, src=_drop(d.src, set(idx)), ref=_drop(d.ref, set(idx))))
    return Corpus(tuple(out)), manifest


def apply_manifest(corpus: Corpus, manifest: Iterable[ManifestEntry]) -> Corpus:
    """Replay recorded drops and merges on the unperturbed corpus."""
    by_key: dict[tuple[str, str], list[ManifestEntry]] = {}
    for e in manifest:
        by_key.setdefault((e.doc_id, e.system_id), []).append(e)
    out = []
    for d in corpus.documents:
        for e in by_key.get((d.doc_id, d.system_id), []):
            if e.op == "drop":
                idx = set(e.indices)
                if e.side == "hyp":
                    d = replace(d, hyp=_drop(d.hyp, idx))
                elif e.side == "src":
                    d = replace(d, src=_drop(d.src, idx), ref=_drop(d.ref, idx))
                else:
                    raise ValueError(f"unknown manifest side {e.side!r}")
        merges = [e for e in by_key.get((d.doc_id, d.system_id), []) if e.op == "merge"]
        if merges:
            d = _apply_merges(d, merges)
        out.append(d)
    return Corpus(tuple(out))


def gold_na_ratio(original: Corpus, manifest: Iterable[ManifestEntry]) -> float:
    """Removed segments over original segments on the perturbed side(s)."""
    removed = 0
    sides = set()
    for e in manifest:
        if e.op == "drop":
            removed += len(e.indices)
            sides.add(e.side)
    if not sides:
        return 0.0
    total = 0
    for d in original.documents:
        if "hyp" in sides:
            total += len(d.hyp)
        if "src" in sides:
            total += len(d.src)
    return removed / total


SimilarityFn = Callable[[str, str], float]
RewriterFn = Callable[[str, str], str]


def _apply_merges(d: Document, merges: Sequence[ManifestEntry]) -> Document:
    src = list(d.src.sentences)
    ref = list(d.ref.sentences) if d.ref is not None else None
    lang = d.src.lang
    ref_lang = d.ref.lang if d.ref is not None else None
    # Apply right to left so earlier indices stay valid.
    for e in sorted(merges, key=lambda e: e.indices[0], reverse=True):
        i = e.indices[0]
        src[i:i + 2] = [e.text]
        if ref is not None:
            ref[i:i + 2] = [join_sentences(ref[i:i + 2], ref_lang)]
    return replace(
        d,
        src=SentenceList(tuple(src), lang),
        ref=SentenceList(tuple(ref), ref_lang) if ref is not None else None,
    )


def merge_candidates(
    source_docs: Corpus,
    rate: float,
    similarity: SimilarityFn,
    rewriter: RewriterFn,
    accept_threshold: float = 0.85,
    rng_seed: int = 0,
) -> tuple[Corpus, list[ManifestEntry]]:
    """Merge adjacent interior source segments through ``rewriter``, keeping merges with similarity > threshold.

    A segment is eligible when it is neither first nor last in its document; the pair is
    (i, i + 1).  Rejected pairs are discarded and another eligible pair is drawn.  Pairs
    overlapping an accepted merge are withdrawn.  References, when present, are concatenated.
    """
    if not 0 < rate < 1:
        raise ValueError("rate must be in (0, 1)")
    rng = random.Random(rng_seed)
    sources: dict[str, Document] = {}
    for d in source_docs.documents:
        sources.setdefault(d.doc_id, d)
    candidates = [(doc_id, i) for doc_id, d in sources.items() for i in range(1, len(d.src) - 1)]
    mergeable = sum(max(0, len(d.src) - 2) for d in sources.values())
    quota = round_half_up(rate * mergeable)

    pool = list(candidates)
    rng.shuffle(pool)
    taken: set[tuple[str, int]] = set()
    accepted: dict[str, list[ManifestEntry]] = {}
    n_accepted = 0
    while n_accepted < quota and pool:
        doc_id, i = pool.pop()
        if (doc_id, i) in taken or (doc_id, i + 1) in taken:
            continue
        sents = sources[doc_id].src.sentences
        original = join_sentences(sents[i:i + 2], sources[doc_id].src.lang)
        merged = rewriter(sents[i], sents[i + 1])
        if not similarity(merged, original) > accept_threshold:
            continue
        taken.update({(doc_id, i), (doc_id, i + 1)})
        accepted.setdefault(doc_id, []).append(ManifestEntry(doc_id, "", "merge", (i, i + 1), "src", merged))
        n_accepted += 1
    if n_accepted < quota:
        warnings.warn(
            f"merge candidates exhausted: accepted {n_accepted} of {quota} merges", PerturbationWarning, stacklevel=2
        )

    out = []
    manifest = []
    for d in source_docs.documents:
        entries = [replace(e, system_id=d.system_id) for e in accepted.get(d.doc_id, [])]
        manifest.extend(sorted(entries, key=lambda e: e.indices))
        out.append(_apply_merges(d, entries) if entries else d)
    return Corpus(tuple(out)), manifest


def load_prompt_template() -> str:
    return resources.files("segale.data").joinpath("merge_prompt.txt").read_text(encoding="utf-8")


class HttpRewriter:
    """``POST /rewrite {"segments": [a, b], "prompt_template_id"}`` -> ``{"merged"}``."""

    def __init__(self, base_url: str, prompt_template_id: str = "merge-v1", transport=None, **client_kw):
        self.prompt_template_id = prompt_template_id
        self._client = JsonClient(base_url, transport=transport, **client_kw)

    def __call__(self, first: str, second: str) -> str:
        data = self._client.post("/rewrite", {"segments": [first, second], "prompt_template_id": self.prompt_template_id})
        merged = data.get("merged")
        if not isinstance(merged, str):
            raise BackendError("rewrite response lacks a 'merged' string")
        return merged


class CommandAdapter:
    """Talks to a long-running subprocess, one JSON object per line in each direction."""

    def __init__(self, argv: Sequence[str]):
        self._proc = subprocess.Popen(
            list(argv), stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, encoding="utf-8", bufsize=1
        )

    def request(self, payload: dict) -> dict:
        assert self._proc.stdin is not None and self._proc.stdout is not None
        self._proc.stdin.write(json.dumps(payload, ensure_ascii=False) + "\n")
        self._proc.stdin.flush()
        line = self._proc.stdout.readline()
        if not line:
            raise BackendError(f"adapter process exited with code {self._proc.poll()}")
        return json.loads(line)

    def close(self) -> None:
        if self._proc.stdin:
            self._proc.stdin.close()
        self._proc.wait(timeout=10)


class CommandRewriter:
    def __init__(self, argv: Sequence[str], prompt_template_id: str = "merge-v1"):
        self._adapter = CommandAdapter(argv)
        self.prompt_template_id = prompt_template_id

    def __call__(self, first: str, second: str) -> str:
        return self._adapter.request({"segments": [first, second], "prompt_template_id": self.prompt_template_id})["merged"]


class CommandSimilarity:
    def __init__(self, argv: Sequence[str]):
        self._adapter = CommandAdapter(argv)

    def __call__(self, candidate: str, reference: str) -> float:
        return float(self._adapter.request({"candidate": candidate, "reference": reference})["score"])


@dataclass(frozen=True)
class Triplet:
    query: str
    positive: str
    negative: str
    negative_kind: str

    def to_json(self) -> dict:
        return {"query": self.query, "positive": self.positive, "negative": self.negative, "negative_kind": self.negative_kind}


def build_triplets(
    pairs: Sequence[tuple[str, str]],
    rng_seed: int = 0,
    src_lang: str = "und",
    tgt_lang: str = "und",
) -> list[Triplet]:
    """Two-sentence query/positive windows with a dropped-sentence and a nearby-substitution negative each."""
    if len(pairs) < 5:
        raise ValueError("need at least 5 sentence pairs")
    rng = random.Random(rng_seed)
    out = []
    n = len(pairs)
    for i in range(n - 1):
        (s0, t0), (s1, t1) = pairs[i], pairs[i + 1]
        query = join_sentences([s0, s1], src_lang)
        positive = join_sentences([t0, t1], tgt_lang)
        kept = t1 if rng.random() < 0.5 else t0
        if kept != positive:
            out.append(Triplet(query, positive, kept, DROPPED_SENTENCE))
        d = rng.randint(1, 3)
        if i + 1 + d < n:
            negative = join_sentences([t0, pairs[i + 1 + d][1]], tgt_lang)
            if negative != positive:
                out.append(Triplet(query, positive, negative, NEARBY_SUBSTITUTION))
    return out


TokenCounter = Callable[[str], int]


def default_token_counter(lang: str) -> TokenCounter:
    if base_lang(lang) in CJK_LANGS:
        return lambda s: sum(1 for ch in s if not ch.isspace())
    return lambda s: len(s.split())


@dataclass
class Chunk:
    sentences: list[str] = field(default_factory=list)
    tokens: int = 0


def chunk_document(
    text: str | SentenceList,
    max_tokens: int,
    counter: TokenCounter | None = None,
    lang: str = "en",
) -> list[list[str]]:
    """Greedily pack whole sentences into chunks of at most ``max_tokens`` tokens."""
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    sentences = text if isinstance(text, SentenceList) else segment(text, lang)
    if not len(sentences):
        return []
    counter = counter or default_token_counter(sentences.lang)
    chunks: list[Chunk] = []
    cur = Chunk()
    for s in sentences:
        n = counter(s)
        if cur.sentences and cur.tokens + n > max_tokens:
            chunks.append(cur)
            cur = Chunk()
        cur.sentences.append(s)
        cur.tokens += n
        if n > max_tokens:
            warnings.warn(f"sentence of {n} tokens exceeds the {max_tokens}-token budget", PerturbationWarning, stacklevel=2)
    chunks.append(cur)
    return [c.sentences for c in chunks]


def _char_spans(sentences: Sequence[str]) -> tuple[str, list[tuple[int, int]]]:
    """Concatenated non-whitespace character stream and each sentence's span within it."""
    parts = []
    spans = []
    pos = 0
    for s in sentences:
        stripped = "".join(s.split())
        spans.append((pos, pos + len(stripped)))
        parts.append(stripped)
        pos += len(stripped)
    return "".join(parts), spans


def estimate_overlap_size(gold_segments: SentenceList | Sequence[str], auto_segments: SentenceList | Sequence[str]) -> int:
    """One more than the largest number of automatic segments any gold segment's characters touch."""
    gold_text, gold_spans = _char_spans(list(gold_segments))
    auto_text, auto_spans = _char_spans(list(auto_segments))
    if gold_text != auto_text:
        raise ValueError("gold and automatic segmentations do not cover the same text")
    worst = 0
    k = 0
    for g0, g1 in gold_spans:
        if g1 == g0:
            continue
        while k < len(auto_spans) and auto_spans[k][1] <= g0:
            k += 1
        j = k
        count = 0
        while j < len(auto_spans) and auto_spans[j][0] < g1:
            if auto_spans[j][1] > auto_spans[j][0]:
                count += 1
            j += 1
        worst = max(worst, count)
    return worst + 1


def synthetic_parallel_corpus(
    n_docs: int,
    min_len: int,
    max_len: int,
    rng_seed: int = 0,
    lang_pair: str = "xx-yy",
    system_id: str = "sys",
) -> Corpus:
    """Keyed parallel documents for the synthetic embedder: sentence i of both sides shares key ``d<doc>s<i>``."""
    rng = random.Random(rng_seed)
    src_lang, _, tgt_lang = lang_pair.partition("-")
    docs = []
    for d in range(n_docs):
        n = rng.randint(min_len, max_len)
        keys = [f"d{d}s{i}" for i in range(n)]
        src = SentenceList(tuple(f"⟦{k}⟧ Source sentence {k}." for k in keys), src_lang)
        hyp = SentenceList(tuple(f"⟦{k}⟧ Target sentence {k}." for k in keys), tgt_lang or src_lang)
        ref = SentenceList(tuple(f"⟦{k}⟧ Reference sentence {k}." for k in keys), tgt_lang or src_lang)
        docs.append(Document(f"doc{d}", lang_pair, src, hyp=hyp, ref=ref, system_id=system_id))
    return Corpus(tuple(docs))
