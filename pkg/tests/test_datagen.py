import sys
import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segale.corpus import Corpus, Document
from segale.datagen import (
    DROPPED_SENTENCE,
    NEARBY_SUBSTITUTION,
    OVER_TRANSLATE,
    UNDER_TRANSLATE,
    CommandRewriter,
    CommandSimilarity,
    HttpRewriter,
    PerturbationSpec,
    PerturbationWarning,
    apply_manifest,
    build_triplets,
    chunk_document,
    drop_segments,
    estimate_overlap_size,
    gold_na_ratio,
    load_prompt_template,
    merge_candidates,
    read_manifest,
    round_half_up,
    synthetic_parallel_corpus,
    write_manifest,
)
from segale.textseg import SentenceList


def corpus_of(sizes, systems=("sys",), with_ref=True):
    docs = []
    for d, n in enumerate(sizes):
        for sys_id in systems:
            src = SentenceList(tuple(f"src {d}.{i}." for i in range(n)), "en")
            hyp = SentenceList(tuple(f"hyp {sys_id} {d}.{i}." for i in range(n)), "de")
            ref = SentenceList(tuple(f"ref {d}.{i}." for i in range(n)), "de") if with_ref else None
            docs.append(Document(f"d{d}", "en-de", src, hyp=hyp, ref=ref, system_id=sys_id))
    return Corpus(tuple(docs))


def concat(a, b):
    return f"{a} {b}"


def test_round_half_up():
    assert [round_half_up(x) for x in (0.5, 1.5, 2.5, 2.4999)] == [1, 2, 3, 2]


def test_drop_exact_quota():
    corpus = corpus_of([10] * 10)
    out, manifest = drop_segments(corpus, PerturbationSpec(UNDER_TRANSLATE, 0.10, rng_seed=3))
    assert sum(len(e.indices) for e in manifest) == 10
    assert sum(len(d.hyp) for d in out) == 90
    assert all(e.side == "hyp" for e in manifest)


def test_drop_skips_single_segment_documents():
    corpus = corpus_of([1, 8, 1, 12, 1])
    for seed in range(50):
        _, manifest = drop_segments(corpus, PerturbationSpec(UNDER_TRANSLATE, 0.3, rng_seed=seed))
        assert {e.doc_id for e in manifest} <= {"d1", "d3"}
        assert sum(len(e.indices) for e in manifest) == round_half_up(0.3 * 20)


def test_drop_all_single_segment_is_an_error():
    with pytest.raises(ValueError):
        drop_segments(corpus_of([1, 1]), PerturbationSpec(UNDER_TRANSLATE))


def test_drop_is_deterministic():
    corpus = corpus_of([7, 9, 13])
    spec = PerturbationSpec(OVER_TRANSLATE, 0.2, rng_seed=11)
    assert drop_segments(corpus, spec) == drop_segments(corpus, spec)
    other = drop_segments(corpus, PerturbationSpec(OVER_TRANSLATE, 0.2, rng_seed=12))
    assert other[1] != drop_segments(corpus, spec)[1]


def test_document_scope_takes_rate_from_each_document():
    corpus = corpus_of([20, 30, 41, 1])
    _, manifest = drop_segments(corpus, PerturbationSpec(UNDER_TRANSLATE, 0.1, rng_seed=0, scope="document"))
    assert {e.doc_id: len(e.indices) for e in manifest} == {"d0": 2, "d1": 3, "d2": 4}


def test_over_translate_shares_deletion_across_systems():
    corpus = corpus_of([10, 10], systems=("a", "b"))
    out, manifest = drop_segments(corpus, PerturbationSpec(OVER_TRANSLATE, 0.2, rng_seed=1))
    by_doc = {}
    for e in manifest:
        by_doc.setdefault(e.doc_id, set()).add(e.indices)
        assert e.side == "src"
    assert all(len(v) == 1 for v in by_doc.values())
    for d in out:
        assert len(d.ref) == len(d.src)
        assert len(d.hyp) == 10


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.integers(1, 15), min_size=1, max_size=8).filter(lambda s: max(s) > 1),
    st.sampled_from([OVER_TRANSLATE, UNDER_TRANSLATE]),
    st.floats(0.05, 0.6),
    st.integers(0, 2**32 - 1),
    st.sampled_from(["corpus", "document"]),
)
def test_manifest_reconstructs_perturbation(sizes, kind, rate, seed, scope):
    corpus = corpus_of(sizes, systems=("a", "b"))
    out, manifest = drop_segments(corpus, PerturbationSpec(kind, rate, seed, scope))
    assert apply_manifest(corpus, manifest) == out


def test_manifest_file_round_trip(tmp_path):
    corpus = corpus_of([6, 6])
    out, manifest = drop_segments(corpus, PerturbationSpec(UNDER_TRANSLATE, 0.25, 4))
    write_manifest(tmp_path / "m.jsonl", manifest)
    assert read_manifest(tmp_path / "m.jsonl") == manifest
    assert apply_manifest(corpus, read_manifest(tmp_path / "m.jsonl")) == out


def test_gold_na_ratio_matches_removed_fraction():
    corpus = corpus_of([10, 20, 30, 40])
    _, manifest = drop_segments(corpus, PerturbationSpec(UNDER_TRANSLATE, 0.1, 9))
    assert gold_na_ratio(corpus, manifest) == 0.1
    assert gold_na_ratio(corpus, []) == 0.0


def test_merge_identity_rewriter_meets_quota():
    corpus = corpus_of([12, 12])
    out, manifest = merge_candidates(corpus, 0.2, lambda a, b: 1.0, concat, rng_seed=2)
    assert len(manifest) == round_half_up(0.2 * 20)
    for e in manifest:
        i = e.indices[0]
        assert 1 <= i and e.indices == (i, i + 1)
        d = next(x for x in corpus if x.doc_id == e.doc_id)
        assert e.text == f"{d.src[i]} {d.src[i + 1]}"
    assert apply_manifest(corpus, manifest) == out
    for d in out:
        assert len(d.ref) == len(d.src)


def test_merge_never_uses_first_or_last_segment():
    corpus = corpus_of([4, 5, 3])
    for seed in range(30):
        _, manifest = merge_candidates(corpus, 0.5, lambda a, b: 1.0, concat, rng_seed=seed)
        for e in manifest:
            n = {"d0": 4, "d1": 5, "d2": 3}[e.doc_id]
            assert e.indices[0] >= 1 and e.indices[0] <= n - 2


def test_merge_zero_similarity_warns():
    corpus = corpus_of([10])
    with pytest.warns(PerturbationWarning, match="exhausted"):
        out, manifest = merge_candidates(corpus, 0.3, lambda a, b: 0.0, concat)
    assert manifest == [] and out == corpus


def test_merge_threshold_is_strict():
    corpus = corpus_of([10])
    with pytest.warns(PerturbationWarning):
        _, manifest = merge_candidates(corpus, 0.3, lambda a, b: 0.85, concat)
    assert manifest == []
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        _, manifest = merge_candidates(corpus, 0.3, lambda a, b: 0.8500001, concat)
    assert len(manifest) == round_half_up(0.3 * 8)


def test_merge_resamples_after_rejection():
    corpus = corpus_of([20])
    calls = []

    def picky(merged, original):
        calls.append(merged)
        return 0.9 if len(calls) % 2 == 0 else 0.1

    _, manifest = merge_candidates(corpus, 0.1, picky, concat, rng_seed=5)
    assert len(manifest) == round_half_up(0.1 * 18)
    assert len(calls) >= 2 * len(manifest)


def test_prompt_template_has_placeholders():
    text = load_prompt_template()
    assert "{segment_1}" in text and "{segment_2}" in text


def test_http_rewriter(stub_server):
    stub_server.routes["/rewrite"] = lambda p: (200, {"merged": "+".join(p["segments"])})
    rewriter = HttpRewriter(stub_server.url, backoff=0.01)
    assert rewriter("a", "b") == "a+b"
    assert stub_server.requests[0][1]["prompt_template_id"] == "merge-v1"


ECHO = (
    "import json, sys\n"
    "for line in sys.stdin:\n"
    "    req = json.loads(line)\n"
    "    if 'segments' in req:\n"
    "        out = {'merged': ' & '.join(req['segments'])}\n"
    "    else:\n"
    "        out = {'score': 1.0 if req['candidate'] == req['reference'] else 0.5}\n"
    "    print(json.dumps(out), flush=True)\n"
)


def test_command_adapters():
    rewriter = CommandRewriter([sys.executable, "-c", ECHO])
    similarity = CommandSimilarity([sys.executable, "-c", ECHO])
    try:
        assert rewriter("x", "y") == "x & y"
        assert similarity("same", "same") == 1.0
        assert similarity("a", "b") == 0.5
    finally:
        rewriter._adapter.close()
        similarity._adapter.close()


def pairs_of(n):
    return [(f"S{i}.", f"T{i}.") for i in range(n)]


def test_triplets_shape():
    pairs = pairs_of(10)
    trips = build_triplets(pairs, rng_seed=0, src_lang="en", tgt_lang="de")
    assert len(trips) <= 2 * 9
    assert sum(t.negative_kind == DROPPED_SENTENCE for t in trips) == 9
    positives = {f"T{i}. T{i + 1}." for i in range(9)}
    for t in trips:
        assert t.positive in positives
        assert t.negative != t.positive
        assert len(t.query.split(". ")) == 2 and len(t.positive.split(". ")) == 2
        if t.negative_kind == DROPPED_SENTENCE:
            assert t.negative in t.positive.split(" ")
        else:
            assert t.negative_kind == NEARBY_SUBSTITUTION
            first, second = t.negative.split(" ")
            assert t.positive.startswith(first)
            assert int(second[1:-1]) - int(first[1:-1]) in (2, 3, 4)


def test_triplets_deterministic_and_minimum():
    assert build_triplets(pairs_of(8), 3) == build_triplets(pairs_of(8), 3)
    with pytest.raises(ValueError):
        build_triplets(pairs_of(4))


def hundred_token_sentences(k):
    return SentenceList(tuple(" ".join(["w"] * 99 + [f"s{i}."]) for i in range(k)), "en")


def test_chunk_fits_one():
    assert len(chunk_document(hundred_token_sentences(10), 1000)) == 1


def test_chunk_greedy_pairs():
    chunks = chunk_document(hundred_token_sentences(10), 250)
    assert [len(c) for c in chunks] == [2, 2, 2, 2, 2]


def test_chunk_over_budget_sentence():
    long = SentenceList((" ".join(["w"] * 2000),), "en")
    with pytest.warns(PerturbationWarning):
        chunks = chunk_document(long, 1000)
    assert len(chunks) == 1


def test_chunk_text_and_cjk():
    assert chunk_document("", 10) == []
    assert chunk_document("One two. Three four. Five.", 4) == [["One two.", "Three four."], ["Five."]]
    assert chunk_document("你好。再见。", 3, lang="zh") == [["你好。"], ["再见。"]]
    assert chunk_document("a b. c d.", 2, counter=lambda s: 1) == [["a b.", "c d."]]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=1, max_size=40), st.integers(1, 60))
def test_chunk_properties(lengths, budget):
    sents = SentenceList(tuple(" ".join(["w"] * n) for n in lengths), "en")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PerturbationWarning)
        chunks = chunk_document(sents, budget)
    assert [s for c in chunks for s in c] == list(sents)
    for c in chunks:
        total = sum(len(s.split()) for s in c)
        assert total <= budget or len(c) == 1


def test_overlap_estimate_examples():
    sents = ["Alpha beta.", "Gamma delta.", "Epsilon."]
    assert estimate_overlap_size(sents, sents) == 2
    assert estimate_overlap_size(["a b c d e."], ["a", "b", "c", "d", "e."]) == 6
    fine = [f"s{i}." for i in range(8)]
    coarse = [fine[i] + " " + fine[i + 1] for i in range(0, 8, 2)]
    assert estimate_overlap_size(coarse, fine) == 3


def test_overlap_estimate_straddling_and_mismatch():
    assert estimate_overlap_size(["ab", "cd"], ["a", "bc", "d"]) == 3
    with pytest.raises(ValueError):
        estimate_overlap_size(["abc"], ["abd"])


def test_synthetic_corpus():
    corpus = synthetic_parallel_corpus(5, 3, 6, rng_seed=1)
    assert len(corpus) == 5
    for d in corpus:
        assert 3 <= len(d.src) <= 6 and len(d.hyp) == len(d.src) == len(d.ref)
        assert d.src[0].startswith("⟦") and d.hyp[0].split()[0] == d.src[0].split()[0]
    assert synthetic_parallel_corpus(5, 3, 6, rng_seed=1) == corpus
