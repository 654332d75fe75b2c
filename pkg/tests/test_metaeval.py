import itertools
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segale.metaeval import (
    DocSegments,
    MqmAnnotation,
    NullJudgment,
    correlation_report,
    doc_human_score,
    doc_human_scores,
    filter_documents,
    inject_null_judgments,
    kendall_tau,
    read_mqm,
    zscore_normalize,
)
from segale.score import METRICS


def ann(doc, seg, score, annotator="A", system="s"):
    return MqmAnnotation(doc, str(seg), system, annotator, score)


def brute_tau(x, y, variant="b"):
    n = len(x)
    conc = disc = tx = ty = 0
    for i, j in itertools.combinations(range(n), 2):
        dx, dy = x[i] - x[j], y[i] - y[j]
        if dx == 0:
            tx += 1
        if dy == 0:
            ty += 1
        if dx * dy > 0:
            conc += 1
        elif dx * dy < 0:
            disc += 1
    n0 = n * (n - 1) // 2
    if variant == "a":
        return (conc - disc) / n0
    return (conc - disc) / math.sqrt((n0 - tx) * (n0 - ty))


def test_zscore_two_point():
    out = zscore_normalize([ann("d", 0, 0.0), ann("d", 1, 10.0)])
    assert [z for _, z in out] == [-1.0, 1.0]


def test_zscore_constant_annotator():
    out = zscore_normalize([ann("d", i, 5.0) for i in range(3)])
    assert [z for _, z in out] == [0.0, 0.0, 0.0]


def test_zscore_hand_computed():
    out = zscore_normalize([ann("d", 0, 0.0), ann("d", 1, 5.0), ann("d", 2, 25.0)])
    std = math.sqrt(350 / 3)
    assert [z for _, z in out] == pytest.approx([-10 / std, -5 / std, 15 / std], abs=1e-12)
    assert [round(z, 3) for _, z in out] == [-0.926, -0.463, 1.389]


def test_zscore_is_per_annotator():
    data = [ann("d", 0, 0.0, "A"), ann("d", 1, 10.0, "A"), ann("d", 2, 100.0, "B"), ann("d", 3, 200.0, "B")]
    assert [z for _, z in zscore_normalize(data)] == [-1.0, 1.0, -1.0, 1.0]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("ABC"), st.floats(0, 25)), min_size=1, max_size=60))
def test_zscore_moments(rows):
    data = [ann("d", i, s, a) for i, (a, s) in enumerate(rows)]
    out = zscore_normalize(data)
    for annotator in "ABC":
        zs = [z for a, z in out if a.annotator_id == annotator]
        raw = [a.mqm_score for a, _ in out if a.annotator_id == annotator]
        if len(zs) < 2 or max(raw) - min(raw) < 1e-6:
            continue
        mean = math.fsum(zs) / len(zs)
        assert abs(mean) < 1e-9
        assert abs(math.sqrt(math.fsum((z - mean) ** 2 for z in zs) / len(zs)) - 1) < 1e-9


def test_inject_single_null():
    base = [ann("d", 0, 3.0), ann("d", 1, 0.0)]
    out = inject_null_judgments(base, [NullJudgment("d", "s", "null:src:2")])
    assert out[:2] == base
    assert out[2] == MqmAnnotation("d", "null:src:2", "s", "A", 25.0, synthetic=True)


def test_inject_nothing_and_two():
    base = [ann("d", 0, 3.0)]
    assert inject_null_judgments(base, []) == base
    out = inject_null_judgments(base, [NullJudgment("d", "s", "x1"), NullJudgment("d", "s", "x2")])
    assert len(out) == 3 and [a.mqm_score for a in out[1:]] == [25.0, 25.0]


def test_inject_attribution_policies():
    base = [ann("d", 0, 1.0, "B"), ann("d", 1, 1.0, "A"), ann("d", 2, 1.0, "B"), ann("e", 0, 1.0, "C", "t")]
    out = inject_null_judgments(base, [NullJudgment("d", "s", "n0")])
    assert out[-1].annotator_id == "B"
    tie = [ann("d", 0, 1.0, "B"), ann("d", 1, 1.0, "A")]
    assert inject_null_judgments(tie, [NullJudgment("d", "s", "n")])[-1].annotator_id == "A"
    # No annotator for that system: fall back to the document's annotators.
    assert inject_null_judgments(base, [NullJudgment("e", "other", "n")])[-1].annotator_id == "C"
    with pytest.raises(ValueError, match="no annotator"):
        inject_null_judgments(base, [NullJudgment("zzz", "s", "n")])


def test_inject_replace_existing():
    base = [ann("d", 0, 1.0), ann("d", 1, 2.0)]
    out = inject_null_judgments(base, [NullJudgment("d", "s", "1")], replace_existing=True)
    assert [a.mqm_score for a in out] == [1.0, 25.0] and out[1].synthetic


def test_injection_must_precede_normalization():
    base = [ann("d1", 0, 0.0), ann("d1", 1, 2.0), ann("d2", 0, 4.0), ann("d2", 1, 6.0)]
    nulls = [NullJudgment("d1", "s", "n0")]
    right = doc_human_scores(zscore_normalize(inject_null_judgments(base, nulls)))
    # Wrong order: normalize first with the real-only statistics, then score the 25 on that scale.
    z = zscore_normalize(base)
    mean = math.fsum(a.mqm_score for a in base) / 4
    std = math.sqrt(math.fsum((a.mqm_score - mean) ** 2 for a in base) / 4)
    z.append((MqmAnnotation("d1", "n0", "s", "A", 25.0, True), (25.0 - mean) / std))
    wrong = doc_human_scores(z)
    assert right[("d1", "s")] != pytest.approx(wrong[("d1", "s")], abs=1e-6)
    assert right[("d2", "s")] != pytest.approx(wrong[("d2", "s")], abs=1e-6)


def test_doc_human_score_examples():
    def doc(zs):
        return [(ann("d", i, 0.0), z) for i, z in enumerate(zs)]

    assert doc_human_score(doc([-1.0, 1.0]), "d") == 0.0
    assert doc_human_score(doc([0.5]), "d") == 0.5
    assert doc_human_score(doc([0.2, 0.4, 0.9]), "d") == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ValueError):
        doc_human_score(doc([1.0]), "missing")


def test_kendall_examples():
    assert kendall_tau([1, 2, 3], [1, 2, 3]) == 1.0
    assert kendall_tau([1, 2, 3], [3, 2, 1]) == -1.0
    assert kendall_tau([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(2 / 3, abs=1e-15)
    with pytest.raises(ValueError, match="degenerate ranking"):
        kendall_tau([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        kendall_tau([1], [1])


def test_kendall_matches_brute_force_on_random_instances():
    rng = random.Random(20240611)
    checked = 0
    while checked < 1000:
        n = rng.randint(2, 50)
        levels = rng.choice([3, 5, 10, 1000])
        x = [rng.randrange(levels) for _ in range(n)]
        y = [rng.randrange(levels) for _ in range(n)]
        if len(set(x)) == 1 or len(set(y)) == 1:
            continue
        assert kendall_tau(x, y) == brute_tau(x, y)
        assert kendall_tau(x, y, variant="a") == brute_tau(x, y, variant="a")
        checked += 1


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(-20, 20), st.integers(-5, 5)), min_size=2, max_size=40))
def test_kendall_rank_invariance(points):
    x = [p[0] for p in points]
    y = [p[1] for p in points]
    if len(set(x)) == 1 or len(set(y)) == 1:
        return
    tau = kendall_tau(x, y)
    assert kendall_tau([3 * v + 7 for v in x], y) == tau
    assert kendall_tau([v ** 3 for v in x], y) == tau
    assert -1.0 <= tau <= 1.0


def test_filter_boundaries():
    segs = tuple(str(i) for i in range(10))
    docs = [DocSegments("three", "s", segs), DocSegments("two", "s", segs), DocSegments("full", "s", segs)]
    annotations = [ann("three", i, 0.0) for i in range(7)]
    annotations += [ann("two", i, 0.0) for i in range(8)]
    annotations += [ann("full", i, 0.0) for i in range(10)]
    kept = [d.doc_id for d in filter_documents(docs, annotations)]
    assert kept == ["two", "full"]


def test_read_mqm_tsv_and_jsonl(tmp_path):
    tsv = tmp_path / "m.tsv"
    tsv.write_text("system\tdoc\tseg\tannotator\tscore\nsysA\td1\t0\trater1\t5\nsysA\td1\t1\trater1\t0\n")
    jl = tmp_path / "m.jsonl"
    jl.write_text('{"system": "sysA", "doc": "d1", "seg": 0, "annotator": "rater1", "score": 5}\n')
    assert read_mqm(tsv)[0] == MqmAnnotation("d1", "0", "sysA", "rater1", 5.0)
    assert read_mqm(jl) == read_mqm(tsv)[:1]
    bad = tmp_path / "bad.tsv"
    bad.write_text("system\tdoc\tseg\tannotator\tscore\nsysA\td1\t0\trater1\toops\n")
    with pytest.raises(ValueError, match="bad.tsv:2"):
        read_mqm(bad)


def test_report_metric_equals_human():
    human = {("en-de", f"d{i}", "s"): 0.1 * i for i in range(6)}
    human.update({("zh-en", f"d{i}", "s"): -0.2 * i for i in range(5)})
    # Metric quality is the negated z-mean, so perfect agreement means tau = 1.
    scores = {"comet": {k: (-v, 0.0) for k, v in human.items()}}
    metricx = {"metricx": {k: (v, 0.0) for k, v in human.items()}}
    report = correlation_report({**scores, **metricx}, human, specs=METRICS)
    assert all(c.tau == 1.0 for c in report.cells)
    assert {(c.lang_pair, c.metric) for c in report.cells} == {
        ("en-de", "comet"), ("zh-en", "comet"), ("en-de", "metricx"), ("zh-en", "metricx")
    }


def test_report_delta_gold():
    human = {("en-de", "d0", "s"): 0.0, ("en-de", "d1", "s"): 1.0, ("zh-en", "d0", "s"): 0.0, ("zh-en", "d1", "s"): 1.0}
    scores = {
        "comet": {
            ("en-de", "d0", "s"): (0.9, 0.112),
            ("en-de", "d1", "s"): (0.1, 0.112),
            ("zh-en", "d0", "s"): (0.9, 0.005),
            ("zh-en", "d1", "s"): (0.1, 0.009),
        }
    }
    report = correlation_report(scores, human, gold_na_ratios={"en-de": 0.10, "zh-en": 0.0})
    assert report.cell("en-de", "comet").delta_gold == pytest.approx(0.012, abs=1e-12)
    assert report.cell("zh-en", "comet").delta_gold == pytest.approx(0.007, abs=1e-12)
    assert "11.2%" in report.to_table() and "1.2%" in report.to_table()


def test_report_absent_cell():
    human = {("en-de", "d0", "s"): 0.0}
    scores = {"comet": {("en-de", "d0", "s"): (0.5, 0.0), ("en-de", "d1", "s"): (0.4, 0.0)}}
    cell = correlation_report(scores, human).cell("en-de", "comet")
    assert cell.absent and cell.n_docs == 1 and cell.tau is None
    assert " - " in correlation_report(scores, human).to_table()


def test_report_per_system_pooling():
    human = {("en-de", f"d{i}", sys): float(i) for i in range(4) for sys in ("a", "b")}
    scores = {"comet-qe": {("en-de", f"d{i}", "a"): (-float(i), 0.0) for i in range(4)}}
    scores["comet-qe"].update({("en-de", f"d{i}", "b"): (float(i), 0.0) for i in range(4)})
    report = correlation_report(scores, human, pooling="per_system")
    assert report.cell("en-de", "comet-qe").tau == 0.0
    assert report.cell("en-de", "comet-qe").n_docs == 8
