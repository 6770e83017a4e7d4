import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diarkit.metrics import (
    DERBreakdown,
    ScoringOptions,
    UndefinedRateError,
    der,
    der_corpus,
    pairwise_der_matrix,
    parse_uem,
)
from diarkit.timeline import Annotation, Timeline
from oracles import CELL, der_oracle, random_annotation

SEC = 10_000


def ann(*segs, rec="r"):
    return Annotation.from_segments(rec, [(k, int(s * SEC), int(e * SEC)) for k, s, e in segs])


def components(b: DERBreakdown):
    return b.miss_ticks, b.false_alarm_ticks, b.confusion_ticks, b.total_reference_ticks


def test_perfect_and_relabelled_hypothesis():
    ref = ann(("a", 0, 5), ("b", 4, 9))
    assert der(ref, ref).der == 0.0
    assert der(ref, ref.rename({"a": "x", "b": "y"}), ScoringOptions(collar=0)).der == 0.0


def test_all_miss_and_all_false_alarm():
    ref = ann(("a", 0, 10))
    empty = Annotation("r")
    res = der(ref, empty, ScoringOptions(collar=0))
    assert res.der == 1.0 and res.miss == 10.0
    res = der(empty, ref, ScoringOptions(collar=0))
    assert res.false_alarm == 10.0
    with pytest.raises(UndefinedRateError):
        res.der


def test_confusion_and_mapping():
    ref = ann(("a", 0, 6), ("b", 6, 10))
    hyp = ann(("x", 0, 4), ("y", 4, 10))
    res = der(ref, hyp, ScoringOptions(collar=0))
    assert res.mapping == {"a": "x", "b": "y"}
    assert res.confusion == pytest.approx(2.0)
    assert res.der == pytest.approx(0.2)


def test_collar_removes_boundary_errors():
    ref = ann(("a", 1, 5))
    hyp = ann(("a", 1.2, 4.9))
    assert der(ref, hyp, ScoringOptions(collar=0.25)).der == 0.0
    assert der(ref, hyp, ScoringOptions(collar=0.0)).miss == pytest.approx(0.3)


def test_ignore_overlaps():
    ref = ann(("a", 0, 6), ("b", 4, 10))
    hyp = ann(("a", 0, 5), ("b", 5, 10))
    opts = ScoringOptions(collar=0, score_overlaps=False)
    assert der(ref, hyp, opts).der == 0.0
    assert der(ref, hyp, ScoringOptions(collar=0)).miss == pytest.approx(2.0)


def test_uem_limits_scoring():
    ref = ann(("a", 0, 10))
    hyp = ann(("a", 0, 5))
    uem = parse_uem("r 1 0.0 5.0\n# comment\n")["r"]
    assert der(ref, hyp, ScoringOptions(collar=0, uem=uem)).der == 0.0
    with pytest.raises(ValueError):
        parse_uem("r 1 0.0\n")


def test_negative_collar_rejected():
    with pytest.raises(ValueError):
        ScoringOptions(collar=-0.1)


def test_corpus_der_sums_components():
    rng = np.random.default_rng(2)
    pairs = [(random_annotation(rng, f"r{i}"), random_annotation(rng, f"r{i}")) for i in range(5)]
    total = der_corpus(pairs)
    parts = [der(r, h) for r, h in pairs]
    assert total.miss_ticks == sum(p.miss_ticks for p in parts)
    assert total.total_reference_ticks == sum(p.total_reference_ticks for p in parts)
    with pytest.raises(ValueError):
        der_corpus([])


def test_breakdown_as_dict():
    d = DERBreakdown(10, 20, 30, 120).as_dict()
    assert d["der"] == pytest.approx(0.5)
    assert DERBreakdown().as_dict()["der"] is None


@pytest.mark.parametrize("collar_cells", [0, 3, 25])
@pytest.mark.parametrize("score_overlaps", [True, False])
def test_der_matches_permutation_oracle(collar_cells, score_overlaps):
    rng = np.random.default_rng(100 + collar_cells)
    opts = ScoringOptions(collar=collar_cells * CELL / SEC, score_overlaps=score_overlaps)
    for _ in range(40):
        ref = random_annotation(rng, n_speakers=int(rng.integers(0, 5)), n_cells=300)
        hyp = random_annotation(rng, n_speakers=int(rng.integers(0, 5)), n_cells=300)
        assert components(der(ref, hyp, opts)) == der_oracle(ref, hyp, collar_cells, score_overlaps)


def test_der_with_uem_matches_oracle():
    rng = np.random.default_rng(9)
    for _ in range(30):
        ref = random_annotation(rng, n_speakers=3, n_cells=300)
        hyp = random_annotation(rng, n_speakers=3, n_cells=300)
        a, b = sorted(rng.integers(0, 320, size=2))
        uem = Timeline(((int(a) * CELL, int(b) * CELL),))
        got = der(ref, hyp, ScoringOptions(collar=0.02, uem=uem))
        assert components(got) == der_oracle(ref, hyp, 2, True, [(int(a), int(b))])


segments = st.lists(
    st.tuples(st.sampled_from(["a", "b", "c", "d"]), st.integers(0, 200), st.integers(1, 40)), max_size=10
)


@given(segments, segments)
def test_der_invariants(rs, hs):
    ref = Annotation.from_segments("r", [(k, s * CELL, (s + d) * CELL) for k, s, d in rs])
    hyp = Annotation.from_segments("r", [(k, s * CELL, (s + d) * CELL) for k, s, d in hs])
    res = der(ref, hyp, ScoringOptions(collar=0))
    assert min(res.miss_ticks, res.false_alarm_ticks, res.confusion_ticks) >= 0
    # relabelling the hypothesis never changes the score
    renamed = hyp.rename({k: f"z{k}" for k in hyp.labels})
    assert components(der(ref, renamed, ScoringOptions(collar=0))) == components(res)
    assert components(res) == der_oracle(ref, hyp)


def test_pairwise_der_matrix():
    h1 = ann(("a", 0, 10))
    h2 = ann(("x", 0, 5))
    empty = Annotation("r")
    D = pairwise_der_matrix([h1, h2, empty])
    assert D[0, 0] == 0.0
    assert D[0, 1] == pytest.approx(0.5)
    assert D[1, 0] == pytest.approx(1.0)
    assert D[2, 0] == 1.0
    assert pairwise_der_matrix([empty, empty])[0, 1] == 0.0


@given(segments, segments, st.integers(0, 30), st.integers(0, 30))
def test_larger_collar_never_scores_more_reference(rs, hs, c1, c2):
    ref = Annotation.from_segments("r", [(k, s * CELL, (s + d) * CELL) for k, s, d in rs])
    hyp = Annotation.from_segments("r", [(k, s * CELL, (s + d) * CELL) for k, s, d in hs])
    lo, hi = sorted((c1, c2))
    small = der(ref, hyp, ScoringOptions(collar=lo * CELL / SEC))
    large = der(ref, hyp, ScoringOptions(collar=hi * CELL / SEC))
    assert large.total_reference_ticks <= small.total_reference_ticks
