import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cwtscan.config import PipelineConfig
from cwtscan.siamese import (ScanError, SiamesePair, SiameseScorer, count_flags, load_report,
                             pair_scores, report_scan, scan_signal, scan_trace, similarity)
from cwtscan.synth import AnomalySpec, make_reference_trace, with_anomaly
from cwtscan.trace import MultivariateTrace, Signal

from stubs import FixedProbs, Projection, labelled_images

prob_rows = arrays(float, st.integers(2, 9), elements=st.floats(0, 1)).filter(
    lambda v: v.sum() > 1e-6).map(lambda v: v / v.sum())


def test_one_hot_pairs():
    m = FixedProbs([[0, 1, 0], [0, 1, 0], [1, 0, 0]])
    X = labelled_images([0, 1, 2])
    assert similarity(m, SiamesePair(X[0], X[1])) == 1.0
    assert similarity(m, SiamesePair(X[0], X[2])) == 0.0


def test_uniform_over_seven():
    m = FixedProbs([np.full(7, 1 / 7)])
    X = labelled_images([0, 0])
    assert similarity(m, SiamesePair(X[0], X[1])) == pytest.approx(1 / 7, abs=1e-15)


def test_pair_shape_mismatch():
    with pytest.raises(ValueError):
        SiamesePair(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)))


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_symmetry_and_bounds(data):
    p = data.draw(prob_rows)
    q = data.draw(arrays(float, p.size, elements=st.floats(0, 1)).filter(
        lambda v: v.sum() > 1e-6).map(lambda v: v / v.sum()))
    a = pair_scores(p[None], q[None])[0]
    b = pair_scores(q[None], p[None])[0]
    assert a == b
    assert -1e-12 <= a <= 1 + 1e-12


@settings(max_examples=100, deadline=None)
@given(prob_rows)
def test_confident_self_score(p):
    assert pair_scores(p[None], p[None])[0] >= p.max() ** 2 - 1e-12


def test_scorer_shares_one_model():
    m = FixedProbs([[0.9, 0.1], [0.2, 0.8]])
    scorer = SiameseScorer(m, threshold=0.5)
    X = labelled_images([0, 1, 0])
    Y = labelled_images([0, 0, 1])
    np.testing.assert_allclose(scorer.score_pairs(X, Y), [0.82, 0.26, 0.26])
    np.testing.assert_array_equal(scorer.predict(X, Y), [False, True, True])
    np.testing.assert_array_equal(scorer.score_pairs(X, Y), scorer.score_pairs(Y, X))


# -- scanning ---------------------------------------------------------------------------

def test_identical_traces_keep_classes():
    ref = make_reference_trace(seed=4)
    model = Projection()
    verdicts = scan_trace(model, ref, ref, PipelineConfig(), threshold=0.0)
    for vs in verdicts.values():
        assert [v.time_index for v in vs] == list(range(len(vs)))
        assert all(v.anchor_class == v.query_class for v in vs)
        assert all(not v.is_anomaly for v in vs)
    assert count_flags(verdicts) == 0


def test_scan_windows_sit_on_reference_peaks_and_probes():
    ref = make_reference_trace(seed=4)
    verdicts = scan_trace(Projection(), ref, ref, PipelineConfig())
    t = [v.window_center_seconds for v in verdicts["var1"]]
    assert t == sorted(t)
    assert any(v % 5 != 0 for v in t)          # peak windows
    assert sum(v % 10 == 5 for v in t) >= 3     # probes on the 10 s stride


def test_time_shift_changes_only_the_shifted_variable():
    ref = make_reference_trace(seed=4)
    query = with_anomaly(ref, "var1", AnomalySpec("time-shift", shift_seconds=2.0))
    model = Projection()
    a = scan_trace(model, ref, ref, PipelineConfig())
    b = scan_trace(model, ref, query, PipelineConfig())
    assert [v.score for v in a["var2"]] == [v.score for v in b["var2"]]
    assert any(x.score != y.score for x, y in zip(a["var1"], b["var1"]))


def test_variable_mismatch():
    ref = make_reference_trace(seed=1)
    other = MultivariateTrace((ref["var1"].replace(ref["var1"].values, name="pressure"),
                               ref["var2"]))
    with pytest.raises(ScanError):
        scan_trace(Projection(), ref, other, PipelineConfig())


def test_no_peaks_warns_and_probes():
    # min-max scaling would stretch pure noise into peaks, so the idle channel is constant
    flat = Signal(np.full(600, 0.3), name="idle")
    with pytest.warns(UserWarning, match="no reference peaks"):
        vs = scan_signal(Projection(), flat, flat, PipelineConfig())
    assert [v.window_center_seconds for v in vs] == [5.0, 15.0, 25.0, 35.0, 45.0]


def test_short_trace_gives_empty_scan():
    short = Signal(np.zeros(40))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert scan_signal(Projection(), short, short, PipelineConfig()) == []


# -- reports ------------------------------------------------------------------------------

def test_report_round_trip(tmp_path):
    ref = make_reference_trace(seed=2)
    query = with_anomaly(ref, "var2", AnomalySpec("time-shift", shift_seconds=-2.0))
    verdicts = scan_trace(Projection(), ref, query, PipelineConfig(), threshold=0.9)
    path = report_scan(verdicts, tmp_path / "r.json", 0.9, "abc", timeline_dir=tmp_path)
    back = load_report(path)
    assert back == verdicts
    assert count_flags(back) == sum(v.score < 0.9 for vs in verdicts.values() for v in vs)
    assert (tmp_path / "timeline_var1.png").exists()


def test_empty_report(tmp_path):
    path = report_scan({}, tmp_path / "empty.json")
    assert load_report(path) == {}
    path = report_scan([], tmp_path / "empty2.json")
    assert load_report(path) == {"signal": []}
