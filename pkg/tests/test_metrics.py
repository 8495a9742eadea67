import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccpv.errors import EmptyInput, EmptyScores
from ccpv.metrics import RocCurve, ScoreSet, eer, gar_at_far, metrics_report, rank1_acc, roc
from oracles import eer_count, gar_at_far_count, roc_count

score_lists = st.lists(st.floats(0, 3, allow_nan=False), min_size=1, max_size=40)
# a coarse grid keeps the transforms strictly increasing in floating point
grid_lists = st.lists(st.integers(0, 300).map(lambda k: k / 100), min_size=1, max_size=40)


def test_eer_separable():
    assert eer(ScoreSet([0.1, 0.2], [0.8, 0.9]))[0] == 0.0


def test_eer_indistinguishable():
    s = [0.2, 0.5, 0.5, 0.7]
    assert eer(ScoreSet(s, list(reversed(s))))[0] == pytest.approx(0.5)


def test_eer_small_overlap_case():
    # at t=0.3 FAR = FRR = 0.5, an exact crossing; t=0.4 averages to 0.25 but FAR - FRR = 0.5 there
    value, thr = eer(ScoreSet([0.1, 0.4], [0.3, 0.9]))
    assert (value, thr) == (0.5, 0.3)
    assert (value, thr) == eer_count([0.1, 0.4], [0.3, 0.9])


def test_eer_requires_both_lists():
    with pytest.raises(EmptyScores):
        eer(ScoreSet([], [0.1]))
    with pytest.raises(EmptyScores):
        eer(ScoreSet([0.1], []))


def test_gar_at_far_examples():
    assert gar_at_far(ScoreSet([0.1, 0.2], [0.8, 0.9]), 1e-6) == 1.0
    assert gar_at_far(ScoreSet([0.4] * 10, [0.5] * 1000), 1e-3) == 1.0
    with pytest.warns(RuntimeWarning):
        assert gar_at_far(ScoreSet([0.9, 0.8], [0.1, 0.2]), 0.1) == 0.0
    with pytest.raises(ValueError):
        gar_at_far(ScoreSet([0.1], [0.2]), 0.0)


def test_roc_examples():
    curve = roc(ScoreSet([0.1], [0.9]))
    assert (0.0, 1.0) in [(f, g) for f, g, _ in curve.points]
    rng = np.random.default_rng(0)
    s = rng.random(200)
    diag = roc(ScoreSet(s, s.copy()))
    np.testing.assert_allclose(diag.far, diag.gar, atol=1 / 200)
    with pytest.raises(EmptyScores):
        roc(ScoreSet([], [1.0]))


def test_roc_matches_counting_oracle_100x100():
    rng = np.random.default_rng(1)
    gen, imp = rng.normal(0.4, 0.1, 100), rng.normal(0.7, 0.1, 100)
    curve = roc(ScoreSet(gen, imp))
    assert curve.points == roc_count(gen.tolist(), imp.tolist())


def test_roc_subsampling_keeps_ends_and_monotone():
    rng = np.random.default_rng(2)
    scores = ScoreSet(rng.random(300), rng.random(300) + 0.2)
    full = roc(scores)
    sub = roc(scores, n_points=10)
    assert len(sub.points) == 10
    assert sub.points[0] == full.points[0] and sub.points[-1] == full.points[-1]
    assert np.all(np.diff(sub.far) >= 0) and np.all(np.diff(sub.gar) >= 0)


def test_roc_csv_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    curve = roc(ScoreSet(rng.random(20), rng.random(20)))
    back = RocCurve.from_csv(curve.to_csv(tmp_path / "roc.csv"))
    assert back.points == curve.points
    assert (tmp_path / "roc.csv").read_text().splitlines()[0] == "threshold,far,gar"
    (tmp_path / "empty.csv").write_text("threshold,far,gar\n")
    with pytest.raises(EmptyScores):
        RocCurve.from_csv(tmp_path / "empty.csv")


def test_scoreset_csv_round_trip(tmp_path):
    s = ScoreSet([0.1, 1 / 3], [math.pi, 0.25])
    back = ScoreSet.from_csv(s.to_csv(tmp_path / "s.csv"))
    np.testing.assert_array_equal(back.genuine, s.genuine)
    np.testing.assert_array_equal(back.impostor, s.impostor)


def test_rank1_acc():
    assert rank1_acc([("a", ["a", "b"]), ("b", ["b"])]) == 1.0
    assert rank1_acc([("a", ["b", "a"]), ("b", ["a"])]) == 0.0
    assert rank1_acc([("a", ["a"]), ("b", ["b"]), ("c", ["c"]), ("d", ["a"])]) == 0.75
    with pytest.raises(EmptyInput):
        rank1_acc([])


def test_metrics_report_layout():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        rep = metrics_report("l2r", ScoreSet([0.1, 0.2], [0.8, 0.9]), acc=1.0)
    assert set(rep) == {"protocol", "eer", "gar_at_far", "acc", "n_genuine", "n_impostor", "threshold"}
    assert set(rep["gar_at_far"]) == {"0.001", "1e-05", "1e-06"}
    assert rep["n_genuine"] == rep["n_impostor"] == 2


@settings(max_examples=80, deadline=None)
@given(score_lists, score_lists)
def test_metrics_agree_with_counting_oracles(gen, imp):
    s = ScoreSet(gen, imp)
    e, t = eer(s)
    oe, ot = eer_count(gen, imp)
    assert e == pytest.approx(oe, abs=1e-12) and t == ot
    for target in (1e-3, 0.1, 0.5):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            assert gar_at_far(s, target) == gar_at_far_count(gen, imp, target)
    assert roc(s).points == roc_count(gen, imp)


@settings(max_examples=60, deadline=None)
@given(grid_lists, grid_lists, st.sampled_from(["exp", "cube", "affine"]))
def test_eer_invariant_under_increasing_transform(gen, imp, kind):
    f = {"exp": np.exp, "cube": lambda x: x ** 3 + x, "affine": lambda x: 2.5 * x + 7}[kind]
    base = eer(ScoreSet(gen, imp))[0]
    moved = eer(ScoreSet(f(np.array(gen)), f(np.array(imp))))[0]
    assert moved == pytest.approx(base, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(score_lists, score_lists)
def test_gar_at_far_monotone_and_readable_from_roc(gen, imp):
    s = ScoreSet(gen, imp)
    curve = roc(s)
    prev = -1.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for target in (1e-4, 0.01, 0.1, 0.3, 0.6, 0.9):
            g = gar_at_far(s, target)
            assert g >= prev
            prev = g
            on_curve = [gg for f, gg, _ in curve.points if f <= target]
            assert g == (max(on_curve) if on_curve else 0.0)
    # midpoints never change the rates, so the curve's own crossing gives the EER
    k = min(range(len(curve.points)), key=lambda j: abs(curve.far[j] - (1 - curve.gar[j])))
    assert (curve.far[k] + 1 - curve.gar[k]) / 2 == pytest.approx(eer(s)[0], abs=1e-12)
