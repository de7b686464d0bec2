import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distfield.errors import BadEdges, DimensionMismatch, EmptyMask
from distfield.field import DistortionField
from distfield.metrics import (
    DEFAULT_EDGES,
    SUMMARY_HEADER,
    SampleReport,
    bin_by_distortion,
    emit_report,
    erode_mask,
    proxy_match_score,
    read_summary,
    reg_error_root,
    wrong_vector_mask,
)


def _single(vx, vy):
    return DistortionField(np.array([[[vx, vy]]], dtype=float))


ONE = np.ones((1, 1), bool)


def test_reg_error_root_hand_value():
    est = DistortionField(np.array([[[3.0, 4.0], [0.0, 0.0]]]))
    gt = DistortionField.zeros(2, 1)
    assert reg_error_root(est, gt, np.array([[True, True]])) == 2.5
    assert reg_error_root(est, gt, np.array([[True, False]])) == 5.0
    with pytest.raises(EmptyMask):
        reg_error_root(est, gt, np.zeros((1, 2), bool))


def test_binning_against_loop_oracle():
    rng = np.random.default_rng(1)
    gt = DistortionField(rng.normal(0, 9, (7, 9, 2)))
    est = DistortionField(gt.vectors + rng.normal(0, 2, (7, 9, 2)))
    mask = rng.random((7, 9)) < 0.8
    rep = bin_by_distortion(est, gt, mask)
    sums, counts = [0.0] * 7, [0] * 7
    for j in range(7):
        for i in range(9):
            if not mask[j, i]:
                continue
            mag = math.hypot(*gt.vectors[j, i])
            b = next(k for k in range(7) if DEFAULT_EDGES[k] <= mag < DEFAULT_EDGES[k + 1])
            counts[b] += 1
            sums[b] += math.hypot(*(est.vectors[j, i] - gt.vectors[j, i]))
    assert rep.cell_count == counts
    for got, s, c in zip(rep.mean_error, sums, counts):
        assert (got is None) == (c == 0)
        if c:
            assert got == pytest.approx(s / c, rel=1e-12)
    assert rep.overall == pytest.approx(sum(sums) / sum(counts), rel=1e-12)


def test_bin_edges_are_half_open():
    gt = DistortionField(np.array([[[3.0, 0.0], [2.999, 0.0]]]))
    rep = bin_by_distortion(gt, gt, np.ones((1, 2), bool))
    assert rep.cell_count[:2] == [1, 1]


def test_bad_edges():
    f = DistortionField.zeros(2, 2)
    with pytest.raises(BadEdges):
        bin_by_distortion(f, f, np.ones((2, 2), bool), edges=(0, 1, 2))
    with pytest.raises(BadEdges):
        bin_by_distortion(f, f, np.ones((2, 2), bool), edges=(0, 3, 3, 9, 12, 15, 18, 99))


@pytest.mark.parametrize("degrees,wrong", [(44.0, False), (46.0, True)])
def test_angle_threshold(degrees, wrong):
    t = math.radians(degrees)
    est = _single(10 * math.cos(t), 10 * math.sin(t))
    flags, frac = wrong_vector_mask(est, _single(10, 0), ONE)
    assert bool(flags[0, 0]) is wrong and frac == float(wrong)


@pytest.mark.parametrize("length,wrong", [(21.9, False), (22.1, True)])
def test_ratio_threshold(length, wrong):
    # same direction, error / min norm = (length - 10) / 10
    _, frac = wrong_vector_mask(_single(length, 0), _single(10, 0), ONE)
    assert frac == float(wrong)


def test_tiny_vectors_skip_the_angle_test():
    _, frac = wrong_vector_mask(_single(-0.1, 0), _single(0.1, 0), ONE)
    assert frac == 0.0
    _, frac = wrong_vector_mask(_single(0.0, 0.0), _single(0.7, 0), ONE)
    assert frac == 1.0  # 0.7 / 0.5 = 1.4


def test_wrong_fraction_counts_only_mask_cells():
    est = DistortionField(np.array([[[10.0, 0.0], [-10.0, 0.0]]]))
    gt = DistortionField(np.array([[[10.0, 0.0], [10.0, 0.0]]]))
    _, frac = wrong_vector_mask(est, gt, np.array([[True, True]]))
    assert frac == 0.5
    _, frac = wrong_vector_mask(est, gt, np.array([[True, False]]))
    assert frac == 0.0


def test_erosion_matches_brute_force_distance():
    rng = np.random.default_rng(3)
    mask = np.zeros((30, 34), bool)
    mask[4:27, 3:30] = True
    mask[10:14, 10:20] = rng.random((4, 10)) < 0.5
    out = erode_mask(mask, 5)
    holes = np.argwhere(~np.pad(mask, 1)) - 1
    for j in range(30):
        for i in range(34):
            dist = np.sqrt(((holes - [j, i]) ** 2).sum(axis=1)).min()
            assert out[j, i] == (dist > 5)


def test_ncc_identity_negation_and_affine_invariance():
    rng = np.random.default_rng(5)
    a = rng.random((160, 160))
    m = np.ones((160, 160), bool)
    assert proxy_match_score(a, a, m, m)[0] == pytest.approx(1.0, abs=1e-12)
    assert proxy_match_score(a, 1 - a, m, m)[0] == pytest.approx(-1.0, abs=1e-12)
    assert proxy_match_score(a, 3 * a + 2, m, m)[0] == pytest.approx(1.0, abs=1e-12)


def test_ncc_uses_the_eroded_intersection_only():
    rng = np.random.default_rng(6)
    a = rng.random((160, 160))
    b = a.copy()
    b[:20] = rng.random((20, 160))  # differs only inside the eroded band
    m = np.ones((160, 160), bool)
    assert proxy_match_score(a, b, m, m, erode_blocks=2)[0] == pytest.approx(1.0, abs=1e-12)
    assert proxy_match_score(a, b, m, m, erode_blocks=0)[0] < 0.95


def test_ncc_empty_overlap():
    a = np.zeros((64, 64))
    m = np.ones((64, 64), bool)
    assert proxy_match_score(a, a, m, m, erode_blocks=3) == (0.0, True)
    left = np.zeros((64, 64), bool)
    left[:, :32] = True
    assert proxy_match_score(a, a, left, ~left, erode_blocks=0) == (0.0, True)
    with pytest.raises(DimensionMismatch):
        proxy_match_score(a, a[:10], m, m)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ncc_is_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 40, 40))
    m = np.ones((40, 40), bool)
    s, empty = proxy_match_score(a, b, m, m, erode_blocks=0)
    assert not empty and -1.0 <= s <= 1.0


def _report(seed, err):
    gt = DistortionField(np.full((2, 2, 2), 2.0))
    est = DistortionField(gt.vectors + err)
    bins = bin_by_distortion(est, gt, np.ones((2, 2), bool))
    return SampleReport(seed, reg_error_root(est, gt, np.ones((2, 2), bool)), bins, 0.25, 0.5, 0.75)


def test_emit_report_round_trip(tmp_path):
    reports = [_report(3, 0.5), _report(9, 1.0)]
    emit_report(reports, tmp_path)
    rows = read_summary(tmp_path / "summary.csv")
    assert list(rows[0]) == SUMMARY_HEADER
    assert [r["seed"] for r in rows] == [3, 9]
    assert rows[0]["reg_error_root"] == reports[0].reg_error_root
    assert rows[1]["bin1_mean"] == pytest.approx(math.sqrt(2.0))
    assert rows[0]["bin2_mean"] is None
    assert rows[0]["empty_overlap"] is False
    bins = (tmp_path / "bins.csv").read_text().splitlines()
    assert bins[0] == "method,bin,lower,upper,cell_count,mean_error"
    assert bins[1].startswith("dense,1,0.0,3.0,8,")
    assert bins[7].startswith("dense,7,18.0,inf,0,")


def test_emit_report_empty(tmp_path):
    emit_report([], tmp_path)
    assert (tmp_path / "summary.csv").read_text().strip() == ",".join(SUMMARY_HEADER)
    assert (tmp_path / "bins.csv").read_text().strip() == "method,bin,lower,upper,cell_count,mean_error"


def test_reg_error_root_is_symmetric():
    rng = np.random.default_rng(9)
    a, b = (DistortionField(rng.normal(0, 5, (5, 6, 2))) for _ in range(2))
    mask = rng.random((5, 6)) < 0.7
    mask[0, 0] = True
    assert reg_error_root(a, b, mask) == reg_error_root(b, a, mask)


def test_overall_is_count_weighted_bin_mean():
    rng = np.random.default_rng(10)
    gt = DistortionField(rng.normal(0, 10, (8, 8, 2)))
    est = DistortionField(rng.normal(0, 10, (8, 8, 2)))
    rep = bin_by_distortion(est, gt, np.ones((8, 8), bool))
    weighted = sum(m * c for m, c in zip(rep.mean_error, rep.cell_count) if c) / sum(rep.cell_count)
    assert abs(rep.overall - weighted) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0))
def test_wrong_mask_is_scale_invariant_away_from_the_clamp(seed, scale):
    rng = np.random.default_rng(seed)
    est = DistortionField(rng.normal(0, 5, (6, 6, 2)))
    gt = DistortionField(rng.normal(0, 5, (6, 6, 2)))
    mask = np.ones((6, 6), bool)
    a, _ = wrong_vector_mask(est, gt, mask)
    b, _ = wrong_vector_mask(DistortionField(est.vectors * scale), DistortionField(gt.vectors * scale), mask)
    shortest = np.minimum(est.magnitude(), gt.magnitude())
    clear = (shortest >= 0.5) & (shortest * scale >= 0.5)
    np.testing.assert_array_equal(a[clear], b[clear])
