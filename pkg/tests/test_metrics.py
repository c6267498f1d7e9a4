import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from _oracles import brute_force_signed_rank, flood_fill_labels, pair_count_auc
from inpaint_saliency.errors import InputError
from inpaint_saliency.metrics import (connected_components, hausdorff, median_aggregate, metric_A,
                                      metric_D, metric_H, metric_O, roc_auc, wilcoxon_signed_rank)

masks16 = arrays(bool, (16, 16))


def _point(r, c, shape=(8, 8)):
    m = np.zeros(shape, bool)
    m[r, c] = True
    return m


# ---------------------------------------------------------------- components

def test_filled_square_single_component_at_centre():
    m = np.zeros((10, 10), bool)
    m[2:6, 3:7] = True
    (comp,) = connected_components(m)
    assert comp.size == 16
    assert comp.centroid == (3.5, 4.5)


def test_diagonal_pixels_are_connected():
    m = np.zeros((3, 3), bool)
    m[0, 0] = m[1, 1] = True
    assert len(connected_components(m)) == 1


def test_empty_mask_has_no_components():
    assert connected_components(np.zeros((4, 4), bool)) == []


@settings(max_examples=60, deadline=None)
@given(masks16)
def test_components_match_flood_fill(mask):
    labels, n = flood_fill_labels(mask)
    comps = connected_components(mask)
    assert len(comps) == n
    expected = sorted((int((labels == k).sum()), tuple(np.argwhere(labels == k).mean(axis=0)))
                      for k in range(1, n + 1))
    got = sorted((c.size, c.centroid) for c in comps)
    for (s1, c1), (s2, c2) in zip(expected, got):
        assert s1 == s2
        assert c1 == pytest.approx(c2)


# ---------------------------------------------------------------- D and H

def test_D_identical_is_zero():
    m = np.zeros((8, 8), bool)
    m[1:3, 1:3] = m[5:7, 4:8] = True
    assert metric_D(m, [m]) == 0.0


def test_D_three_four_five():
    assert metric_D(_point(0, 0), [_point(3, 4)]) == 5.0


def test_D_missing_when_empty():
    assert math.isnan(metric_D(np.zeros((8, 8), bool), [_point(1, 1)]))
    assert math.isnan(metric_D(_point(1, 1), [np.zeros((8, 8), bool)]))


def test_D_directions_differ():
    res = _point(0, 0, (10, 10)) | _point(9, 9, (10, 10))
    gt = _point(0, 0, (10, 10))
    assert metric_D(res, [gt]) == pytest.approx(math.hypot(9, 9) / 2)
    assert metric_D(res, [gt], direction="gt_to_result") == 0.0


@settings(max_examples=40, deadline=None)
@given(masks16, st.integers(0, 15), st.integers(0, 15))
def test_adding_component_on_gt_centroid_never_increases_D(result, r, c):
    assume(result.any())
    gt = np.zeros((16, 16), bool)
    gt[r, c] = True
    before = metric_D(result, [gt])
    # isolated pixel on the GT centroid: clear its neighbourhood so it is its own component
    isolated = result.copy()
    isolated[max(r - 1, 0):r + 2, max(c - 1, 0):c + 2] = False
    assume(isolated.any())
    base = metric_D(isolated, [gt])
    isolated[r, c] = True
    assert metric_D(isolated, [gt]) <= base + 1e-12
    assert not math.isnan(before)


def test_H_examples():
    m = np.zeros((8, 8), bool)
    m[2:5, 2:5] = True
    assert metric_H(m, [m]) == 0.0
    assert metric_H(_point(0, 0), [_point(3, 4)]) == 5.0


def test_H_lower_median_over_masses():
    res = _point(0, 0, (20, 20))
    gts = [_point(0, 3, (20, 20)), _point(0, 5, (20, 20)), _point(0, 9, (20, 20)), _point(0, 12, (20, 20))]
    assert metric_H(res, gts) == 5.0


@settings(max_examples=40, deadline=None)
@given(masks16, masks16)
def test_H_at_least_nearest_distance(a, b):
    assume(a.any() and b.any())
    pa, pb = np.argwhere(a), np.argwhere(b)
    nearest = min(math.dist(p, q) for p in pa for q in pb)
    h = hausdorff(a, b)
    assert h >= nearest - 1e-12
    assert (h == 0) == np.array_equal(a, b)


# ---------------------------------------------------------------- A, O, median

def test_A_examples():
    organ = np.zeros((8, 8), bool)
    organ[:, :4] = True
    assert metric_A(organ, organ) == 1.0
    assert metric_A(np.zeros_like(organ), organ) == 0.0
    with pytest.raises(InputError):
        metric_A(organ, np.zeros_like(organ))


def test_O_examples():
    a = np.zeros((4, 4), bool)
    a[0, :] = True
    b = np.zeros((4, 4), bool)
    b[0, 2:] = b[1, :] = b[2, :2] = True
    assert metric_O(a, b) == 0.5
    assert metric_O(a, a | b) == 1.0
    assert metric_O(a, ~a) == 0.0
    assert math.isnan(metric_O(a, np.zeros_like(a)))


@settings(max_examples=40, deadline=None)
@given(masks16, masks16)
def test_A_O_in_unit_interval(a, b):
    assume(b.any())
    assert 0.0 <= metric_A(a, b) <= 1.0
    o = metric_O(a, b)
    assert math.isnan(o) or 0.0 <= o <= 1.0


def test_median_examples():
    assert median_aggregate([1]) == 1
    assert median_aggregate([3, 1, 2]) == 2
    assert median_aggregate([4, 1, 3, 2]) == 2


# ---------------------------------------------------------------- ROC

def test_auc_separated_and_tied():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.3] * 6, [0, 1, 0, 1, 0, 1]) == 0.5


def test_auc_six_point_hand_example():
    scores = [0.9, 0.7, 0.7, 0.4, 0.3, 0.1]
    labels = [1, 0, 1, 1, 0, 0]
    # concordant pairs: 0.9 beats 3 negatives, 0.7 ties one and beats two, 0.4 beats two
    assert roc_auc(scores, labels) == pytest.approx((3 + 2.5 + 2) / 9)
    assert roc_auc(scores, labels) == pytest.approx(pair_count_auc(scores, labels))


def test_auc_single_class_rejected():
    with pytest.raises(InputError):
        roc_auc([0.1, 0.2], [1, 1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 8), st.booleans()), min_size=2, max_size=30))
def test_auc_matches_pair_counting_and_is_rank_invariant(pairs):
    scores = [float(s) for s, _ in pairs]
    labels = [y for _, y in pairs]
    assume(any(labels) and not all(labels))
    auc = roc_auc(scores, labels)
    assert auc == pytest.approx(pair_count_auc(scores, labels))
    assert roc_auc(np.exp(np.array(scores)) * 3 - 1, labels) == pytest.approx(auc)


# ---------------------------------------------------------------- Wilcoxon

def test_six_positive_differences():
    res = wilcoxon_signed_rank([1, 2, 3, 4, 5, 6])
    assert res.statistic == 21
    assert res.pvalue == 0.03125
    assert res.method == "exact"


def test_antisymmetric_differences_p_near_one():
    res = wilcoxon_signed_rank([1, -1, 2, -2, 3, -3, 4, -4])
    assert res.pvalue > 0.9


def test_degenerate_and_too_few():
    assert wilcoxon_signed_rank([0, 0, 0]).pvalue == 1.0
    with pytest.raises(InputError):
        wilcoxon_signed_rank([1, 2, 0, 3])


def test_exact_null_distribution_sums_to_one_n5():
    ranks = [1, 2, 3, 4, 5]
    hist = brute_force_signed_rank(ranks)
    assert sum(Fraction(c, 32) for c in hist.values()) == 1
    # one-sided upper tails from the implementation match the enumerated histogram
    for w in hist:
        upper = sum(c for k, c in hist.items() if k >= w) / 32
        lower = sum(c for k, c in hist.items() if k <= w) / 32
        expected = min(1.0, 2 * min(upper, lower))
        signs = _signs_for(ranks, w)
        res = wilcoxon_signed_rank([s * r for s, r in zip(signs, ranks)], method="exact")
        assert res.statistic == w
        assert res.pvalue == pytest.approx(expected)


def _signs_for(ranks, w):
    # greedy subset of distinct ranks 1..n summing to w
    signs, remaining = [-1] * len(ranks), w
    for i in range(len(ranks) - 1, -1, -1):
        if ranks[i] <= remaining:
            signs[i], remaining = 1, remaining - ranks[i]
    assert remaining == 0
    return signs


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(-6, 6).filter(lambda v: v != 0), min_size=5, max_size=12))
def test_exact_path_matches_brute_force_with_ties(diffs):
    from scipy.stats import rankdata
    ranks = rankdata(np.abs(diffs))
    w = float(ranks[np.array(diffs) > 0].sum())
    hist = brute_force_signed_rank(list(ranks))
    total = 2 ** len(diffs)
    upper = sum(c for k, c in hist.items() if k >= w - 1e-9) / total
    lower = sum(c for k, c in hist.items() if k <= w + 1e-9) / total
    res = wilcoxon_signed_rank(diffs, method="exact")
    assert res.pvalue == pytest.approx(min(1.0, 2 * min(upper, lower)))


def _both_paths_n15():
    ranks = np.arange(1, 16)
    for w in range(0, 121):
        signs = _signs_for(list(ranks), w)
        d = [s * r for s, r in zip(signs, ranks)]
        yield (wilcoxon_signed_rank(d, method="exact").pvalue,
               wilcoxon_signed_rank(d, method="approx").pvalue)


def test_normal_approximation_close_in_the_tails_at_n15():
    for exact, approx in _both_paths_n15():
        if exact <= 0.25:
            assert abs(exact - approx) <= 0.01


def test_normal_approximation_error_bound_at_n15():
    # continuity-corrected normal approximation peaks near p = 0.45 at n = 15
    worst = max(abs(e - a) for e, a in _both_paths_n15())
    assert 0.0105 < worst < 0.0115


def test_auto_switches_above_twenty():
    assert wilcoxon_signed_rank(np.arange(1, 21)).method == "exact"
    assert wilcoxon_signed_rank(np.arange(1, 22)).method == "approx"
