import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opseval.metrics import (
    CategoryStats,
    DimensionMismatch,
    MatchStats,
    accumulate,
    category_row,
    consistency_check,
    f1,
    match_image,
    match_segments,
    report,
)

from conftest import distinct_ids, make_ann, random_pair, small_registry
from oracle import brute_force_match


def as_counts(stats):
    return {k: [v["tp"], v["fp"], v["fn"], v["iou_sum"]] for k, v in stats.to_dict().items()}


def assert_same_as_oracle(stats, expected):
    got = as_counts(stats)
    expected = {k: v for k, v in expected.items() if any(v)}
    assert set(got) == set(expected)
    for k in got:
        assert got[k][:3] == expected[k][:3], k
        assert abs(got[k][3] - expected[k][3]) <= 1e-12


def test_identity_single_segment(registry):
    gt = make_ann([[1, 1], [1, 0]], {1: 1})
    stats = match_image(gt, gt, registry)
    assert as_counts(stats) == {1: [1, 0, 0, 1.0]}


def test_half_overlap_is_not_a_match(registry):
    gt = make_ann([[1, 1], [1, 1]], {1: 1})
    pred = make_ann([[1, 1], [0, 0]], {1: 1})
    assert as_counts(match_image(gt, pred, registry)) == {1: [0, 1, 1, 0.0]}


def test_just_above_half_matches(registry):
    gt = make_ann([[1, 1, 1]], {1: 1})
    pred = make_ann([[1, 1, 0]], {1: 1})
    assert as_counts(match_image(gt, pred, registry)) == {1: [1, 0, 0, 2 / 3]}


def test_category_mismatch_is_fp_and_fn(registry):
    gt = make_ann([[1, 1]], {1: 1})
    pred = make_ann([[1, 1]], {1: 2})
    assert as_counts(match_image(gt, pred, registry)) == {1: [0, 0, 1, 0.0], 2: [0, 1, 0, 0.0]}


def test_void_pixels_leave_the_union(registry):
    # pred spills one pixel onto void: plain IoU 2/3, void-excluded IoU 1
    gt = make_ann([[1, 1, 0]], {1: 1})
    pred = make_ann([[1, 1, 1]], {1: 1})
    assert as_counts(match_image(gt, pred, registry)) == {1: [1, 0, 0, 1.0]}
    assert as_counts(match_image(gt, pred, registry, strict=True)) == {1: [1, 0, 0, 2 / 3]}


def test_prediction_mostly_on_void_is_forgiven(registry):
    gt = make_ann([[1, 0, 0]], {1: 1})
    pred = make_ann([[2, 1, 1]], {1: 2, 2: 1})
    # pred 1 (cat 2) sits on void: ignored; pred 2 matches gt 1 exactly
    assert as_counts(match_image(gt, pred, registry)) == {1: [1, 0, 0, 1.0]}
    assert as_counts(match_image(gt, pred, registry, strict=True)) == {1: [1, 0, 0, 1.0], 2: [0, 1, 0, 0.0]}


def test_crowd_never_false_negative(registry):
    gt = make_ann([[1, 1, 2, 2]], {1: 1, 2: 1}, {1: True})
    pred = make_ann([[0, 0, 0, 0]], {})
    assert as_counts(match_image(gt, pred, registry)) == {1: [0, 0, 1, 0.0]}


def test_prediction_on_same_class_crowd_is_forgiven(registry):
    gt = make_ann([[1, 1, 1, 1]], {1: 1}, {1: True})
    pred = make_ann([[5, 5, 5, 0]], {5: 1})
    assert as_counts(match_image(gt, pred, registry)) == {}
    other = make_ann([[5, 5, 5, 0]], {5: 2})
    assert as_counts(match_image(gt, other, registry)) == {2: [0, 1, 0, 0.0]}


def test_open_set_matching(registry):
    # unknown-status gt (cat 3) matched by a prediction with the reserved id
    gt = make_ann([[1, 1, 2, 2]], {1: 3, 2: 5})
    pred = make_ann([[7, 7, 8, 8]], {7: registry.unknown_id, 8: registry.unknown_id})
    counts = as_counts(match_image(gt, pred, registry))
    assert counts == {registry.unknown_id: [1, 0, 0, 1.0], registry.unseen_id: [1, 0, 0, 1.0]}


def test_dimension_mismatch(registry):
    with pytest.raises(DimensionMismatch):
        match_image(make_ann([[1]], {1: 1}), make_ann([[1, 1]], {1: 1}), registry)


def test_random_pairs_match_brute_force(registry):
    rng = np.random.default_rng(1234)
    for _ in range(200):
        gt, pred = random_pair(rng, registry, max_side=16, max_segments=5)
        for strict in (False, True):
            expected, *_ = brute_force_match(gt, pred, registry, strict)
            assert_same_as_oracle(match_image(gt, pred, registry, strict), expected)


def test_each_segment_matched_at_most_once(registry):
    rng = np.random.default_rng(99)
    for _ in range(200):
        gt, pred = random_pair(rng, registry)
        pairs = match_segments(gt, pred, registry).pairs
        assert len({g for g, _, _ in pairs}) == len(pairs)
        assert len({p for _, p, _ in pairs}) == len(pairs)


def renumber(ann, rng):
    ids = [s.id for s in ann.segments]
    remap = dict(zip(ids, distinct_ids(rng, len(ids))))
    out = np.vectorize(lambda v: remap.get(int(v), 0), otypes=[np.uint32])(ann.map.ids)
    cats = {remap[s.id]: s.category for s in ann.segments}
    crowd = {remap[s.id]: s.crowd for s in ann.segments}
    return make_ann(out, cats, crowd)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_renumbering_invariance(seed):
    registry = small_registry()
    rng = np.random.default_rng(seed)
    gt, pred = random_pair(rng, registry)
    base = match_image(gt, pred, registry)
    assert match_image(renumber(gt, rng), pred, registry) == base
    assert match_image(gt, renumber(pred, rng), registry) == base


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_perfect_prediction(seed):
    registry = small_registry()
    gt, _ = random_pair(np.random.default_rng(seed), registry)
    stats = match_image(gt, gt, registry)
    for key, s in stats.per_category.items():
        assert s.fp == 0 and s.fn == 0
        if s.tp:
            assert category_row("", s).sq == 1.0


def test_accumulate_examples():
    assert accumulate([]) == MatchStats()
    a = MatchStats({1: CategoryStats(2, 1, 0, 1.5)})
    assert accumulate([a]) == a
    b = MatchStats({1: CategoryStats(1, 0, 3, 0.7), 4: CategoryStats(0, 2, 0, 0.0)})
    assert accumulate([a, b]) == accumulate([b, a])
    # inputs are not mutated
    assert a.per_category[1] == CategoryStats(2, 1, 0, 1.5)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_accumulate_associative(seed):
    registry = small_registry()
    rng = np.random.default_rng(seed)
    a, b, c = (match_image(*random_pair(rng, registry), registry) for _ in range(3))
    left = accumulate([a, accumulate([b, c])]).to_dict()
    right = accumulate([accumulate([a, b]), c]).to_dict()
    assert left.keys() == right.keys()
    for k in left:
        assert {f: left[k][f] for f in ("tp", "fp", "fn")} == {f: right[k][f] for f in ("tp", "fp", "fn")}
        assert left[k]["iou_sum"] == pytest.approx(right[k]["iou_sum"], abs=1e-12)


def test_matched_iou_bounds(registry):
    rng = np.random.default_rng(5)
    stats = accumulate(match_image(*random_pair(rng, registry), registry) for _ in range(300))
    for s in stats.per_category.values():
        assert s.iou_sum <= s.tp + 1e-12
        if s.tp:
            assert s.iou_sum > 0.5 * s.tp


def test_report_single_match(registry):
    rep = report(MatchStats({1: CategoryStats(1, 0, 0, 0.8)}), registry)
    row = rep.categories[1]
    assert (row.pq, row.sq, row.rq) == (pytest.approx(0.8), 0.8, 1.0)


def test_report_f1_identity_from_published_recall_precision():
    assert f1(0.118, 0.219) == pytest.approx(0.1533, abs=1e-4)
    assert round(100 * f1(0.118, 0.219), 1) == 15.3


def test_pq_from_published_sq_rq():
    assert 0.753 * 0.095 == pytest.approx(0.0715, abs=1e-4)
    assert abs(100 * 0.753 * 0.095 - 7.2) < 0.1


def test_report_groups(registry):
    stats = MatchStats(
        {
            1: CategoryStats(2, 0, 0, 1.8),
            2: CategoryStats(0, 1, 1, 0.0),
            4: CategoryStats(1, 1, 0, 0.6),
            registry.unknown_id: CategoryStats(1, 3, 1, 0.7),
        }
    )
    rep = report(stats, registry)
    assert set(rep.groups) == {"all", "known", "known-thing", "known-stuff", "unknown"}
    assert rep.groups["known-thing"].n == 2
    assert rep.groups["known-thing"].pq == pytest.approx((0.9 + 0.0) / 2)
    assert rep.groups["known"].pq == pytest.approx((0.9 + 0.0 + 0.6 / 1.5) / 3)
    unk = rep.groups["unknown"]
    assert unk.recall == 0.5 and unk.precision == 0.25
    assert unk.rq == pytest.approx(f1(unk.recall, unk.precision))
    assert unk.pq == pytest.approx(unk.sq * unk.rq)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_report_identities(seed):
    registry = small_registry()
    rng = np.random.default_rng(seed)
    stats = accumulate(match_image(*random_pair(rng, registry), registry) for _ in range(5))
    rep = report(stats, registry)
    for row in rep.categories.values():
        assert row.pq == row.sq * row.rq
        if row.tp + row.fp and row.tp + row.fn:
            assert row.rq == pytest.approx(f1(row.recall, row.precision), abs=1e-12)
        for v in (row.pq, row.sq, row.rq, row.recall, row.precision):
            assert 0 <= v <= 1


def test_consistency_examples():
    (eopsn,) = consistency_check([(11.3, 73.8, 15.3, 11.8, 21.9)])
    assert eopsn.percent and eopsn.pq < 0.15 and eopsn.rq < 0.15
    (perfect,) = consistency_check([(1, 1, 1, 1, 1)])
    assert (perfect.pq, perfect.rq, perfect.percent) == (0, 0, False)
    (vt,) = consistency_check([(7.5, 72.9, 10.3, 21.8, 6.7)])
    assert vt.pq < 0.15 and vt.rq < 0.15


def test_format_table_percent_one_decimal(registry):
    rep = report(MatchStats({1: CategoryStats(1, 0, 1, 0.8)}), registry)
    table = rep.format_table(["known"])
    line = table.splitlines()[1].split()
    assert line[:4] == ["known", "53.3", "80.0", "66.7"]
    assert math.isclose(rep.groups["known"].pq, 0.8 * 2 / 3)
