import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opseval.core import VOID
from opseval.proposals import (
    MissingScore,
    Proposal,
    dump_proposals,
    label_proposals,
    load_proposals,
    pseudo_filter,
    void_components,
)

from conftest import make_ann


def scene():
    # 10x10: known thing 1 (cat 1) at (1,1,4,4), stuff 2 elsewhere, void block at (6,6,4,4)
    ids = np.full((10, 10), 2, dtype=np.uint32)
    ids[1:5, 1:5] = 1
    ids[6:10, 6:10] = 0
    return make_ann(ids, {1: 1, 2: 4})


def test_box_on_known_instance(registry):
    (p,) = label_proposals([Proposal((1, 1, 4, 4))], scene(), registry)
    assert (p.role, p.category) == ("known", 1)


def test_box_fully_on_void(registry):
    (p,) = label_proposals([Proposal((6, 6, 4, 4))], scene(), registry)
    assert p.role == "void" and p.category is None


def test_box_partly_void_low_iou_is_background(registry):
    ids = np.full((10, 10), 2, dtype=np.uint32)
    ids[0:2, 0:2] = 1
    ids[5:7, 0:2] = 0  # 4 void pixels
    gt = make_ann(ids, {1: 1, 2: 4})
    box = (0, 5, 2, 5)  # 10 pixels, 4 void -> 40%
    (p,) = label_proposals([Proposal(box)], gt, registry)
    assert p.role == "background"


def test_void_boundary_is_inclusive(registry):
    ids = np.full((2, 4), 2, dtype=np.uint32)
    ids[:, :2] = 0
    (p,) = label_proposals([Proposal((0, 0, 4, 2))], make_ann(ids, {2: 4}), registry)
    assert p.role == "void"


def test_known_tie_goes_to_smaller_segment_id(registry):
    # interleaved rows: both instances share the bbox (0, 0, 4, 4)
    ids = np.zeros((4, 4), dtype=np.uint32)
    ids[0::2] = 9
    ids[1::2] = 3
    gt = make_ann(ids, {9: 1, 3: 2})
    (p,) = label_proposals([Proposal((0, 0, 4, 4))], gt, registry)
    assert p.role == "known"
    assert p.category == 2  # segment 3 < segment 9


def test_crowd_and_open_set_instances_not_used_for_known(registry):
    ids = np.zeros((4, 4), dtype=np.uint32)
    ids[:2] = 1
    ids[2:] = 2
    gt = make_ann(ids, {1: 1, 2: 3}, {1: True})
    roles = [p.role for p in label_proposals([Proposal((0, 0, 4, 2)), Proposal((0, 2, 4, 2))], gt, registry)]
    assert roles == ["background", "background"]


def test_roles_partition(registry):
    rng = np.random.default_rng(0)
    gt = scene()
    props = [Proposal((int(rng.integers(0, 8)), int(rng.integers(0, 8)), 2, 2)) for _ in range(50)]
    labeled = label_proposals(props, gt, registry)
    assert len(labeled) == 50
    assert all(p.role in ("known", "void", "background") for p in labeled)


def test_shrinking_void_never_turns_background_into_void(registry):
    rng = np.random.default_rng(1)
    for _ in range(50):
        ids = rng.integers(0, 3, size=(12, 12)).astype(np.uint32)
        gt = make_ann(ids, {1: 4, 2: 4})
        filled = ids.copy()
        mask = (ids == 0) & (rng.random(ids.shape) < 0.5)
        filled[mask] = 1
        gt_less = make_ann(filled, {1: 4, 2: 4})
        props = [Proposal((int(rng.integers(0, 9)), int(rng.integers(0, 9)), 3, 3)) for _ in range(10)]
        before = label_proposals(props, gt, registry)
        after = label_proposals(props, gt_less, registry)
        for a, b in zip(before, after):
            if a.role == "background":
                assert b.role == "background"


def test_clipped_construction():
    p = Proposal.clipped((-2, -2, 5, 5), 4, 4)
    assert p.box == (0, 0, 3, 3)
    with pytest.raises(ValueError):
        Proposal((0, 0, 0, 3))


def test_single_void_block():
    ids = np.ones((6, 6), dtype=np.uint32)
    ids[2:5, 1:4] = 0
    (p,) = void_components(make_ann(ids, {1: 4}))
    assert p.box == (1, 2, 3, 3) and p.role == "void"


def test_diagonal_void_pixels_are_separate():
    ids = np.ones((3, 3), dtype=np.uint32)
    ids[0, 0] = ids[1, 1] = 0
    ann = make_ann(ids, {1: 4})
    assert len(void_components(ann)) == 2
    assert len(void_components(ann, connectivity=8)) == 1


def test_no_void_no_components():
    assert void_components(make_ann(np.ones((4, 4)), {1: 4})) == []


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_void_components_cover_void(seed):
    from scipy import ndimage

    rng = np.random.default_rng(seed)
    ids = (rng.random((10, 12)) < 0.6).astype(np.uint32)
    ann = make_ann(ids, {1: 4})
    props = void_components(ann)
    labels, n = ndimage.label(ids == VOID)
    assert len(props) == n
    covered = np.zeros(ids.shape, dtype=int)
    for k, p in enumerate(props, start=1):
        x, y, w, h = p.box
        comp = labels == k
        assert comp[y : y + h, x : x + w].sum() == comp.sum()
        covered += comp
    assert (covered[ids == VOID] == 1).all()


def test_pseudo_filter_examples():
    p0 = Proposal((0, 0, 1, 1), obj_logit=0.0)
    assert pseudo_filter([p0], 0.5) == ([p0], [])
    assert pseudo_filter([p0], 0.6) == ([], [p0])
    p3 = Proposal((0, 0, 1, 1), obj_logit=3.0)
    assert 1 / (1 + math.exp(-3.0)) == pytest.approx(0.9526, abs=1e-4)
    assert pseudo_filter([p3], 0.95) == ([p3], [])


def test_pseudo_filter_missing_score():
    with pytest.raises(MissingScore):
        pseudo_filter([Proposal((0, 0, 1, 1))], 0.5)


@given(st.lists(st.floats(-20, 20), max_size=20), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_pseudo_filter_monotone(logits, d1, d2):
    lo, hi = sorted((d1, d2))
    props = [Proposal((0, 0, 1, 1), obj_logit=x) for x in logits]
    kept_hi = pseudo_filter(props, hi)[0]
    kept_lo = pseudo_filter(props, lo)[0]
    assert all(p in kept_lo for p in kept_hi)


def test_proposal_serialization_round_trip(tmp_path):
    props = [
        Proposal((1, 2, 3, 4), image_id=7, role="known", category=3, known_logits=(0.5, -1.0), obj_logit=2.0),
        Proposal((0, 0, 1, 1), image_id="x", feature=(1.0, 2.0)),
    ]
    dump_proposals(props, tmp_path / "p.json")
    assert load_proposals(tmp_path / "p.json") == props
