import sys
from pathlib import Path

import numpy as np
import pytest

from opseval.core import (
    STUFF,
    THING,
    Category,
    CategoryRegistry,
    PanopticAnnotation,
    SegmentMap,
    segments_from_map,
)

sys.path.insert(0, str(Path(__file__).parent))

DATA = Path(__file__).parent / "data"

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def small_registry():
    return CategoryRegistry(
        (
            Category(1, "cat-a", THING, "known"),
            Category(2, "cat-b", THING, "known"),
            Category(3, "cat-u", THING, "unknown"),
            Category(4, "ground", STUFF, "known"),
            Category(5, "cat-s", THING, "unseen"),
        ),
        unknown_id=201,
        unseen_id=202,
    )


@pytest.fixture
def registry():
    return small_registry()


def make_ann(ids, categories, crowd=None, image_id=0):
    ids = np.asarray(ids, dtype=np.uint32)
    return PanopticAnnotation(image_id, SegmentMap(ids), segments_from_map(ids, categories, crowd))


def distinct_ids(rng, n, high=2**24):
    """``n`` distinct ids in [1, high) without materializing the range."""
    out = set()
    while len(out) < n:
        out.update(int(v) for v in rng.integers(1, high, size=n - len(out)))
    return list(out)[:n]


def _block_map(rng, h, w, palette):
    block = int(rng.integers(1, 9))
    coarse = rng.integers(0, len(palette), size=(-(-h // block), -(-w // block)))
    return np.asarray(palette, dtype=np.uint32)[np.kron(coarse, np.ones((block, block), int))[:h, :w]]


def random_pair(rng, registry, max_side=32, max_segments=6, max_categories=4):
    """Correlated (gt, pred) pair with random void, crowd and open-set segments."""
    h, w = (int(v) for v in rng.integers(2, max_side + 1, size=2))
    pool = [c.id for c in registry.entries]
    cats = list(rng.choice(pool, size=min(max_categories, len(pool)), replace=False))
    n = int(rng.integers(1, max_segments + 1))
    gt_ids = rng.choice(np.arange(1, 1000), size=n, replace=False)
    gt_map = _block_map(rng, h, w, np.concatenate([[0], gt_ids]))
    gt_cat = {int(s): int(rng.choice(cats)) for s in gt_ids}
    gt_crowd = {int(s): bool(rng.random() < 0.15) for s in gt_ids}
    gt = make_ann(gt_map, gt_cat, gt_crowd)

    pred_map = gt_map.copy()
    mode = rng.random()
    if mode < 0.3:
        pred_map = np.roll(pred_map, tuple(int(v) for v in rng.integers(-2, 3, size=2)), axis=(0, 1))
    elif mode < 0.6:
        pred_map = _block_map(rng, h, w, np.concatenate([[0], gt_ids]))
    for _ in range(int(rng.integers(0, 4))):
        y0, x0 = int(rng.integers(0, h)), int(rng.integers(0, w))
        y1, x1 = y0 + int(rng.integers(1, h + 1)), x0 + int(rng.integers(1, w + 1))
        pred_map[y0:y1, x0:x1] = rng.choice(np.concatenate([[0], gt_ids, [5000]]))
    # renumber predicted ids independently of the ground truth
    present = [int(v) for v in np.unique(pred_map) if v]
    remap = dict(zip(present, distinct_ids(rng, len(present))))
    pred_map = np.vectorize(lambda v: remap.get(int(v), 0), otypes=[np.uint32])(pred_map)
    pred_cat = {}
    for old, new in remap.items():
        base = gt_cat.get(old, int(rng.choice(cats)))
        r = rng.random()
        if r < 0.15:
            base = int(rng.choice(cats))
        elif r < 0.35 and registry.is_open_set(base):
            base = registry.unknown_id
        pred_cat[new] = base
    pred = make_ann(pred_map, pred_cat)
    return gt, pred
