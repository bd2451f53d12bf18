"""Seeded synthetic panoptic data: rectangles of thing classes over stuff bands."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import STUFF, THING, CategoryRegistry, PanopticAnnotation, SegmentMap, segments_from_map


@dataclass(frozen=True)
class Instance:
    box: tuple[int, int, int, int]
    category: int
    crowd: bool = False


@dataclass(frozen=True)
class Layout:
    width: int
    height: int
    bands: tuple[tuple[int, int], ...]  # (row where band starts, stuff category)
    instances: tuple[Instance, ...]
    voids: tuple[tuple[int, int, int, int], ...] = ()


def _overlaps(a, b) -> bool:
    return not (a[0] + a[2] <= b[0] or b[0] + b[2] <= a[0] or a[1] + a[3] <= b[1] or b[1] + b[3] <= a[1])


def random_layout(
    rng: np.random.Generator,
    registry: CategoryRegistry,
    width: int = 64,
    height: int = 64,
    max_things: int = 6,
    thing_pool: Sequence[int] | None = None,
    crowd_rate: float = 0.0,
    void_boxes: int = 0,
    min_size: int = 4,
) -> Layout:
    """Non-overlapping thing rectangles and void boxes over 1-3 stuff bands."""
    stuff = registry.ids(STUFF)
    things = list(thing_pool) if thing_pool is not None else registry.ids(THING)
    n_bands = int(rng.integers(1, 4)) if stuff else 0
    starts = sorted({0, *rng.integers(1, max(2, height), size=max(0, n_bands - 1)).tolist()})
    bands = tuple((int(s), int(rng.choice(stuff))) for s in starts) if stuff else ()
    placed: list[tuple[int, int, int, int]] = []

    def place():
        for _ in range(20):
            w = int(rng.integers(min_size, max(min_size + 1, width // 3)))
            h = int(rng.integers(min_size, max(min_size + 1, height // 3)))
            box = (int(rng.integers(0, width - w + 1)), int(rng.integers(0, height - h + 1)), w, h)
            if not any(_overlaps(box, o) for o in placed):
                placed.append(box)
                return box
        return None

    instances = []
    for _ in range(int(rng.integers(0, max_things + 1))):
        box = place()
        if box is not None:
            instances.append(Instance(box, int(rng.choice(things)), bool(rng.random() < crowd_rate)))
    voids = tuple(b for b in (place() for _ in range(void_boxes)) if b is not None)
    return Layout(width, height, bands, tuple(instances), voids)


def render(layout: Layout, image_id=0, id_offset: int = 0) -> PanopticAnnotation:
    """Rasterize a layout; segment ids start at ``1 + id_offset``."""
    ids = np.zeros((layout.height, layout.width), dtype=np.uint32)
    categories, crowd = {}, {}
    next_id = 1 + id_offset
    bounds = [s for s, _ in layout.bands] + [layout.height]
    for (start, cat), stop in zip(layout.bands, bounds[1:]):
        if stop > start:
            ids[start:stop] = next_id
            categories[next_id] = cat
            next_id += 1
    for inst in layout.instances:
        x, y, w, h = inst.box
        ids[y : y + h, x : x + w] = next_id
        categories[next_id] = inst.category
        crowd[next_id] = inst.crowd
        next_id += 1
    for x, y, w, h in layout.voids:
        ids[y : y + h, x : x + w] = 0
    return PanopticAnnotation(image_id, SegmentMap(ids), segments_from_map(ids, categories, crowd))


def perturb(rng: np.random.Generator, layout: Layout, shift: int = 2, drop_rate: float = 0.1) -> Layout:
    """Jitter instance boxes and drop some, as a stand-in for model output."""
    out = []
    for inst in layout.instances:
        if rng.random() < drop_rate:
            continue
        x, y, w, h = inst.box
        dx, dy = (int(v) for v in rng.integers(-shift, shift + 1, size=2))
        x = min(max(0, x + dx), layout.width - w)
        y = min(max(0, y + dy), layout.height - h)
        out.append(replace(inst, box=(x, y, w, h), crowd=False))
    return replace(layout, instances=tuple(out), voids=())


def random_id_annotation(
    rng: np.random.Generator,
    registry_ids: Sequence[int],
    max_side: int = 64,
    max_segments: int = 8,
    max_id: int = 2**24 - 1,
    image_id=0,
) -> PanopticAnnotation:
    """Unstructured map: random blocks of random (possibly huge) segment ids."""
    w, h = (int(v) for v in rng.integers(1, max_side + 1, size=2))
    n = int(rng.integers(1, max_segments + 1))
    seg_ids = np.unique(rng.integers(1, max_id + 1, size=n))
    palette = np.concatenate([[0], seg_ids]).astype(np.uint32)
    block = int(rng.integers(1, 9))
    coarse = rng.integers(0, palette.size, size=(-(-h // block), -(-w // block)))
    ids = palette[np.kron(coarse, np.ones((block, block), dtype=np.int64))[:h, :w]]
    cats = {int(s): int(rng.choice(registry_ids)) for s in seg_ids}
    crowd = {int(s): bool(rng.random() < 0.1) for s in seg_ids}
    return PanopticAnnotation(image_id, SegmentMap(ids), segments_from_map(ids, cats, crowd))
