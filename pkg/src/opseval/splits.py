"""Known/unknown class splits and the zero-shot variant."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import (
    KNOWN,
    THING,
    UNKNOWN,
    UNSEEN,
    VOID,
    CategoryRegistry,
    PanopticAnnotation,
    SegmentMap,
    coco_registry,
)

# Cumulative removal groups: K=5 uses the first, K=10 the first two, K=20 all three.
UNKNOWN_CLASS_GROUPS = (
    ("car", "cow", "pizza", "toilet"),
    ("boat", "tie", "zebra", "stop sign"),
    ("dining table", "banana", "bicycle", "cake", "sink", "cat", "keyboard", "bear"),
)
RATIO_GROUPS = {5: 1, 10: 2, 20: 3}

TAIL_CLASSES = (
    "hair drier", "toaster", "parking meter", "bear", "scissors", "microwave",
    "fire hydrant", "toothbrush", "stop sign", "mouse", "refrigerator", "snowboard",
    "frisbee", "keyboard", "hot dog", "baseball bat",
)

NUM_BASE_THINGS = 80


class InvalidRatio(ValueError):
    pass


class UnknownCategory(KeyError):
    pass


def unknown_class_names(ratio: int) -> tuple[str, ...]:
    if ratio not in RATIO_GROUPS:
        raise InvalidRatio(f"removal ratio must be one of {sorted(RATIO_GROUPS)}, got {ratio}")
    names: tuple[str, ...] = ()
    for group in UNKNOWN_CLASS_GROUPS[: RATIO_GROUPS[ratio]]:
        names += group
    return names


@dataclass(frozen=True)
class SplitSpec:
    removal_ratio: int
    zero_shot: bool = False
    base_classes: int = NUM_BASE_THINGS

    def __post_init__(self):
        if self.removal_ratio not in RATIO_GROUPS:
            raise InvalidRatio(f"removal ratio must be one of {sorted(RATIO_GROUPS)}")
        if self.zero_shot and self.removal_ratio != 5:
            raise InvalidRatio("the zero-shot setting is built on the 5% split")

    @property
    def removed_count(self) -> int:
        return self.removal_ratio * self.base_classes // 100


@dataclass(frozen=True)
class SplitResult:
    registry: CategoryRegistry
    removed_thing_ids: frozenset[int]
    ratio: int | None = None
    unseen_thing_ids: frozenset[int] = frozenset()
    dropped_image_ids: frozenset = frozenset()
    zero_shot: bool = False
    classes_override: bool = False
    crowd_counts_as_instance: bool = True

    def manifest(self) -> dict:
        name = lambda i: self.registry.get(i).name  # noqa: E731
        return {
            "ratio": self.ratio,
            "zero_shot": self.zero_shot,
            "classes_override": self.classes_override,
            "removed_classes": sorted(name(i) for i in self.removed_thing_ids),
            "removed_class_ids": sorted(self.removed_thing_ids),
            "unseen_classes": sorted(name(i) for i in self.unseen_thing_ids),
            "unseen_class_ids": sorted(self.unseen_thing_ids),
            "dropped_image_count": len(self.dropped_image_ids),
            "dropped_image_ids": sorted(self.dropped_image_ids, key=lambda x: (str(type(x)), x)),
            "crowd_counts_as_instance": self.crowd_counts_as_instance,
        }


def _thing_ids_for(registry: CategoryRegistry, names: Iterable[str]) -> list[int]:
    out = []
    for n in names:
        try:
            cat = registry.by_name(n)
        except KeyError:
            raise UnknownCategory(f"class {n!r} not in registry") from None
        if cat.kind != THING:
            raise UnknownCategory(f"class {n!r} is not a thing class")
        out.append(cat.id)
    return out


def make_split(
    ratio: int,
    registry: CategoryRegistry | None = None,
    classes: Sequence[str] | None = None,
) -> SplitResult:
    """Mark the K% unknown thing classes.

    ``classes`` replaces the fixed cumulative lists with a custom set; that
    option exists for experimentation and is flagged in the manifest.
    """
    if classes is None:
        SplitSpec(ratio)
        names = unknown_class_names(ratio)
    else:
        names = tuple(classes)
    registry = (registry or coco_registry()).reset_statuses()
    ids = _thing_ids_for(registry, names)
    return SplitResult(
        registry=registry.with_statuses({i: UNKNOWN for i in ids}),
        removed_thing_ids=frozenset(ids),
        ratio=ratio,
        classes_override=classes is not None,
    )


def apply_split(ann: PanopticAnnotation, split: SplitResult) -> PanopticAnnotation:
    """Void every segment whose category is unknown or unseen under the split."""
    registry = split.registry
    keep, drop = [], []
    for s in ann.segments:
        if s.category not in registry:
            raise UnknownCategory(f"image {ann.image_id}: category {s.category} not in registry")
        (drop if registry.get(s.category).status != KNOWN else keep).append(s)
    if not drop:
        return ann
    ids = ann.map.ids
    voided = np.where(np.isin(ids, np.array([s.id for s in drop], dtype=np.uint32)), VOID, ids)
    return PanopticAnnotation(ann.image_id, SegmentMap(voided), tuple(keep))


def make_zero_shot(
    anns: Iterable[PanopticAnnotation],
    split5: SplitResult,
    count_crowd: bool = True,
) -> SplitResult:
    """Zero-shot split: tail classes become unseen and their images are dropped.

    Status precedence is unseen > unknown > known.  Crowd segments of a tail
    class count as instances unless ``count_crowd`` is false.
    """
    if split5.ratio != 5:
        raise InvalidRatio("zero-shot setting requires the 5% split")
    tail = _thing_ids_for(split5.registry, TAIL_CLASSES)
    statuses = {i: UNKNOWN for i in split5.removed_thing_ids}
    statuses.update({i: UNSEEN for i in tail})
    tail_set = frozenset(tail)
    dropped = frozenset(
        a.image_id
        for a in anns
        if any(s.category in tail_set and (count_crowd or not s.crowd) for s in a.segments)
    )
    return SplitResult(
        registry=split5.registry.with_statuses(statuses),
        removed_thing_ids=frozenset(i for i, st in statuses.items() if st == UNKNOWN),
        ratio=5,
        unseen_thing_ids=tail_set,
        dropped_image_ids=dropped,
        zero_shot=True,
        classes_override=split5.classes_override,
        crowd_counts_as_instance=count_crowd,
    )
