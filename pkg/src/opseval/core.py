"""Shared domain types: segment maps, annotations and the category vocabulary."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .coco import COCO_STUFF_CATEGORIES, COCO_THING_CATEGORIES

VOID = 0
MAX_SEGMENT_ID = 2**24 - 1

THING = "thing"
STUFF = "stuff"
KINDS = (THING, STUFF)

KNOWN = "known"
UNKNOWN = "unknown"
UNSEEN = "unseen"
STATUSES = (KNOWN, UNKNOWN, UNSEEN)

# Reserved ids outside the COCO range: predictions of the open-set class
# carry DEFAULT_UNKNOWN_ID; DEFAULT_UNSEEN_ID only keys unseen-GT statistics.
DEFAULT_UNKNOWN_ID = 201
DEFAULT_UNSEEN_ID = 202


class RegistryError(ValueError):
    pass


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    kind: str = THING
    status: str = KNOWN

    @property
    def isthing(self) -> bool:
        return self.kind == THING


@dataclass(frozen=True)
class CategoryRegistry:
    """Category ids mapped to thing/stuff kind and known/unknown/unseen status.

    The two reserved ids are not entries: ``unknown_id`` is the single
    category that open-set predictions are painted with, and ``unseen_id``
    is the statistics key under which unseen ground truth is scored.
    """

    entries: tuple[Category, ...]
    unknown_id: int = DEFAULT_UNKNOWN_ID
    unseen_id: int = DEFAULT_UNSEEN_ID
    _by_id: Mapping[int, Category] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        by_id = {}
        for cat in entries:
            if cat.id in by_id:
                raise RegistryError(f"duplicate category id {cat.id}")
            if cat.kind not in KINDS:
                raise RegistryError(f"category {cat.id}: bad kind {cat.kind!r}")
            if cat.status not in STATUSES:
                raise RegistryError(f"category {cat.id}: bad status {cat.status!r}")
            if cat.kind == STUFF and cat.status != KNOWN:
                raise RegistryError(f"stuff category {cat.id} ({cat.name}) must be known")
            by_id[cat.id] = cat
        for reserved in (self.unknown_id, self.unseen_id):
            if reserved in by_id:
                raise RegistryError(f"reserved id {reserved} collides with a category")
        if self.unknown_id == self.unseen_id:
            raise RegistryError("unknown_id and unseen_id must differ")
        object.__setattr__(self, "_by_id", by_id)

    def __contains__(self, cat_id: int) -> bool:
        return cat_id in self._by_id or cat_id in (self.unknown_id, self.unseen_id)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def get(self, cat_id: int) -> Category:
        if cat_id == self.unknown_id:
            return Category(cat_id, "unknown", THING, UNKNOWN)
        if cat_id == self.unseen_id:
            return Category(cat_id, "unseen", THING, UNSEEN)
        try:
            return self._by_id[cat_id]
        except KeyError:
            raise KeyError(f"category {cat_id} not in registry") from None

    def by_name(self, name: str) -> Category:
        for cat in self.entries:
            if cat.name == name:
                return cat
        raise KeyError(f"no category named {name!r}")

    def ids(self, kind: str | None = None, status: str | None = None) -> list[int]:
        return [
            c.id
            for c in self.entries
            if (kind is None or c.kind == kind) and (status is None or c.status == status)
        ]

    def known_thing_ids(self) -> list[int]:
        return self.ids(THING, KNOWN)

    def with_statuses(self, statuses: Mapping[int, str]) -> CategoryRegistry:
        """Copy with the given category statuses replaced; others keep theirs."""
        missing = set(statuses) - set(self._by_id)
        if missing:
            raise KeyError(f"categories not in registry: {sorted(missing)}")
        entries = tuple(
            replace(c, status=statuses[c.id]) if c.id in statuses else c for c in self.entries
        )
        return replace(self, entries=entries)

    def reset_statuses(self) -> CategoryRegistry:
        return replace(self, entries=tuple(replace(c, status=KNOWN) for c in self.entries))

    def is_open_set(self, cat_id: int) -> bool:
        return self.get(cat_id).status != KNOWN

    def match_class(self, cat_id: int) -> int:
        """Class used when pairing segments: all open-set ids collapse to one."""
        if cat_id in (self.unknown_id, self.unseen_id):
            return self.unknown_id
        cat = self.get(cat_id)
        return self.unknown_id if cat.status != KNOWN else cat_id

    def stat_key(self, cat_id: int) -> int:
        """Key under which a ground-truth segment's TP/FN are recorded."""
        if cat_id == self.unseen_id:
            return self.unseen_id
        if cat_id == self.unknown_id:
            return self.unknown_id
        status = self.get(cat_id).status
        if status == UNSEEN:
            return self.unseen_id
        if status == UNKNOWN:
            return self.unknown_id
        return cat_id


def coco_registry(
    unknown_id: int = DEFAULT_UNKNOWN_ID, unseen_id: int = DEFAULT_UNSEEN_ID
) -> CategoryRegistry:
    """All 133 COCO panoptic categories, every one known."""
    entries = [Category(i, n, THING) for i, n in COCO_THING_CATEGORIES]
    entries += [Category(i, n, STUFF) for i, n in COCO_STUFF_CATEGORIES]
    return CategoryRegistry(tuple(entries), unknown_id, unseen_id)


class SegmentMap:
    """Per-pixel segment ids, shape ``(height, width)``, 0 meaning void.

    The wrapped array is made read-only.  The most recent dense labeling is
    memoized so validation and matching share one pass over the pixels.
    """

    __slots__ = ("ids", "_labels")

    def __init__(self, ids):
        arr = np.array(ids, dtype=np.uint32, copy=True, order="C")
        if arr.ndim != 2:
            raise ValueError(f"segment map must be 2-D, got shape {arr.shape}")
        if arr.size and int(arr.max()) > MAX_SEGMENT_ID:
            raise ValueError("segment ids must be < 2**24")
        arr.flags.writeable = False
        self.ids = arr
        self._labels = None

    def dense_labels(self, seg_ids: np.ndarray) -> np.ndarray:
        """Flat ``dense_labels`` of this map for sorted ``seg_ids``."""
        key = np.asarray(seg_ids, dtype=np.uint32).tobytes()
        if self._labels is None or self._labels[0] != key:
            labels = dense_labels(self.ids.ravel(), np.asarray(seg_ids, dtype=np.uint32))
            labels.flags.writeable = False
            self._labels = (key, labels)
        return self._labels[1]

    def __getstate__(self):
        return self.ids

    def __setstate__(self, ids):
        self.ids = ids
        self._labels = None

    @classmethod
    def empty(cls, width: int, height: int) -> SegmentMap:
        return cls(np.zeros((height, width), dtype=np.uint32))

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape

    def __eq__(self, other):
        if not isinstance(other, SegmentMap):
            return NotImplemented
        return self.ids.shape == other.ids.shape and bool(np.array_equal(self.ids, other.ids))

    def __hash__(self):
        return hash((self.ids.shape, self.ids.tobytes()))

    def __repr__(self):
        return f"SegmentMap(width={self.width}, height={self.height})"


@dataclass(frozen=True)
class SegmentInfo:
    id: int
    category: int
    area: int
    bbox: tuple[int, int, int, int]
    crowd: bool = False


@dataclass(frozen=True)
class PanopticAnnotation:
    image_id: int | str
    map: SegmentMap
    segments: tuple[SegmentInfo, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))

    @property
    def width(self) -> int:
        return self.map.width

    @property
    def height(self) -> int:
        return self.map.height

    def segment(self, seg_id: int) -> SegmentInfo:
        for s in self.segments:
            if s.id == seg_id:
                return s
        raise KeyError(seg_id)


@dataclass
class SegmentMeasure:
    ids: np.ndarray  # sorted declared segment ids
    areas: np.ndarray
    bboxes: list[tuple[int, int, int, int] | None]
    orphans: np.ndarray  # nonzero ids present in the map but not declared
    labels: np.ndarray  # per-pixel index into ``ids`` plus one, 0 elsewhere


_LUT_LIMIT = 1 << 21


def dense_labels(flat: np.ndarray, seg_ids: np.ndarray) -> np.ndarray:
    """1 + position of each pixel's id in sorted ``seg_ids``; 0 for void or undeclared ids.

    Uses a lookup table when the largest id is small enough, binary search otherwise.
    """
    if seg_ids.size == 0:
        return np.zeros(flat.shape, dtype=np.intp)
    top = int(flat.max()) if flat.size else 0
    if top < _LUT_LIMIT:
        lut = np.zeros(max(top, int(seg_ids[-1])) + 1, dtype=np.intp)
        lut[seg_ids] = np.arange(1, seg_ids.size + 1)
        lut[VOID] = 0
        return np.take(lut, flat)
    pos = np.searchsorted(seg_ids, flat)
    np.minimum(pos, seg_ids.size - 1, out=pos)
    return np.where(seg_ids[pos] == flat, pos + 1, 0).astype(np.intp)


def measure_segments(ids, seg_ids: Iterable[int]) -> SegmentMeasure:
    """Area, tight bbox and orphan detection for ``seg_ids`` in one sweep.

    ``ids`` is an id array or a SegmentMap (whose labeling is then reused).
    """
    declared = np.unique(np.asarray([s for s in seg_ids if s != VOID], dtype=np.uint32))
    if isinstance(ids, SegmentMap):
        labels = ids.dense_labels(declared)
        ids = ids.ids
    else:
        labels = dense_labels(ids.ravel(), declared)
    flat = ids.ravel()
    counts = np.bincount(labels, minlength=declared.size + 1)
    areas = counts[1:]
    if counts[0] > np.count_nonzero(flat == VOID):
        stray = flat[labels == 0]
        orphans = np.unique(stray[stray != VOID])
    else:
        orphans = np.zeros(0, np.uint32)
    labels = labels.reshape(ids.shape)
    bboxes: list[tuple[int, int, int, int] | None] = []
    if declared.size:
        for sl in ndimage.find_objects(labels, max_label=declared.size):
            if sl is None:
                bboxes.append(None)
            else:
                sy, sx = sl
                bboxes.append((sx.start, sy.start, sx.stop - sx.start, sy.stop - sy.start))
    return SegmentMeasure(declared, areas, bboxes, orphans, labels)


def segments_from_map(
    ids: np.ndarray, categories: Mapping[int, int], crowd: Mapping[int, bool] | None = None
) -> tuple[SegmentInfo, ...]:
    """Build SegmentInfo records for every nonzero id, in ascending id order."""
    crowd = crowd or {}
    present = [int(i) for i in np.unique(ids) if i != VOID]
    m = measure_segments(ids, present)
    out = []
    for k, seg_id in enumerate(m.ids.tolist()):
        out.append(
            SegmentInfo(seg_id, categories[seg_id], int(m.areas[k]), m.bboxes[k], crowd.get(seg_id, False))
        )
    return tuple(out)


def validate_annotation(ann: PanopticAnnotation) -> list[str]:
    """Check every SegmentInfo against the map; one message per violation."""
    violations = []
    seen = set()
    for s in ann.segments:
        if s.id in seen:
            violations.append(f"segment {s.id}: duplicate id")
        seen.add(s.id)
        if s.id == VOID:
            violations.append("segment 0: void id used as a segment")
    m = measure_segments(ann.map, seen)
    index = {int(v): k for k, v in enumerate(m.ids.tolist())}
    for s in ann.segments:
        if s.id == VOID:
            continue
        k = index[s.id]
        actual = int(m.areas[k])
        if actual == 0:
            violations.append(f"segment {s.id}: zero area (no pixels in map)")
            continue
        if s.area != actual:
            violations.append(f"segment {s.id}: area mismatch, declared {s.area}, map has {actual}")
        if tuple(s.bbox) != m.bboxes[k]:
            violations.append(f"segment {s.id}: bbox mismatch, declared {tuple(s.bbox)}, map has {m.bboxes[k]}")
    for orphan in m.orphans.tolist():
        violations.append(f"segment {orphan}: orphan id in map, absent from segment list")
    return violations


def box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two (x, y, w, h) boxes."""
    ax2, ay2 = a[0] + a[2], a[1] + a[3]
    bx2, by2 = b[0] + b[2], b[1] + b[3]
    iw = min(ax2, bx2) - max(a[0], b[0])
    ih = min(ay2, by2) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)
