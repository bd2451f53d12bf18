"""Panoptic quality: segment matching, accumulation and reporting.

Matching follows the COCO panoptic protocol: a (pred, gt) pair of the same
class is a true positive iff IoU > 0.5, with pixels that are void in the
ground truth removed from the union.  Crowd ground truth is never matched and
never counted as a false negative; a predicted segment is not a false
positive when more than half of it lies on void or same-class crowd pixels.
``strict=True`` drops those conventions and scores plain IoU.

Open-set classes: ground truth of every unknown/unseen category and
predictions carrying the registry's reserved unknown id share one matching
class.  TP/FN of such ground truth are recorded under ``registry.unknown_id``
or ``registry.unseen_id`` according to its status; unmatched open-set
predictions count as FP under ``registry.unknown_id``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import KNOWN, THING, CategoryRegistry, PanopticAnnotation, SegmentMap

IOU_THRESHOLD = 0.5
GROUPS = ("all", "known", "known-thing", "known-stuff", "unknown", "unseen")


class DimensionMismatch(ValueError):
    pass


@dataclass
class CategoryStats:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0

    def __iadd__(self, other: CategoryStats):
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.iou_sum += other.iou_sum
        return self


class MatchStats:
    """Per-category TP/FP/FN counts and summed IoU of matched pairs."""

    def __init__(self, per_category: dict[int, CategoryStats] | None = None):
        self.per_category: dict[int, CategoryStats] = dict(per_category or {})

    def __getitem__(self, key: int) -> CategoryStats:
        if key not in self.per_category:
            self.per_category[key] = CategoryStats()
        return self.per_category[key]

    def __iadd__(self, other: MatchStats):
        for key, s in other.per_category.items():
            cs = self[key]
            cs += s
        return self

    def __eq__(self, other):
        if not isinstance(other, MatchStats):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def keys(self):
        return sorted(self.per_category)

    def totals(self) -> CategoryStats:
        out = CategoryStats()
        for key in self.keys():
            out += self.per_category[key]
        return out

    def to_dict(self) -> dict[int, dict]:
        return {
            k: asdict(v)
            for k, v in sorted(self.per_category.items())
            if v.tp or v.fp or v.fn or v.iou_sum
        }

    def __repr__(self):
        return f"MatchStats({self.to_dict()})"


@dataclass
class MatchResult:
    stats: MatchStats
    pairs: list[tuple[int, int, float]] = field(default_factory=list)  # (gt_id, pred_id, iou)


def joint_histogram(gt_map: SegmentMap, pred_map: SegmentMap, g: np.ndarray, p: np.ndarray):
    """Pixel counts per (gt index, pred index), index 0 being void."""
    gi = gt_map.dense_labels(g)
    pi = pred_map.dense_labels(p)
    rows, cols = g.size + 1, p.size + 1
    if rows * cols <= 1 << 22:
        return np.bincount(gi * cols + pi, minlength=rows * cols).reshape(rows, cols)
    # very many segments: only observed pairs are materialized
    keys, counts = np.unique(gi * cols + pi, return_counts=True)
    hist = {}
    for k, c in zip(keys.tolist(), counts.tolist()):
        hist[divmod(k, cols)] = c
    return hist


def match_segments(
    gt: PanopticAnnotation,
    pred: PanopticAnnotation,
    registry: CategoryRegistry,
    strict: bool = False,
) -> MatchResult:
    if gt.map.shape != pred.map.shape:
        raise DimensionMismatch(
            f"image {gt.image_id}: gt {gt.width}x{gt.height} vs pred {pred.width}x{pred.height}"
        )
    gsegs = sorted(gt.segments, key=lambda s: s.id)
    psegs = sorted(pred.segments, key=lambda s: s.id)
    g = np.array([s.id for s in gsegs], dtype=np.uint32)
    p = np.array([s.id for s in psegs], dtype=np.uint32)
    hist = joint_histogram(gt.map, pred.map, g, p)

    if isinstance(hist, dict):
        pairs_iter = sorted((i, j, c) for (i, j), c in hist.items())
        g_area = np.zeros(g.size + 1, dtype=np.int64)
        p_area = np.zeros(p.size + 1, dtype=np.int64)
        p_void = np.zeros(p.size + 1, dtype=np.int64)
        for i, j, c in pairs_iter:
            g_area[i] += c
            p_area[j] += c
            if i == 0:
                p_void[j] += c
    else:
        g_area = hist.sum(axis=1)
        p_area = hist.sum(axis=0)
        p_void = hist[0]
        ii, jj = np.nonzero(hist)
        pairs_iter = list(zip(ii.tolist(), jj.tolist(), hist[ii, jj].tolist()))

    g_class = [registry.match_class(s.category) for s in gsegs]
    g_key = [registry.stat_key(s.category) for s in gsegs]
    p_class = [registry.match_class(s.category) for s in psegs]
    g_crowd = [s.crowd and not strict for s in gsegs]

    stats = MatchStats()
    pairs = []
    g_matched = [False] * len(gsegs)
    p_matched = [False] * len(psegs)
    p_crowd = [0] * len(psegs)  # pixels on same-class crowd gt
    ious: dict[int, list[float]] = {}

    for i, j, inter in pairs_iter:
        if i == 0 or j == 0:
            continue
        gi, pj = i - 1, j - 1
        if g_class[gi] != p_class[pj]:
            continue
        if g_crowd[gi]:
            p_crowd[pj] += inter
            continue
        union = int(p_area[j]) + int(g_area[i]) - inter
        if not strict:
            union -= int(p_void[j])
        iou = inter / union
        if iou > IOU_THRESHOLD:
            g_matched[gi] = p_matched[pj] = True
            stats[g_key[gi]].tp += 1
            ious.setdefault(g_key[gi], []).append(iou)
            pairs.append((gsegs[gi].id, psegs[pj].id, iou))

    # exact summation, so the result does not depend on segment numbering
    for key, values in ious.items():
        stats[key].iou_sum = math.fsum(values)
    for gi, s in enumerate(gsegs):
        if not g_matched[gi] and not g_crowd[gi]:
            stats[g_key[gi]].fn += 1
    for pj, s in enumerate(psegs):
        if p_matched[pj]:
            continue
        if not strict:
            area = int(p_area[pj + 1])
            if area and (int(p_void[pj + 1]) + p_crowd[pj]) / area > IOU_THRESHOLD:
                continue
        stats[p_class[pj]].fp += 1
    return MatchResult(stats, pairs)


def match_image(
    gt: PanopticAnnotation,
    pred: PanopticAnnotation,
    registry: CategoryRegistry,
    strict: bool = False,
) -> MatchStats:
    return match_segments(gt, pred, registry, strict).stats


def accumulate(stats: Iterable[MatchStats]) -> MatchStats:
    out = MatchStats()
    for s in stats:
        out += s
    return out


@dataclass
class MetricRow:
    name: str
    pq: float
    sq: float
    rq: float
    recall: float
    precision: float
    tp: int
    fp: int
    fn: int
    n: int = 1  # categories averaged into this row


def _ratio(num, den) -> float:
    return num / den if den else 0.0


def category_row(name: str, s: CategoryStats) -> MetricRow:
    sq = _ratio(s.iou_sum, s.tp)
    rq = _ratio(s.tp, s.tp + 0.5 * s.fp + 0.5 * s.fn)
    return MetricRow(
        name, sq * rq, sq, rq, _ratio(s.tp, s.tp + s.fn), _ratio(s.tp, s.tp + s.fp), s.tp, s.fp, s.fn
    )


@dataclass
class MetricReport:
    categories: dict[int, MetricRow]
    groups: dict[str, MetricRow]

    def to_dict(self) -> dict:
        return {
            "groups": {k: asdict(v) for k, v in self.groups.items()},
            "categories": {str(k): asdict(v) for k, v in self.categories.items()},
        }

    def format_table(self, groups: Sequence[str] | None = None, per_category: bool = False) -> str:
        rows = [self.groups[g] for g in (groups or GROUPS) if g in self.groups]
        if per_category:
            rows += list(self.categories.values())
        width = max([len(r.name) for r in rows] + [8])
        head = f"{'':<{width}} {'PQ':>6} {'SQ':>6} {'RQ':>6} {'R':>6} {'P':>6} {'n':>4} {'TP':>7} {'FP':>7} {'FN':>7}"
        lines = [head]
        for r in rows:
            lines.append(
                f"{r.name:<{width}} {100 * r.pq:6.1f} {100 * r.sq:6.1f} {100 * r.rq:6.1f}"
                f" {100 * r.recall:6.1f} {100 * r.precision:6.1f} {r.n:4d} {r.tp:7d} {r.fp:7d} {r.fn:7d}"
            )
        return "\n".join(lines)


def _group_of(key: int, registry: CategoryRegistry) -> tuple[str, ...]:
    if key == registry.unknown_id:
        return ("all", "unknown")
    if key == registry.unseen_id:
        return ("all", "unseen")
    cat = registry.get(key)
    if cat.status != KNOWN:
        return ("all", cat.status)
    return ("all", "known", "known-thing" if cat.kind == THING else "known-stuff")


def report(stats: MatchStats, registry: CategoryRegistry) -> MetricReport:
    """Per-category rows plus unweighted group means over observed categories.

    Group recall/precision are computed from pooled counts.
    """
    categories = {}
    members: dict[str, list[int]] = {g: [] for g in GROUPS}
    for key in stats.keys():
        s = stats.per_category[key]
        if not (s.tp or s.fp or s.fn):
            continue
        categories[key] = category_row(registry.get(key).name, s)
        for g in _group_of(key, registry):
            members[g].append(key)
    groups = {}
    for g in GROUPS:
        keys = members[g]
        if not keys:
            continue
        rows = [categories[k] for k in keys]
        n = len(rows)
        tp = sum(r.tp for r in rows)
        fp = sum(r.fp for r in rows)
        fn = sum(r.fn for r in rows)
        groups[g] = MetricRow(
            g,
            math.fsum(r.pq for r in rows) / n,
            math.fsum(r.sq for r in rows) / n,
            math.fsum(r.rq for r in rows) / n,
            _ratio(tp, tp + fn),
            _ratio(tp, tp + fp),
            tp,
            fp,
            fn,
            n,
        )
    return MetricReport(categories, groups)


def f1(recall: float, precision: float) -> float:
    return _ratio(2 * recall * precision, recall + precision)


@dataclass
class Deviation:
    pq: float  # |pq - sq*rq|
    rq: float  # |rq - F1(recall, precision)|
    percent: bool


def consistency_check(rows: Iterable[Sequence[float]]) -> list[Deviation]:
    """Check PQ = SQ*RQ and RQ = F1(R, P) on (pq, sq, rq, recall, precision) rows.

    Rows with any value above 1 are read on the percent scale and their
    deviations are returned in percentage points.
    """
    out = []
    for row in rows:
        pq, sq, rq, r, p = (float(v) for v in row)
        percent = max(pq, sq, rq, r, p) > 1
        scale = 100.0 if percent else 1.0
        out.append(Deviation(abs(pq - sq * rq / scale), abs(rq - f1(r, p)), percent))
    return out
