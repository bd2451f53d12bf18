"""Proposal labeling, void-component extraction and pseudo-label filtering."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.special import expit

from .core import THING, VOID, CategoryRegistry, PanopticAnnotation, box_iou

KNOWN_ROLE = "known"
VOID_ROLE = "void"
BACKGROUND_ROLE = "background"
ROLES = (KNOWN_ROLE, VOID_ROLE, BACKGROUND_ROLE)

KNOWN_IOU = 0.5
VOID_FRACTION = 0.5


class MissingScore(ValueError):
    pass


@dataclass(frozen=True)
class Proposal:
    """Axis-aligned ``(x, y, w, h)`` box with optional feature and head scores.

    ``known_logits`` holds the thing-class logits followed by background (and
    any auxiliary classes); ``obj_logit`` is the objectiveness head output.
    """

    box: tuple[int, int, int, int]
    image_id: int | str | None = None
    role: str | None = None
    category: int | None = None
    feature: tuple[float, ...] | None = None
    known_logits: tuple[float, ...] | None = None
    obj_logit: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "box", tuple(int(v) for v in self.box))
        if self.box[2] <= 0 or self.box[3] <= 0:
            raise ValueError(f"proposal box must have positive area: {self.box}")
        if self.role is not None and self.role not in ROLES:
            raise ValueError(f"bad role {self.role!r}")
        if self.feature is not None:
            object.__setattr__(self, "feature", tuple(float(v) for v in self.feature))
        if self.known_logits is not None:
            object.__setattr__(self, "known_logits", tuple(float(v) for v in self.known_logits))

    @classmethod
    def clipped(cls, box, width: int, height: int, **kw) -> Proposal:
        """Construct with the box clipped to the image."""
        x, y, w, h = box
        x0, y0 = max(0, int(x)), max(0, int(y))
        x1, y1 = min(width, int(x + w)), min(height, int(y + h))
        return cls((x0, y0, x1 - x0, y1 - y0), **kw)

    def with_role(self, role: str, category: int | None = None) -> Proposal:
        return replace(self, role=role, category=category)

    def to_record(self) -> dict:
        rec = {"image_id": self.image_id, "box": list(self.box), "role": self.role}
        if self.category is not None:
            rec["category_id"] = self.category
        if self.known_logits is not None:
            rec["known_logits"] = list(self.known_logits)
        if self.obj_logit is not None:
            rec["obj_logit"] = self.obj_logit
        if self.feature is not None:
            rec["feature"] = list(self.feature)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> Proposal:
        return cls(
            box=tuple(rec["box"]),
            image_id=rec.get("image_id"),
            role=rec.get("role"),
            category=rec.get("category_id"),
            feature=rec.get("feature"),
            known_logits=rec.get("known_logits"),
            obj_logit=rec.get("obj_logit"),
        )


def load_proposals(path) -> list[Proposal]:
    with open(path) as f:
        return [Proposal.from_record(r) for r in json.load(f)]


def dump_proposals(props: Iterable[Proposal], path) -> None:
    with open(path, "w") as f:
        json.dump([p.to_record() for p in props], f, indent=2)
        f.write("\n")


def _box_slice(box):
    x, y, w, h = box
    return slice(y, y + h), slice(x, x + w)


def label_proposals(
    props: Sequence[Proposal], gt: PanopticAnnotation, registry: CategoryRegistry
) -> list[Proposal]:
    """Assign each proposal a known class, void or background role.

    Known if the box overlaps a known non-crowd thing instance's bbox with
    IoU >= 0.5 (best IoU wins, ties to the smaller segment id); otherwise
    void if at least half of the box's pixels are void in ``gt``.
    """
    instances = sorted(
        (
            s
            for s in gt.segments
            if not s.crowd
            and s.category in registry
            and registry.get(s.category).kind == THING
            and registry.get(s.category).status == "known"
        ),
        key=lambda s: s.id,
    )
    void = gt.map.ids == VOID
    # summed-area table for O(1) void counts per box
    sat = np.zeros((gt.height + 1, gt.width + 1), dtype=np.int64)
    sat[1:, 1:] = void.cumsum(0).cumsum(1)
    out = []
    for p in props:
        best, best_iou = None, KNOWN_IOU
        for s in instances:
            iou = box_iou(p.box, s.bbox)
            if iou > best_iou or (iou == best_iou and best is None):
                best, best_iou = s, iou
        if best is not None:
            out.append(p.with_role(KNOWN_ROLE, best.category))
            continue
        x0, y0 = min(p.box[0], gt.width), min(p.box[1], gt.height)
        x1, y1 = min(p.box[0] + p.box[2], gt.width), min(p.box[1] + p.box[3], gt.height)
        n_void = sat[y1, x1] - sat[y0, x1] - sat[y1, x0] + sat[y0, x0]
        if n_void >= VOID_FRACTION * p.box[2] * p.box[3]:
            out.append(p.with_role(VOID_ROLE))
        else:
            out.append(p.with_role(BACKGROUND_ROLE))
    return out


def void_components(gt: PanopticAnnotation, connectivity: int = 4) -> list[Proposal]:
    """One void proposal per connected void region, boxed tightly."""
    if connectivity == 4:
        structure = ndimage.generate_binary_structure(2, 1)
    elif connectivity == 8:
        structure = ndimage.generate_binary_structure(2, 2)
    else:
        raise ValueError("connectivity must be 4 or 8")
    labels, n = ndimage.label(gt.map.ids == VOID, structure=structure)
    out = []
    for sl in ndimage.find_objects(labels, max_label=n):
        sy, sx = sl
        box = (sx.start, sy.start, sx.stop - sx.start, sy.stop - sy.start)
        out.append(Proposal(box, image_id=gt.image_id, role=VOID_ROLE))
    return out


def void_component_labels(gt: PanopticAnnotation, connectivity: int = 4) -> np.ndarray:
    structure = ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)
    return ndimage.label(gt.map.ids == VOID, structure=structure)[0]


def pseudo_filter(props: Sequence[Proposal], delta: float) -> tuple[list[Proposal], list[Proposal]]:
    """Split proposals by sigmoid(objectiveness logit) >= delta."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    kept, dropped = [], []
    for p in props:
        if p.obj_logit is None:
            raise MissingScore(f"proposal {p.box} has no objectiveness logit")
        (kept if expit(p.obj_logit) >= delta else dropped).append(p)
    return kept, dropped
