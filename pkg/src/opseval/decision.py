"""Open-set inference rules and assembly of verdicts into a panoptic map."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit, softmax

from .core import (
    CategoryRegistry,
    PanopticAnnotation,
    SegmentMap,
    segments_from_map,
)
from .metrics import DimensionMismatch
from .proposals import MissingScore, Proposal

DUAL = "dual"
VOID_IGNORANCE = "void-ignorance"
VOID_BACKGROUND = "void-background"
VOID_SUPPRESSION = "void-suppression"
VOID_TRAIN = "void-train"
AUX_GATE = "aux-gate"
STRATEGIES = (DUAL, VOID_IGNORANCE, VOID_BACKGROUND, VOID_SUPPRESSION, VOID_TRAIN, AUX_GATE)
AUX_STRATEGIES = (VOID_TRAIN, AUX_GATE)

KNOWN_OUTCOME = "known"
UNKNOWN_OUTCOME = "unknown"
BACKGROUND_OUTCOME = "background"


class MissingAuxIndex(ValueError):
    pass


@dataclass(frozen=True)
class DecisionConfig:
    """Decision rule settings.

    Logits are ordered as the thing classes, then background, then any
    auxiliary classes.  ``num_things`` defaults to ``len(thing_ids)`` when
    given, otherwise to everything before the last logit (or before
    ``aux_index - 1`` for the auxiliary strategies).  ``thing_ids`` maps a
    thing index to its category id in Known verdicts.
    """

    strategy: str = DUAL
    tau_known: float = 0.5
    tau_obj: float = 0.5
    aux_index: int | None = None
    num_things: int | None = None
    thing_ids: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if (self.strategy in AUX_STRATEGIES) != (self.aux_index is not None):
            raise MissingAuxIndex(f"aux_index is required iff strategy is one of {AUX_STRATEGIES}")
        for tau in (self.tau_known, self.tau_obj):
            if not 0 < tau < 1:
                raise ValueError("thresholds must lie in (0, 1)")
        if self.thing_ids is not None:
            object.__setattr__(self, "thing_ids", tuple(self.thing_ids))

    def things_in(self, n_logits: int) -> int:
        if self.num_things is not None:
            return self.num_things
        if self.thing_ids is not None:
            return len(self.thing_ids)
        if self.aux_index is not None:
            return self.aux_index - 1
        return n_logits - 1


@dataclass(frozen=True)
class Verdict:
    outcome: str
    category: int | None
    known_conf: float
    obj_conf: float | None = None

    def to_record(self) -> dict:
        return {
            "outcome": self.outcome,
            "category_id": self.category,
            "known_conf": self.known_conf,
            "obj_conf": self.obj_conf,
        }


def decide_one(prop: Proposal, cfg: DecisionConfig) -> Verdict:
    if prop.known_logits is None:
        raise MissingScore(f"proposal {prop.box} has no class logits")
    z = np.asarray(prop.known_logits, dtype=np.float64)
    c = cfg.things_in(z.size)
    if not 0 < c < z.size:
        raise ValueError(f"{z.size} logits cannot hold {c} thing classes plus background")
    if cfg.aux_index is not None and not c < cfg.aux_index < z.size:
        raise MissingAuxIndex(f"aux_index {cfg.aux_index} outside the auxiliary logits")
    p = softmax(z)
    best = int(np.argmax(p[:c]))
    m = float(p[best])
    obj = None
    if prop.obj_logit is not None:
        obj = float(expit(prop.obj_logit))
    if cfg.strategy == DUAL and obj is None:
        raise MissingScore(f"proposal {prop.box} has no objectiveness logit")

    if m >= cfg.tau_known:
        category = cfg.thing_ids[best] if cfg.thing_ids is not None else best
        return Verdict(KNOWN_OUTCOME, category, m, obj)
    if cfg.strategy == DUAL:
        unknown = obj >= cfg.tau_obj
    elif cfg.strategy in AUX_STRATEGIES:
        unknown = int(np.argmax(p)) == cfg.aux_index
    else:
        unknown = True
    return Verdict(UNKNOWN_OUTCOME if unknown else BACKGROUND_OUTCOME, None, m, obj)


def decide(props: Sequence[Proposal], cfg: DecisionConfig) -> list[Verdict]:
    """Known if the best thing-class probability reaches ``tau_known``.

    Rejected proposals become Unknown when the strategy's second test passes:
    objectiveness >= ``tau_obj`` for the dual rule, argmax on the auxiliary
    class for void-train/aux-gate, unconditionally for the other baselines.
    Otherwise they are Background.
    """
    return [decide_one(p, cfg) for p in props]


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return inter / union if union else 0.0


def box_mask(box, width: int, height: int) -> np.ndarray:
    m = np.zeros((height, width), dtype=bool)
    x, y, w, h = box
    m[y : y + h, x : x + w] = True
    return m


def decisions_to_panoptic(
    shape: tuple[int, int],
    verdicts: Sequence[Verdict],
    props: Sequence[Proposal],
    masks: Sequence[np.ndarray],
    registry: CategoryRegistry,
    image_id=0,
    stuff: PanopticAnnotation | None = None,
    unknown_nms: float | None = None,
) -> PanopticAnnotation:
    """Paint instance masks into a panoptic annotation.

    Masks are painted in descending ``known_conf`` (stable for ties); a pixel
    once painted is never overwritten.  Unknown verdicts get
    ``registry.unknown_id``; Background verdicts stay void.  If ``stuff`` is
    given, its stuff segments fill pixels no instance claimed.  With
    ``unknown_nms`` set, an Unknown mask whose IoU with an already kept
    Unknown mask exceeds the threshold is discarded.
    """
    width, height = shape
    if not (len(verdicts) == len(props) == len(masks)):
        raise ValueError("verdicts, proposals and masks must align")
    ids = np.zeros((height, width), dtype=np.uint32)
    categories: dict[int, int] = {}
    order = sorted(range(len(verdicts)), key=lambda k: -verdicts[k].known_conf)
    kept_unknown: list[np.ndarray] = []
    next_id = 1
    for k in order:
        v = verdicts[k]
        if v.outcome == BACKGROUND_OUTCOME:
            continue
        mask = np.asarray(masks[k], dtype=bool)
        if mask.shape != (height, width):
            raise DimensionMismatch(f"mask {k} has shape {mask.shape}, expected {(height, width)}")
        if v.outcome == "unknown":
            if unknown_nms is not None and any(_mask_iou(mask, o) > unknown_nms for o in kept_unknown):
                continue
            kept_unknown.append(mask)
            cat = registry.unknown_id
        else:
            cat = v.category
        free = mask & (ids == 0)
        if not free.any():
            continue
        ids[free] = next_id
        categories[next_id] = cat
        next_id += 1
    if stuff is not None:
        if stuff.map.shape != ids.shape:
            raise DimensionMismatch("stuff annotation does not match the image size")
        for s in stuff.segments:
            if registry.get(s.category).isthing:
                continue
            free = (stuff.map.ids == s.id) & (ids == 0)
            if free.any():
                ids[free] = next_id
                categories[next_id] = s.category
                next_id += 1
    return PanopticAnnotation(image_id, SegmentMap(ids), segments_from_map(ids, categories))
