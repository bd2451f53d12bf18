"""Dataset-level evaluation: per-image matching fanned out over a process pool."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .annotation_io import (
    MAPS_NAME,
    META_NAME,
    DatasetError,
    annotation_from_record,
    load_meta,
    parse_meta,
)
from .core import CategoryRegistry, PanopticAnnotation, SegmentMap
from .metrics import MatchStats, MetricReport, accumulate, match_image, report

JOBS_ENV = "OPSEVAL_JOBS"


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        return 1


def _match_records(task) -> MatchStats:
    gt_rec, gt_maps, pred_rec, pred_maps, registry, strict = task
    gt = annotation_from_record(gt_rec, gt_maps)
    if pred_rec is None:
        pred = PanopticAnnotation(gt.image_id, SegmentMap.empty(gt.width, gt.height))
    else:
        pred = annotation_from_record(pred_rec, pred_maps)
    return match_image(gt, pred, registry, strict)


def available_cpus() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def _run(fn, tasks, jobs: int):
    # more processes than CPUs only adds scheduling and pickling overhead
    jobs = min(jobs, available_cpus())
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(jobs) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))


def evaluate_dirs(
    gt_dir,
    pred_dir,
    registry: CategoryRegistry | None = None,
    jobs: int = 1,
    strict: bool = False,
) -> tuple[MatchStats, MetricReport]:
    """Evaluate a prediction dataset directory against a ground-truth one.

    Ground-truth images absent from the predictions are scored as all-void
    predictions.  ``registry`` defaults to the ground truth's categories.
    """
    gt_dir, pred_dir = Path(gt_dir), Path(pred_dir)
    gt_doc = load_meta(gt_dir / META_NAME)
    pred_doc = load_meta(pred_dir / META_NAME)
    gt_registry = parse_meta(gt_doc)
    parse_meta(pred_doc)
    registry = registry or gt_registry
    preds = {r["image_id"]: r for r in pred_doc["annotations"]}
    gt_ids = {r["image_id"] for r in gt_doc["annotations"]}
    extra = [i for i in preds if i not in gt_ids]
    if extra:
        raise DatasetError(f"predictions for images absent from ground truth: {extra[:10]}")
    tasks = [
        (r, gt_dir / MAPS_NAME, preds.get(r["image_id"]), pred_dir / MAPS_NAME, registry, strict)
        for r in gt_doc["annotations"]
    ]
    stats = accumulate(_run(_match_records, tasks, jobs))
    return stats, report(stats, registry)


def _match_pair(task) -> MatchStats:
    gt, pred, registry, strict = task
    return match_image(gt, pred, registry, strict)


def evaluate_pairs(pairs, registry: CategoryRegistry, jobs: int = 1, strict: bool = False):
    """Evaluate in-memory ``(gt, pred)`` annotation pairs."""
    tasks = [(gt, pred, registry, strict) for gt, pred in pairs]
    stats = accumulate(_run(_match_pair, tasks, jobs))
    return stats, report(stats, registry)
