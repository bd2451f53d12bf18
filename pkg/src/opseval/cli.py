"""Command-line frontend.

Exit codes: 0 success, 1 a check failed, 2 usage or data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import annotation_io as aio
from .core import coco_registry
from .decision import STRATEGIES, DecisionConfig, box_mask, decide, decisions_to_panoptic
from .evaluate import default_jobs, evaluate_dirs
from .heads import (
    LOSSES,
    VOID_LABEL,
    Batch,
    EmptyBatch,
    HeadParams,
    cls_loss,
    gradient_suite,
    objectiveness_loss,
    pseudo_obj_loss,
    void_suppression_loss,
)
from .metrics import GROUPS, consistency_check
from .proposals import dump_proposals, label_proposals, load_proposals, pseudo_filter, void_components
from .splits import apply_split, make_split, make_zero_shot
from .synth import random_layout, render

GRADIENT_TOL = 1e-5
MANIFEST_NAME = "split_manifest.json"


class CheckFailed(Exception):
    pass


def _write_json(obj, path):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _registry_arg(path):
    if path is None:
        return None
    return aio.parse_meta(aio.load_meta(path))


def cmd_eval(args):
    registry = _registry_arg(args.registry)
    stats, rep = evaluate_dirs(args.gt_dir, args.pred_dir, registry, jobs=args.jobs, strict=args.strict)
    groups = GROUPS if args.group == "all" else tuple(g for g in GROUPS if g.startswith(args.group))
    print(rep.format_table(groups, per_category=args.per_category))
    if args.out:
        _write_json(rep.to_dict(), args.out)
    return 0


def cmd_split(args):
    registry, anns = aio.read_dataset_dir(args.in_dir, jobs=args.jobs)
    classes = [c.strip() for c in args.classes.split(",")] if args.classes else None
    if args.zero_shot:
        split = make_zero_shot(anns, make_split(5, registry, classes), count_crowd=not args.ignore_crowd)
    else:
        split = make_split(args.ratio, registry, classes)
    if args.keep_open_set:
        out = anns
    else:
        out = [apply_split(a, split) for a in anns if a.image_id not in split.dropped_image_ids]
    aio.write_dataset(split.registry, out, args.out_dir)
    manifest = split.manifest()
    manifest["open_set_kept"] = args.keep_open_set
    manifest["images_in"] = len(anns)
    manifest["images_out"] = len(out)
    _write_json(manifest, Path(args.out_dir) / MANIFEST_NAME)
    print(
        f"removed {len(split.removed_thing_ids)} classes, {len(split.unseen_thing_ids)} unseen, "
        f"dropped {len(split.dropped_image_ids)} of {len(anns)} images"
    )
    return 0


def _by_image(props):
    groups = defaultdict(list)
    for k, p in enumerate(props):
        groups[p.image_id].append(k)
    return groups


def cmd_label_proposals(args):
    registry, anns = aio.read_dataset_dir(args.gt_dir)
    registry = _registry_arg(args.registry) or registry
    by_id = {a.image_id: a for a in anns}
    props = load_proposals(args.proposals)
    out = list(props)
    for image_id, idx in _by_image(props).items():
        if image_id not in by_id:
            raise aio.DatasetError(f"proposals reference unknown image {image_id}")
        for k, p in zip(idx, label_proposals([props[k] for k in idx], by_id[image_id], registry)):
            out[k] = p
    dump_proposals(out, args.out)
    counts = defaultdict(int)
    for p in out:
        counts[p.role] += 1
    print(" ".join(f"{r}={counts[r]}" for r in ("known", "void", "background")))
    return 0


def cmd_void_components(args):
    _, anns = aio.read_dataset_dir(args.gt_dir)
    props = [p for a in anns for p in void_components(a, args.connectivity)]
    dump_proposals(props, args.out)
    print(f"{len(props)} void components in {len(anns)} images")
    return 0


def cmd_pseudo_filter(args):
    kept, dropped = pseudo_filter(load_proposals(args.proposals), args.delta)
    dump_proposals(kept, args.out)
    if args.dropped:
        dump_proposals(dropped, args.dropped)
    print(f"kept {len(kept)}, dropped {len(dropped)}")
    return 0


def cmd_decide(args):
    props = load_proposals(args.proposals)
    gt_registry, gt_anns = (None, None)
    if args.gt_dir:
        gt_registry, gt_anns = aio.read_dataset_dir(args.gt_dir)
    registry = _registry_arg(args.registry) or gt_registry
    thing_ids = tuple(registry.known_thing_ids()) if registry is not None else None
    cfg = DecisionConfig(args.strategy, args.tau_known, args.tau_obj, args.aux_index, thing_ids=thing_ids)
    verdicts = decide(props, cfg)
    _write_json(
        [dict(v.to_record(), image_id=p.image_id, box=list(p.box)) for p, v in zip(props, verdicts)],
        args.out,
    )
    if args.panoptic_out:
        if gt_anns is None:
            raise aio.DatasetError("--panoptic-out needs --gt-dir for image sizes")
        groups = _by_image(props)
        out = []
        for gt in gt_anns:
            idx = groups.get(gt.image_id, [])
            masks = [box_mask(props[k].box, gt.width, gt.height) for k in idx]
            out.append(
                decisions_to_panoptic(
                    (gt.width, gt.height),
                    [verdicts[k] for k in idx],
                    [props[k] for k in idx],
                    masks,
                    registry,
                    image_id=gt.image_id,
                    stuff=gt if args.stuff_from_gt else None,
                    unknown_nms=args.unknown_nms,
                )
            )
        aio.write_dataset(registry, out, args.panoptic_out)
    counts = defaultdict(int)
    for v in verdicts:
        counts[v.outcome] += 1
    print(" ".join(f"{o}={counts[o]}" for o in ("known", "unknown", "background")))
    return 0


def _zero_batch(num_things: int, dim: int, size: int) -> Batch:
    labels = np.array([[0, num_things, VOID_LABEL][k % 3] for k in range(size)], dtype=np.int64)
    return Batch(np.ones((size, dim)), labels)


def cmd_losscheck(args):
    if args.batch < 1:
        raise EmptyBatch("loss-check needs --batch >= 1")
    if args.zero:
        params = HeadParams.zeros(args.things, args.dim)
        batch = _zero_batch(args.things, args.dim, max(args.batch, 3))
        values = {
            "cls": cls_loss(params, batch)[0],
            "void_suppression": void_suppression_loss(params, batch)[0],
            "objectiveness": objectiveness_loss(params, batch)[0],
            "pseudo_obj": pseudo_obj_loss(params, batch, 0.5)[0],
        }
        c = args.things
        expected = {
            "cls": math.log(c + 1),
            "void_suppression": c * math.log((c + 1) / c),
            "objectiveness": math.log(2),
            "pseudo_obj": math.log(2),
        }
        failed = False
        for name in LOSSES:
            err = abs(values[name] - expected[name])
            failed |= err > 1e-12
            print(f"{name:<18} loss={values[name]:.12f} closed_form={expected[name]:.12f} abs_err={err:.2e}")
        return 1 if failed else 0
    worst = gradient_suite(args.trials, args.seed, dim=args.dim, batch=args.batch, delta=args.delta)
    failed = False
    for name in LOSSES:
        ok = worst[name] < GRADIENT_TOL
        failed |= not ok
        print(f"{name:<18} max_rel_err={worst[name]:.3e} {'ok' if ok else 'FAIL'}")
    return 1 if failed else 0


def read_rows(path) -> list[tuple[str, tuple[float, ...]]]:
    """Rows of a CSV with columns label, pq, sq, rq, recall, precision."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        return [
            (r["label"], tuple(float(r[k]) for k in ("pq", "sq", "rq", "recall", "precision")))
            for r in reader
        ]


def cmd_consistency(args):
    rows = read_rows(args.rows)
    devs = consistency_check(v for _, v in rows)
    failed = False
    for (label, _), d in zip(rows, devs):
        ok = d.pq < args.pq_tol and d.rq < args.rq_tol
        failed |= not ok
        print(f"{label:<24} |PQ-SQ*RQ|={d.pq:.3f} |RQ-F1|={d.rq:.3f} {'ok' if ok else 'FAIL'}")
    return 1 if failed else 0


def cmd_synth(args):
    rng = np.random.default_rng(args.seed)
    registry = coco_registry()
    anns = [
        render(
            random_layout(rng, registry, args.size, args.size, args.max_things, void_boxes=args.void_boxes),
            image_id=i,
        )
        for i in range(args.images)
    ]
    aio.write_dataset(registry, anns, args.out_dir)
    print(f"wrote {len(anns)} images to {args.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="opseval", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="panoptic quality of a prediction dataset")
    p.add_argument("gt_dir")
    p.add_argument("pred_dir")
    p.add_argument("--registry", help="metadata file whose categories define the split")
    p.add_argument("--group", choices=["all", "known", "unknown", "unseen"], default="all")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default $OPSEVAL_JOBS or 1)")
    p.add_argument("--strict", action="store_true", help="plain IoU, no void/crowd conventions")
    p.add_argument("--per-category", action="store_true")
    p.add_argument("--out", help="write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("split", help="build a known/unknown or zero-shot dataset variant")
    p.add_argument("in_dir")
    p.add_argument("out_dir")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--ratio", type=int)
    g.add_argument("--zero-shot", action="store_true")
    p.add_argument("--classes", help="comma-separated unknown classes (custom, not the standard lists)")
    p.add_argument("--keep-open-set", action="store_true",
                   help="evaluation set: keep open-set segments and images, only mark statuses")
    p.add_argument("--ignore-crowd", action="store_true",
                   help="zero-shot: crowd segments of tail classes do not drop an image")
    p.add_argument("--jobs", type=int, default=None)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("label-proposals", help="label proposals as known/void/background")
    p.add_argument("proposals")
    p.add_argument("gt_dir")
    p.add_argument("out")
    p.add_argument("--registry")
    p.set_defaults(func=cmd_label_proposals)

    p = sub.add_parser("void-components", help="one proposal per connected void region")
    p.add_argument("gt_dir")
    p.add_argument("out")
    p.add_argument("--connectivity", type=int, choices=[4, 8], default=4)
    p.set_defaults(func=cmd_void_components)

    p = sub.add_parser("pseudo-filter", help="keep proposals with sigmoid(obj) >= delta")
    p.add_argument("proposals")
    p.add_argument("out")
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--dropped", help="also write the dropped proposals here")
    p.set_defaults(func=cmd_pseudo_filter)

    p = sub.add_parser("decide", help="apply an open-set decision rule to scored proposals")
    p.add_argument("proposals")
    p.add_argument("out")
    p.add_argument("--strategy", choices=STRATEGIES, default="dual")
    p.add_argument("--tau-known", type=float, default=0.5)
    p.add_argument("--tau-obj", type=float, default=0.5)
    p.add_argument("--aux-index", type=int)
    p.add_argument("--registry", help="categories; thing logits follow its known thing order")
    p.add_argument("--gt-dir", help="dataset supplying image sizes (and registry)")
    p.add_argument("--panoptic-out", help="write verdicts as a panoptic dataset (box masks)")
    p.add_argument("--stuff-from-gt", action="store_true", help="fill unclaimed pixels with GT stuff")
    p.add_argument("--unknown-nms", type=float, help="mask IoU threshold among unknown verdicts")
    p.set_defaults(func=cmd_decide)

    p = sub.add_parser("loss-check", help="finite-difference check of the four losses")
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--things", type=int, default=1, help="thing classes for --zero")
    p.add_argument("--delta", type=float, default=0.9)
    p.add_argument("--zero", action="store_true", help="print losses at all-zero weights")
    p.set_defaults(func=cmd_losscheck)

    p = sub.add_parser("consistency-check", help="PQ=SQ*RQ and RQ=F1(R,P) on reported rows")
    p.add_argument("rows", help="CSV with label,pq,sq,rq,recall,precision")
    p.add_argument("--pq-tol", type=float, default=0.15)
    p.add_argument("--rq-tol", type=float, default=0.20)
    p.set_defaults(func=cmd_consistency)

    p = sub.add_parser("synth", help="write a seeded synthetic dataset")
    p.add_argument("out_dir")
    p.add_argument("--images", type=int, default=10)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--max-things", type=int, default=6)
    p.add_argument("--void-boxes", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "jobs", 0) is None:
        args.jobs = default_jobs()
    try:
        return args.func(args)
    except (aio.DatasetError, ValueError, KeyError, OSError) as e:
        print(f"opseval {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
