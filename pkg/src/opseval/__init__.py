"""Open-set panoptic segmentation tooling."""

from .annotation_io import read_dataset, read_dataset_dir, write_dataset
from .core import (
    Category,
    CategoryRegistry,
    PanopticAnnotation,
    SegmentInfo,
    SegmentMap,
    coco_registry,
    validate_annotation,
)
from .decision import DecisionConfig, Verdict, decide, decisions_to_panoptic
from .heads import Batch, HeadParams, cls_loss, objectiveness_loss, pseudo_obj_loss, void_suppression_loss
from .metrics import MatchStats, MetricReport, accumulate, consistency_check, match_image, report
from .proposals import Proposal, label_proposals, pseudo_filter, void_components
from .splits import SplitResult, SplitSpec, apply_split, make_split, make_zero_shot

__version__ = "0.1.0"
