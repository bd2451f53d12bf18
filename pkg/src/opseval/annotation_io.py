"""Reader/writer for COCO-panoptic style datasets.

A dataset is a JSON metadata document plus one lossless RGB PNG per image in
which each pixel encodes ``id = R + 256*G + 65536*B``.  Directory layout used
by the CLI::

    <dataset>/panoptic.json
    <dataset>/panoptic/<image_id>.png
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Iterable

import jsonschema
import numpy as np
from PIL import Image

from .core import (
    STUFF,
    THING,
    Category,
    CategoryRegistry,
    PanopticAnnotation,
    SegmentInfo,
    SegmentMap,
    validate_annotation,
)

META_NAME = "panoptic.json"
MAPS_NAME = "panoptic"


class DatasetError(Exception):
    pass


class MalformedMeta(DatasetError):
    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path


class MissingMap(DatasetError):
    def __init__(self, file_name: str):
        super().__init__(f"missing map image {file_name}")
        self.file_name = file_name


class DecodeError(DatasetError):
    pass


class ValidationError(DatasetError):
    def __init__(self, image_id, violations: list[str]):
        shown = violations[:10]
        more = f" (+{len(violations) - 10} more)" if len(violations) > 10 else ""
        super().__init__(f"image {image_id}: " + "; ".join(shown) + more)
        self.image_id = image_id
        self.violations = violations


class IoError(DatasetError, OSError):
    pass


_SEGMENT_SCHEMA = {
    "type": "object",
    "required": ["id", "category_id", "area", "bbox"],
    "properties": {
        "id": {"type": "integer", "minimum": 1, "maximum": 2**24 - 1},
        "category_id": {"type": "integer"},
        "area": {"type": "integer", "minimum": 0},
        "bbox": {"type": "array", "items": {"type": "integer"}, "minItems": 4, "maxItems": 4},
        "iscrowd": {"type": "integer", "enum": [0, 1]},
    },
}

META_SCHEMA = {
    "type": "object",
    "required": ["categories", "annotations"],
    "properties": {
        "categories": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "name"],
                "properties": {
                    "id": {"type": "integer"},
                    "name": {"type": "string"},
                    "isthing": {"type": "integer", "enum": [0, 1]},
                    "status": {"enum": ["known", "unknown", "unseen"]},
                    "reserved": {"enum": ["unknown", "unseen"]},
                },
            },
        },
        "annotations": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["image_id", "file_name", "segments_info"],
                "properties": {
                    "image_id": {"type": ["integer", "string"]},
                    "file_name": {"type": "string"},
                    "segments_info": {"type": "array", "items": _SEGMENT_SCHEMA},
                },
            },
        },
    },
}


def rgb2id(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8:
        raise DecodeError(f"expected 8-bit channels, got {rgb.dtype}")
    r, g, b = (rgb[..., k].astype(np.uint32) for k in range(3))
    return r | (g << 8) | (b << 16)


def id2rgb(ids: np.ndarray) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.uint32)
    out = np.empty(ids.shape + (3,), dtype=np.uint8)
    out[..., 0] = ids & 0xFF
    out[..., 1] = (ids >> 8) & 0xFF
    out[..., 2] = (ids >> 16) & 0xFF
    return out


def _json_path(error: jsonschema.ValidationError) -> str:
    return "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in error.absolute_path)


def registry_from_meta(categories: list[dict[str, Any]]) -> CategoryRegistry:
    entries = []
    reserved = {}
    for c in categories:
        if "reserved" in c:
            reserved[c["reserved"]] = c["id"]
            continue
        kind = THING if c.get("isthing", 1) else STUFF
        entries.append(Category(c["id"], c["name"], kind, c.get("status", "known")))
    kwargs = {}
    if "unknown" in reserved:
        kwargs["unknown_id"] = reserved["unknown"]
    if "unseen" in reserved:
        kwargs["unseen_id"] = reserved["unseen"]
    try:
        return CategoryRegistry(tuple(entries), **kwargs)
    except ValueError as e:
        raise MalformedMeta(str(e), "$.categories") from None


def registry_to_meta(registry: CategoryRegistry) -> list[dict[str, Any]]:
    out = [
        {"id": c.id, "name": c.name, "isthing": int(c.isthing), "status": c.status}
        for c in registry.entries
    ]
    out.append({"id": registry.unknown_id, "name": "unknown", "isthing": 1, "reserved": "unknown"})
    out.append({"id": registry.unseen_id, "name": "unseen", "isthing": 1, "reserved": "unseen"})
    return out


def load_meta(meta_path: str | os.PathLike) -> dict[str, Any]:
    try:
        with open(meta_path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise MalformedMeta("metadata file not found", str(meta_path)) from None
    except json.JSONDecodeError as e:
        raise MalformedMeta(f"invalid JSON: {e}") from None
    err = jsonschema.exceptions.best_match(jsonschema.Draft7Validator(META_SCHEMA).iter_errors(doc))
    if err is not None:
        raise MalformedMeta(err.message, _json_path(err))
    return doc


def parse_meta(doc: dict[str, Any]) -> CategoryRegistry:
    registry = registry_from_meta(doc["categories"])
    for i, ann in enumerate(doc["annotations"]):
        for j, s in enumerate(ann["segments_info"]):
            if s["category_id"] not in registry:
                raise MalformedMeta(
                    f"category {s['category_id']} not declared",
                    f"$.annotations[{i}].segments_info[{j}].category_id",
                )
    return registry


def read_map(path: str | os.PathLike) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode != "RGB":
                raise DecodeError(f"{path}: expected 8-bit RGB image, got mode {img.mode}")
            # (R, G, B, X) bytes read as little-endian uint32, padding byte masked off
            raw = img.convert("RGBX").tobytes()
            size = img.size
    except FileNotFoundError:
        raise MissingMap(os.path.basename(str(path))) from None
    except DecodeError:
        raise
    except OSError as e:
        raise DecodeError(f"{path}: {e}") from None
    return (np.frombuffer(raw, dtype="<u4") & 0xFFFFFF).astype(np.uint32).reshape(size[1], size[0])


def annotation_from_record(record: dict[str, Any], maps_dir: str | os.PathLike, validate=True):
    ids = read_map(Path(maps_dir) / record["file_name"])
    segments = tuple(
        SegmentInfo(
            s["id"], s["category_id"], s["area"], tuple(s["bbox"]), bool(s.get("iscrowd", 0))
        )
        for s in record["segments_info"]
    )
    ann = PanopticAnnotation(record["image_id"], SegmentMap(ids), segments)
    if validate:
        violations = validate_annotation(ann)
        if violations:
            raise ValidationError(ann.image_id, violations)
    return ann


def read_dataset(meta_path, maps_dir, jobs: int = 1):
    """Load ``(registry, annotations)``; annotations keep metadata order."""
    doc = load_meta(meta_path)
    registry = parse_meta(doc)
    records = doc["annotations"]
    if jobs > 1 and len(records) > 1:
        with ThreadPoolExecutor(jobs) as pool:
            anns = list(pool.map(lambda r: annotation_from_record(r, maps_dir), records))
    else:
        anns = [annotation_from_record(r, maps_dir) for r in records]
    return registry, anns


def read_dataset_dir(path, jobs: int = 1):
    path = Path(path)
    return read_dataset(path / META_NAME, path / MAPS_NAME, jobs=jobs)


def map_file_name(image_id) -> str:
    return f"{image_id}.png"


def annotation_record(ann: PanopticAnnotation) -> dict[str, Any]:
    return {
        "image_id": ann.image_id,
        "file_name": map_file_name(ann.image_id),
        "segments_info": [
            {
                "id": s.id,
                "category_id": s.category,
                "area": s.area,
                "bbox": list(s.bbox),
                "iscrowd": int(s.crowd),
            }
            for s in ann.segments
        ],
    }


def write_map(ids: np.ndarray, path: str | os.PathLike) -> None:
    Image.fromarray(id2rgb(ids), "RGB").save(path, format="PNG", compress_level=1)


def write_dataset(
    registry: CategoryRegistry,
    anns: Iterable[PanopticAnnotation],
    out_dir,
    extra: dict[str, Any] | None = None,
) -> None:
    """Write ``out_dir/panoptic.json`` and one map PNG per annotation."""
    out_dir = Path(out_dir)
    anns = list(anns)
    doc = {"categories": registry_to_meta(registry), "annotations": [annotation_record(a) for a in anns]}
    if extra:
        doc.update(extra)
    try:
        maps_dir = out_dir / MAPS_NAME
        maps_dir.mkdir(parents=True, exist_ok=True)
        for a in anns:
            write_map(a.map.ids, maps_dir / map_file_name(a.image_id))
        with open(out_dir / META_NAME, "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise IoError(str(e)) from e
