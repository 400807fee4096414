"""COCO-style prediction and annotation JSON ingestion.

Predictions: a JSON array of {image_id, category_id, bbox [x, y, w, h],
score}. Annotations: a JSON object with an "annotations" array of
{image_id, category_id, bbox} and a "categories" array of {id, ...}. Only
the fields the toolkit reads are parsed; everything else is ignored, so
real detector dumps score directly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

from .geometry import Box, Detection, GroundTruth


class ParseError(ValueError):
    """Malformed input file; message carries entry/field diagnostics."""


def _bbox(raw, where: str) -> Box:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise ParseError(f"{where}: bbox must be a [x, y, w, h] array, got {raw!r}")
    try:
        return Box(float(raw[0]), float(raw[1]), float(raw[2]), float(raw[3]))
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{where}: {exc}") from exc


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise ParseError(f"{where}: missing field {key!r}")
    return obj[key]


@dataclass(frozen=True)
class AnnotationFile:
    ground_truths: list[GroundTruth]
    category_ids: frozenset[int]


def load_annotations(path: str) -> AnnotationFile:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(obj, dict):
        raise ParseError(f"{path}: expected a JSON object at top level")
    categories = obj.get("categories", [])
    cat_ids = set()
    for i, cat in enumerate(categories):
        where = f"{path}: categories[{i}]"
        cat_ids.add(int(_require(cat, "id", where)))
    gts = []
    for i, ann in enumerate(_require(obj, "annotations", path)):
        where = f"{path}: annotations[{i}]"
        gts.append(
            GroundTruth(
                image_id=_require(ann, "image_id", where),
                category=int(_require(ann, "category_id", where)),
                box=_bbox(_require(ann, "bbox", where), where),
            )
        )
    if not cat_ids:
        cat_ids = {gt.category for gt in gts}
    for i, gt in enumerate(gts):
        if gt.category not in cat_ids:
            raise ParseError(
                f"{path}: annotations[{i}]: category_id {gt.category} not in categories"
            )
    return AnnotationFile(ground_truths=gts, category_ids=frozenset(cat_ids))


def load_predictions(path: str, category_ids: frozenset[int]) -> list[Detection]:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(obj, list):
        raise ParseError(f"{path}: expected a JSON array of predictions")
    dets = []
    for i, pred in enumerate(obj):
        where = f"{path}: predictions[{i}]"
        category = int(_require(pred, "category_id", where))
        if category not in category_ids:
            raise ParseError(f"{where}: category_id {category} not in annotation categories")
        score = float(_require(pred, "score", where))
        if not 0.0 <= score <= 1.0:
            raise ParseError(f"{where}: score must lie in [0, 1], got {score}")
        dets.append(
            Detection(
                image_id=_require(pred, "image_id", where),
                category=category,
                box=_bbox(_require(pred, "bbox", where), where),
                score=score,
            )
        )
    return dets


def dump_predictions(dets: Sequence[Detection]) -> str:
    rows = [
        {
            "image_id": d.image_id,
            "category_id": d.category,
            "bbox": [d.box.x, d.box.y, d.box.w, d.box.h],
            "score": d.score,
        }
        for d in dets
    ]
    return json.dumps(rows, indent=2) + "\n"
