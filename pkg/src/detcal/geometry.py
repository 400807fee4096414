"""Axis-aligned box geometry and detection/ground-truth matching.

Boxes follow the COCO corner-plus-size convention (x, y, w, h). Matching
realizes the per-detection correctness bit used by the detection calibration
metrics: per image, detections are walked in descending score order and each
one greedily takes the unmatched ground truth with the highest IoU; the bit is
1 only when that IoU clears the threshold and the classes agree.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Hashable, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .tensors import Tensor


@dataclass(frozen=True)
class Box:
    """(x, y) top-left corner plus non-negative width/height, pixel units."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"box coordinates must be finite, got {vals}")
        if self.w < 0 or self.h < 0:
            raise ValueError(f"box extents must be non-negative, got w={self.w} h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class Detection:
    image_id: Hashable
    category: int
    box: Box
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True)
class GroundTruth:
    image_id: Hashable
    category: int
    box: Box


@dataclass(frozen=True)
class MatchedDetection:
    """A detection joined to its match outcome under an IoU threshold."""

    detection: Detection
    f: int
    matched_gt: Optional[GroundTruth] = None
    iou: float = 0.0

    def __post_init__(self):
        if self.f not in (0, 1):
            raise ValueError(f"f must be 0 or 1, got {self.f}")


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0.0 when the union has zero area."""
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def _match_one_image(
    dets: list[tuple[int, Detection]],
    gts: list[GroundTruth],
    k: float,
) -> list[tuple[int, MatchedDetection]]:
    # Score-descending, input order breaking ties; each detection records the
    # unconsumed ground truth with the highest positive IoU (lowest index on
    # ties). Only a true positive (IoU >= k and class agreement) consumes its
    # ground truth, so near-misses leave it available for later detections.
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1].score, i))
    taken = [False] * len(gts)
    out: list[tuple[int, MatchedDetection]] = []
    for i in order:
        orig_idx, det = dets[i]
        best_j = -1
        best_iou = 0.0
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            v = iou(det.box, gt.box)
            if v > best_iou:
                best_iou = v
                best_j = j
        if best_j >= 0:
            gt = gts[best_j]
            f = 1 if (best_iou >= k and det.category == gt.category) else 0
            if f:
                taken[best_j] = True
            out.append((orig_idx, MatchedDetection(det, f, gt, best_iou)))
        else:
            out.append((orig_idx, MatchedDetection(det, 0, None, 0.0)))
    return out


def worker_count(n_tasks: int) -> int:
    """Worker cap from DETCAL_THREADS (0 or unset = auto), bounded by tasks."""
    raw = os.environ.get("DETCAL_THREADS", "0")
    try:
        cap = int(raw)
    except ValueError:
        cap = 0
    if cap <= 0:
        cap = os.cpu_count() or 1
    return max(1, min(cap, n_tasks))


def match_detections(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    k: float,
) -> list[MatchedDetection]:
    """Match detections to ground truths per image; output order = input order.

    Per image, detections are processed in descending score order (ties broken
    by input index); each is paired with the unconsumed ground truth of
    highest IoU. f=1 iff that IoU >= k and the categories agree, and only then
    is the ground truth consumed (the COCO-evaluator convention, so duplicate
    detections of one object come out as f=0). Images are independent and may
    be matched in parallel; results are order-stable.
    """
    if not 0.0 < k <= 1.0:
        raise ValueError(f"IoU threshold k must lie in (0, 1], got {k}")

    by_image_dets: dict[Hashable, list[tuple[int, Detection]]] = {}
    for idx, det in enumerate(dets):
        by_image_dets.setdefault(det.image_id, []).append((idx, det))
    by_image_gts: dict[Hashable, list[GroundTruth]] = {}
    for gt in gts:
        by_image_gts.setdefault(gt.image_id, []).append(gt)

    images = list(by_image_dets.keys())
    results: list[Optional[MatchedDetection]] = [None] * len(dets)

    def run(img: Hashable) -> list[tuple[int, MatchedDetection]]:
        return _match_one_image(by_image_dets[img], by_image_gts.get(img, []), k)

    workers = worker_count(len(images))
    if workers > 1 and len(images) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(run, images))
    else:
        chunks = [run(img) for img in images]
    for chunk in chunks:
        for idx, md in chunk:
            results[idx] = md
    return [r for r in results if r is not None]


def hungarian_assign(cost: Tensor) -> list[tuple[int, int]]:
    """Minimum-cost assignment of min(n, m) row/col pairs of an n x m cost."""
    arr = cost.array
    if arr.ndim != 2:
        raise ValueError(f"cost must be a 2-D tensor, got shape {cost.shape}")
    rows, cols = linear_sum_assignment(arr)
    return sorted(zip(rows.tolist(), cols.tolist()))
