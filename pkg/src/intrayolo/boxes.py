"""Box primitives shared by slicing, distillation and evaluation.

Boxes are corner form ``(x_min, y_min, x_max, y_max)`` in pixels. COCO
``[x, y, w, h]`` only appears at file boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

CLASSES = ("caries", "mih")
CATEGORY_IDS = {"caries": 1, "mih": 2}
CATEGORY_NAMES = {v: k for k, v in CATEGORY_IDS.items()}


class Box(NamedTuple):
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    @property
    def degenerate(self) -> bool:
        return self.width <= 0 or self.height <= 0

    def shift(self, dx: float, dy: float) -> "Box":
        return Box(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def clip(self, width: float, height: float, x0: float = 0.0, y0: float = 0.0) -> "Box":
        return Box(
            min(max(self.x_min, x0), width),
            min(max(self.y_min, y0), height),
            min(max(self.x_max, x0), width),
            min(max(self.y_max, y0), height),
        )

    def to_xywh(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max - self.x_min, self.y_max - self.y_min]

    @classmethod
    def from_xywh(cls, xywh: Sequence[float]) -> "Box":
        x, y, w, h = (float(v) for v in xywh)
        return cls(x, y, x + w, y + h)


@dataclass(frozen=True)
class Detection:
    """A scored, labelled box in full-image pixel coordinates.

    ``class_probs`` is the softmax over class logits when the detection came
    from a model decode; it feeds the student-uncertainty feature.
    """

    box: Box
    label: str
    score: float
    class_probs: Optional[tuple[float, ...]] = field(default=None, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")
        if self.label not in CATEGORY_IDS:
            raise ValueError(f"unknown label {self.label!r}")


def iou(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` corner-form arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms_indices(boxes: np.ndarray, scores: np.ndarray, tau: float,
                labels: Optional[np.ndarray] = None) -> np.ndarray:
    """Greedy NMS on arrays; returns kept indices in keep order.

    Sort key is (score desc, area asc, input order). A candidate survives iff
    its IoU with every kept box of the same class (all boxes when ``labels``
    is None) is strictly below ``tau``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    areas = np.clip(boxes[:, 2] - boxes[:, 0], 0, None) * np.clip(boxes[:, 3] - boxes[:, 1], 0, None)
    order = np.lexsort((np.arange(n), areas, -scores))
    if labels is None:
        labels = np.zeros(n, dtype=np.int64)
    labels = np.asarray(labels)

    keep = []
    suppressed = np.zeros(n, dtype=bool)
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        rest = order[pos + 1:]
        rest = rest[~suppressed[rest] & (labels[rest] == labels[i])]
        if len(rest):
            ov = iou_matrix(boxes[i:i + 1], boxes[rest])[0]
            suppressed[rest[ov >= tau]] = True
    return np.asarray(keep, dtype=np.int64)


def detections_to_arrays(dets: Sequence[Detection]):
    boxes = np.array([d.box for d in dets], dtype=np.float64).reshape(-1, 4)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    labels = np.array([CATEGORY_IDS[d.label] for d in dets], dtype=np.int64)
    return boxes, scores, labels


def nms(dets: Sequence[Detection], tau: float, class_aware: bool = True) -> list[Detection]:
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"NMS threshold {tau} outside [0, 1]")
    dets = list(dets)
    if not dets:
        return []
    boxes, scores, labels = detections_to_arrays(dets)
    keep = nms_indices(boxes, scores, tau, labels if class_aware else None)
    return [dets[i] for i in keep]


def greedy_match(preds: Sequence[Detection], gts, tau: float) -> list[Optional[int]]:
    """Match predictions to same-class ground truths.

    Predictions are visited by descending score (stable for ties); each one
    claims the highest-IoU still-unmatched ground truth of its class whose
    IoU is at least ``tau``. Returns, per prediction in input order, the
    matched ground-truth index or None.

    ``gts`` may hold :class:`~intrayolo.dataset.Annotation` objects or
    ``(Box, label)`` pairs.
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"match threshold {tau} outside (0, 1]")
    gt_boxes, gt_labels = _gt_arrays(gts)
    result: list[Optional[int]] = [None] * len(preds)
    if not len(preds) or not len(gt_boxes):
        return result
    pb, ps, pl = detections_to_arrays(preds)
    ious = iou_matrix(pb, gt_boxes)
    ious[pl[:, None] != gt_labels[None, :]] = -1.0
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for i in np.argsort(-ps, kind="stable"):
        row = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(row))
        if row[j] >= tau:
            taken[j] = True
            result[i] = j
    return result


def _gt_arrays(gts):
    boxes, labels = [], []
    for g in gts:
        if hasattr(g, "xyxy"):
            boxes.append(g.xyxy)
            labels.append(CATEGORY_IDS[g.label])
        else:
            box, label = g
            boxes.append(box)
            labels.append(CATEGORY_IDS[label])
    return np.array(boxes, dtype=np.float64).reshape(-1, 4), np.array(labels, dtype=np.int64)
