"""COCO-style detection evaluation and table reports.

AP uses 101-point interpolated precision. Classes (or size buckets) without
ground truth are undefined (NaN) and left out of class means.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .boxes import CATEGORY_IDS, CLASSES, Detection, iou_matrix

IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
DEFAULT_SIZE_BOUNDS = (32.0 ** 2, 96.0 ** 2)
METRICS = ("mAP", "mAP50", "mAP75", "AP_small", "AP_medium", "AP_large")


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    envelope: np.ndarray


def pr_curve(tp: np.ndarray, n_gt: int) -> PRCurve:
    """``tp`` flags score-sorted detections (1 true positive, 0 false)."""
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).tiny)
    envelope = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    return PRCurve(recall, precision, envelope)


def interpolated_ap(curve: PRCurve) -> float:
    if not len(curve.recall):
        return 0.0
    idx = np.searchsorted(curve.recall, RECALL_POINTS, side="left")
    vals = np.where(idx < len(curve.envelope), curve.envelope[np.minimum(idx, len(curve.envelope) - 1)], 0.0)
    return float(vals.mean())


def _match_image(det_boxes, det_scores, gt_boxes, gt_ignore, thr):
    """COCO matching for one image/class. Returns (det_matched, det_ignored)
    for detections already sorted by descending score."""
    n_d = len(det_boxes)
    matched = np.zeros(n_d, dtype=bool)
    ignored = np.zeros(n_d, dtype=bool)
    if n_d == 0 or len(gt_boxes) == 0:
        return matched, ignored
    ious = iou_matrix(det_boxes, gt_boxes)
    # Non-ignored ground truths take precedence, as in the reference protocol.
    gt_order = np.argsort(gt_ignore, kind="stable")
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for d in range(n_d):
        best, best_j = min(thr, 1 - 1e-10), -1
        for j in gt_order:
            if taken[j]:
                continue
            if best_j > -1 and not gt_ignore[best_j] and gt_ignore[j]:
                break
            if ious[d, j] < best:
                continue
            best, best_j = ious[d, j], j
        if best_j >= 0:
            taken[best_j] = True
            matched[d] = True
            ignored[d] = gt_ignore[best_j]
    return matched, ignored


def _class_ap(dets_by_image, gts_by_image, thr, area_rng):
    """Pooled AP over images for one class, IoU threshold and area range."""
    lo, hi = area_rng
    all_scores, all_tp, all_ign = [], [], []
    n_gt = 0
    for image_id in set(dets_by_image) | set(gts_by_image):
        gb = np.asarray(gts_by_image.get(image_id, np.zeros((0, 4))), dtype=np.float64).reshape(-1, 4)
        garea = (gb[:, 2] - gb[:, 0]) * (gb[:, 3] - gb[:, 1])
        gign = (garea < lo) | (garea >= hi)
        n_gt += int((~gign).sum())
        db, ds = dets_by_image.get(image_id, (np.zeros((0, 4)), np.zeros(0)))
        order = np.argsort(-ds, kind="mergesort")
        db, ds = db[order], ds[order]
        m, ign = _match_image(db, ds, gb, gign, thr)
        darea = (db[:, 2] - db[:, 0]) * (db[:, 3] - db[:, 1])
        ign = ign | (~m & ((darea < lo) | (darea >= hi)))
        all_scores.append(ds)
        all_tp.append(m)
        all_ign.append(ign)
    if n_gt == 0:
        return float("nan")
    scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
    tp = np.concatenate(all_tp) if all_tp else np.zeros(0, bool)
    ign = np.concatenate(all_ign) if all_ign else np.zeros(0, bool)
    order = np.argsort(-scores, kind="mergesort")
    tp, ign = tp[order], ign[order]
    return interpolated_ap(pr_curve(tp[~ign], n_gt))


def average_precision(dets: Sequence[Detection], gts: Sequence, iou_thr: float = 0.5) -> float:
    """Single-class, single-image AP; NaN when there is no ground truth."""
    db = np.array([d.box for d in dets], dtype=np.float64).reshape(-1, 4)
    ds = np.array([d.score for d in dets], dtype=np.float64)
    gb = np.array([g.xyxy if hasattr(g, "xyxy") else g for g in gts], dtype=np.float64).reshape(-1, 4)
    return _class_ap({0: (db, ds)}, {0: gb}, iou_thr, (0.0, math.inf))


@dataclass
class EvalResult:
    per_class: dict[str, dict[str, float]]
    mean: dict[str, float]
    counts: dict[str, dict[str, int]] = field(default_factory=dict)

    def to_json(self) -> dict:
        def clean(d):
            return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}
        return {"mean": clean(self.mean),
                "per_class": {c: clean(v) for c, v in self.per_class.items()},
                "counts": self.counts}

    def __getitem__(self, key: str) -> float:
        return self.mean[key]


def _nanmean(values):
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def evaluate(dets: Mapping[int, Sequence[Detection]] | Sequence[dict], manifest,
             size_bounds: tuple[float, float] = DEFAULT_SIZE_BOUNDS) -> EvalResult:
    """Evaluate full-image detections (dict per image id, or detection JSON
    records) against a manifest."""
    if not isinstance(dets, Mapping):
        from .slicing import detections_from_json
        dets = detections_from_json(dets)
    known = {im.id for im in manifest.images}
    for image_id, ds in dets.items():
        if image_id not in known:
            raise ValueError(f"detections reference unknown image {image_id}")
        for d in ds:
            if d.label not in CATEGORY_IDS:
                raise ValueError(f"detection on image {image_id}: unknown category {d.label!r}")

    a_s, a_l = size_bounds
    ranges = {"all": (0.0, math.inf), "small": (0.0, a_s), "medium": (a_s, a_l), "large": (a_l, math.inf)}
    per_class, counts = {}, {}
    for cls in CLASSES:
        gts_by_image: dict[int, list] = {}
        for a in manifest.annotations:
            if a.label == cls:
                gts_by_image.setdefault(a.image_id, []).append(tuple(a.xyxy))
        dets_by_image = {}
        n_det = 0
        for image_id, ds in dets.items():
            mine = [d for d in ds if d.label == cls]
            if mine:
                dets_by_image[image_id] = (np.array([d.box for d in mine], dtype=np.float64),
                                           np.array([d.score for d in mine], dtype=np.float64))
                n_det += len(mine)
        aps = [_class_ap(dets_by_image, gts_by_image, t, ranges["all"]) for t in IOU_THRESHOLDS]
        per_class[cls] = {
            "mAP": _nanmean(aps) if not all(math.isnan(a) for a in aps) else float("nan"),
            "mAP50": aps[0],
            "mAP75": aps[5],
            **{f"AP_{name}": _nanmean([_class_ap(dets_by_image, gts_by_image, t, ranges[name])
                                       for t in IOU_THRESHOLDS])
               for name in ("small", "medium", "large")},
        }
        areas = [(b[2] - b[0]) * (b[3] - b[1]) for bs in gts_by_image.values() for b in bs]
        counts[cls] = {"gt": len(areas), "detections": n_det,
                       "gt_small": sum(a < a_s for a in areas),
                       "gt_medium": sum(a_s <= a < a_l for a in areas),
                       "gt_large": sum(a >= a_l for a in areas)}
    mean = {m: _nanmean([per_class[c][m] for c in CLASSES]) for m in METRICS}
    return EvalResult(per_class, mean, counts)


# reports ---------------------------------------------------------------

TABLE_COLUMNS = {
    "table1": ("Model", ("mAP", "mAP50", "mAP75")),
    "table2": ("phi", ("mAP", "mAP50", "mAP75", "AP_small", "AP_medium", "AP_large")),
    "table3": ("Model", ("mAP", "mAP50", "mAP75")),
}
COLUMN_TITLES = {"mAP": "mAP", "mAP50": "mAP50", "mAP75": "mAP75",
                 "AP_small": "mAPs", "AP_medium": "APm", "AP_large": "mAPL"}
_ROW_WIDTH = 14
_COL_WIDTH = 8


def _fmt(v: float) -> str:
    return "-" if v is None or math.isnan(v) else f"{100.0 * v:.1f}"


def report_rows(rows: Sequence[tuple[str, EvalResult]], format: str = "table2") -> str:
    if format not in TABLE_COLUMNS:
        raise ValueError(f"unknown report format {format!r}")
    first, cols = TABLE_COLUMNS[format]
    header = f"{first:<{_ROW_WIDTH}}" + "".join(f"{COLUMN_TITLES[c]:>{_COL_WIDTH}}" for c in cols)
    lines = [header, "-" * len(header)]
    for name, result in rows:
        lines.append(f"{name:<{_ROW_WIDTH}}" + "".join(f"{_fmt(result.mean[c]):>{_COL_WIDTH}}" for c in cols))
    return "\n".join(lines) + "\n"


def report(result: EvalResult, format: str = "table2", name: str = "run") -> str:
    return report_rows([(name, result)], format)


def parse_report(text: str) -> list[tuple[str, dict[str, float]]]:
    """Inverse of :func:`report_rows` (values back as fractions)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    titles = lines[0].split()[1:]
    inverse = {v: k for k, v in COLUMN_TITLES.items()}
    rows = []
    for ln in lines[2:]:
        name, cells = ln[:_ROW_WIDTH].strip(), ln[_ROW_WIDTH:].split()
        rows.append((name, {inverse[t]: (float("nan") if c == "-" else float(c) / 100.0)
                            for t, c in zip(titles, cells)}))
    return rows


def save_result(result: EvalResult, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(result.to_json(), fh, indent=1, sort_keys=True)
