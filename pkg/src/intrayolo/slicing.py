"""Sliced inference: overlapping window grids, per-tile detection, remapping
and fusion back into full-image coordinates."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .boxes import CATEGORY_IDS, CATEGORY_NAMES, Box, Detection, nms

DEFAULT_OVERLAP = 0.2
DEFAULT_MERGE_IOU = 0.5


@dataclass(frozen=True)
class TileSpec:
    offset: tuple[int, int]
    size: tuple[int, int]


@dataclass(frozen=True)
class SliceGrid:
    image_size: tuple[int, int]
    tiles: tuple[TileSpec, ...]
    overlap: float


def _axis_offsets(extent: int, tile: int, stride: int) -> list[int]:
    if tile >= extent:
        return [0]
    offsets = []
    pos = 0
    while True:
        clamped = min(pos, extent - tile)
        if not offsets or clamped != offsets[-1]:
            offsets.append(clamped)
        if pos + tile >= extent:
            break
        pos += stride
    return offsets


def make_grid(width: int, height: int, tile: int, overlap: float = DEFAULT_OVERLAP) -> SliceGrid:
    if tile <= 0:
        raise ValueError("tile must be positive")
    if not 0.0 <= overlap < 1.0:
        raise ValueError("overlap must lie in [0, 1)")
    stride = max(int(np.floor(tile * (1.0 - overlap))), 1)
    xs = _axis_offsets(width, tile, stride)
    ys = _axis_offsets(height, tile, stride)
    tw, th = min(tile, width), min(tile, height)
    tiles = tuple(TileSpec((x, y), (tw, th)) for y in ys for x in xs)
    return SliceGrid((width, height), tiles, overlap)


def assign_annotations(grid: SliceGrid, anns: Sequence, min_visibility: float = 0.5) -> list[list]:
    """Per tile, the annotations whose visible fraction reaches
    ``min_visibility``, clipped and shifted into tile-local coordinates."""
    if not 0.0 < min_visibility <= 1.0:
        raise ValueError("min_visibility must lie in (0, 1]")
    out = []
    for t in grid.tiles:
        ox, oy = t.offset
        tw, th = t.size
        kept = []
        for a in anns:
            b = a.xyxy
            clipped = b.clip(ox + tw, oy + th, ox, oy)
            if clipped.area / b.area >= min_visibility:
                local = clipped.shift(-ox, -oy)
                kept.append(replace(a, box=tuple(local.to_xywh())))
        out.append(kept)
    return out


def remap(det: Detection, offset: tuple[float, float]) -> Detection:
    return replace(det, box=det.box.shift(offset[0], offset[1]))


def merge_detections(dets: Sequence[Detection], tau_merge: float = DEFAULT_MERGE_IOU) -> list[Detection]:
    return nms(dets, tau_merge, class_aware=True)


Detector = Callable[[np.ndarray, float], list[Detection]]


def sliced_infer(model: Detector, image: np.ndarray, grid: SliceGrid, conf_thresh: float = 0.05,
                 tau_merge: float = DEFAULT_MERGE_IOU, include_full_frame: bool = False,
                 full_frame: Detector | None = None) -> list[Detection]:
    """Run ``model`` on every tile of ``grid`` and fuse the remapped output.

    ``model(tile_pixels, conf_thresh)`` returns tile-local detections. The
    optional full-frame pass goes through ``full_frame`` (defaults to the
    model called on the whole image; callers resize as needed).
    """
    h, w = image.shape[:2]
    if (w, h) != tuple(grid.image_size):
        raise ValueError(f"grid built for {grid.image_size}, image is {(w, h)}")
    dets: list[Detection] = []
    for t in grid.tiles:
        ox, oy = t.offset
        tw, th = t.size
        for d in model(image[oy:oy + th, ox:ox + tw], conf_thresh):
            dets.append(remap(d, (ox, oy)))
    if include_full_frame:
        dets.extend((full_frame or model)(image, conf_thresh))
    return merge_detections(dets, tau_merge)


def detections_to_json(per_image: dict[int, Sequence[Detection]], extra_conf_alias: bool = False) -> list[dict]:
    out = []
    for image_id in sorted(per_image):
        for d in per_image[image_id]:
            rec = {"image_id": int(image_id), "category_id": CATEGORY_IDS[d.label],
                   "bbox": [float(v) for v in d.box.to_xywh()], "score": float(d.score)}
            if extra_conf_alias:
                rec["teacher_conf"] = rec["score"]
            out.append(rec)
    return out


def detections_from_json(records: Sequence[dict]) -> dict[int, list[Detection]]:
    out: dict[int, list[Detection]] = {}
    for r in records:
        cid = int(r["category_id"])
        if cid not in CATEGORY_NAMES:
            raise ValueError(f"detection for image {r.get('image_id')}: unknown category id {cid}")
        out.setdefault(int(r["image_id"]), []).append(
            Detection(Box.from_xywh(r["bbox"]), CATEGORY_NAMES[cid], float(r["score"])))
    return out


def save_detections(per_image, path: str, extra_conf_alias: bool = False) -> None:
    with open(path, "w") as fh:
        json.dump(detections_to_json(per_image, extra_conf_alias), fh)


def load_detections(path: str) -> dict[int, list[Detection]]:
    with open(path) as fh:
        return detections_from_json(json.load(fh))
