"""Detector handles: full-frame, native-resolution and sliced inference."""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch
from PIL import Image

from .boxes import Box, Detection
from .model.detector import SYOLO, ModelConfig, decode_predictions, to_tensor
from .model.train import load_checkpoint
from .slicing import DEFAULT_MERGE_IOU, DEFAULT_OVERLAP, make_grid, sliced_infer

STRIDE_MULTIPLE = 32


class CheckpointMismatchError(ValueError):
    pass


def resize(image: np.ndarray, width: int, height: int) -> np.ndarray:
    if image.shape[1] == width and image.shape[0] == height:
        return image
    return np.asarray(Image.fromarray(image).resize((width, height), Image.BILINEAR))


def _pad(image: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    ph = -h % STRIDE_MULTIPLE
    pw = -w % STRIDE_MULTIPLE
    if ph == 0 and pw == 0:
        return image
    return np.pad(image, ((0, ph), (0, pw), (0, 0)))


def _scale_detections(dets, sx: float, sy: float) -> list[Detection]:
    out = []
    for d in dets:
        b = d.box
        out.append(Detection(Box(b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy),
                             d.label, d.score, d.class_probs))
    return out


class DetectorHandle:
    """Wraps a trained model with its decode settings.

    ``full`` resizes the image to the model's input size and maps boxes
    back; ``native`` runs at the image's own resolution (zero-padded on the
    bottom/right to a multiple of 32); ``sliced`` tiles the image with
    ``tile`` (default: the model input size) and runs ``native`` per tile.
    """

    def __init__(self, model: SYOLO, tile: Optional[int] = None, overlap: float = DEFAULT_OVERLAP,
                 tau_merge: float = DEFAULT_MERGE_IOU, include_full_frame: bool = False):
        self.model = model.eval()
        self.config: ModelConfig = model.config
        self.tile = tile or self.config.input_size
        self.overlap = overlap
        self.tau_merge = tau_merge
        self.include_full_frame = include_full_frame

    @classmethod
    def from_checkpoint(cls, path: str, expected: Optional[ModelConfig] = None, **kw) -> "DetectorHandle":
        state = load_checkpoint(path)
        config = ModelConfig.from_dict(state["config"])
        if expected is not None and expected != config:
            raise CheckpointMismatchError(f"{path}: checkpoint config {config} does not match {expected}")
        model = SYOLO(config)
        try:
            model.load_state_dict(state["model"])
        except RuntimeError as exc:
            raise CheckpointMismatchError(f"{path}: weights do not fit the stored config: {exc}") from exc
        return cls(model, **kw)

    def _run(self, image: np.ndarray, conf_thresh: float) -> list[Detection]:
        h, w = image.shape[:2]
        with torch.no_grad():
            head = self.model(to_tensor(_pad(image)))
        dets = decode_predictions(head, conf_thresh, self.config.nms_iou, self.config.pre_nms_topk)[0]
        return [Detection(d.box.clip(w, h), d.label, d.score, d.class_probs) for d in dets
                if not d.box.clip(w, h).degenerate]

    def native(self, image: np.ndarray, conf_thresh: float = 0.05) -> list[Detection]:
        return self._run(image, conf_thresh)

    def full(self, image: np.ndarray, conf_thresh: float = 0.05) -> list[Detection]:
        h, w = image.shape[:2]
        s = self.config.input_size
        dets = self._run(resize(image, s, s), conf_thresh)
        return _scale_detections(dets, w / s, h / s)

    def sliced(self, image: np.ndarray, conf_thresh: float = 0.05) -> list[Detection]:
        h, w = image.shape[:2]
        grid = make_grid(w, h, self.tile, self.overlap)
        return sliced_infer(self.native, image, grid, conf_thresh, self.tau_merge,
                            include_full_frame=self.include_full_frame, full_frame=self.full)

    def detect(self, image: np.ndarray, use_slicing: bool = False, conf_thresh: float = 0.05) -> list[Detection]:
        return (self.sliced if use_slicing else self.full)(image, conf_thresh)
