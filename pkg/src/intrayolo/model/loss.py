"""Anchor-free detection loss with fixed-radius centre assignment."""

from __future__ import annotations

from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..boxes import CATEGORY_IDS, Box
from .detector import HeadOutput, ModelConfig, decode_boxes


class Target(NamedTuple):
    box: Box
    label: str
    weight: float = 1.0


def _as_targets(items, weights) -> list[Target]:
    out = []
    for k, t in enumerate(items):
        if isinstance(t, Target):
            box, label, w = t
        else:
            box, label, w = (t.xyxy if hasattr(t, "xyxy") else t.box), t.label, 1.0
        if weights is not None:
            w = weights[k]
        if box.x_max <= box.x_min or box.y_max <= box.y_min:
            raise ValueError(f"target with non-positive area: {tuple(box)}")
        out.append(Target(Box(*box), label, float(w)))
    return out


def level_for(size: float, config: ModelConfig) -> int:
    """Index into ``config.strides`` for a target of side ``sqrt(area)``."""
    bounds = config.size_ranges if config.use_p2 else config.size_ranges[1:]
    return int(np.searchsorted(bounds, size, side="right"))


def assign(targets: Sequence[Target], grid: torch.Tensor, config: ModelConfig):
    """Return (positive cell indices, their target indices).

    A cell is positive for a target when it lies on the target's pyramid
    level and its centre is within ``center_radius`` strides of the target
    centre along both axes. Cells claimed twice go to the smaller target.
    """
    if not targets:
        empty = torch.zeros(0, dtype=torch.long)
        return empty, empty
    g = grid.double()
    ccx = (g[:, 0] + 0.5) * g[:, 2]
    ccy = (g[:, 1] + 0.5) * g[:, 2]
    boxes = torch.tensor([t.box for t in targets], dtype=torch.float64)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    tcx = (boxes[:, 0] + boxes[:, 2]) / 2
    tcy = (boxes[:, 1] + boxes[:, 3]) / 2
    strides = torch.tensor([config.strides[level_for(float(a.sqrt()), config)] for a in areas],
                           dtype=torch.float64)
    r = config.center_radius * strides[:, None]
    mask = ((g[None, :, 2] == strides[:, None])
            & ((ccx[None] - tcx[:, None]).abs() <= r)
            & ((ccy[None] - tcy[:, None]).abs() <= r))
    cost = torch.where(mask, areas[:, None], torch.full_like(mask, float("inf"), dtype=torch.float64))
    best_cost, best_t = cost.min(dim=0)
    cells = torch.nonzero(torch.isfinite(best_cost)).flatten()
    return cells, best_t[cells]


def aligned_iou(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    iw = (torch.minimum(a[:, 2], b[:, 2]) - torch.maximum(a[:, 0], b[:, 0])).clamp(min=0)
    ih = (torch.minimum(a[:, 3], b[:, 3]) - torch.maximum(a[:, 1], b[:, 1])).clamp(min=0)
    inter = iw * ih
    union = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1]) + (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1]) - inter
    return inter / (union + eps)


def detection_loss(head: HeadOutput, targets: Sequence[Sequence], config: ModelConfig,
                   weights: Optional[Sequence[Optional[Sequence[float]]]] = None) -> dict[str, torch.Tensor]:
    """Loss components summed over positives / cells and divided by batch size.

    ``targets[b]`` lists the boxes of image ``b`` in input pixels
    (annotations, pseudo-labels or :class:`Target`). Per-target weights
    scale the IoU and class terms and the positive objectness terms.
    """
    cls, obj, reg, grid = head.flat()
    bsz = cls.shape[0]
    if len(targets) != bsz:
        raise ValueError(f"{len(targets)} target lists for a batch of {bsz}")
    num_classes = cls.shape[-1]
    iou_loss = cls.new_zeros(())
    cls_loss = cls.new_zeros(())
    obj_loss = cls.new_zeros(())
    for b in range(bsz):
        tg = _as_targets(targets[b], None if weights is None else weights[b])
        cells, tidx = assign(tg, grid, config)
        obj_target = torch.zeros_like(obj[b])
        obj_weight = torch.ones_like(obj[b])
        if len(cells):
            tboxes = torch.tensor([tg[i].box for i in tidx.tolist()], dtype=reg.dtype)
            tw = torch.tensor([tg[i].weight for i in tidx.tolist()], dtype=reg.dtype)
            tcls = torch.tensor([CATEGORY_IDS[tg[i].label] - 1 for i in tidx.tolist()])
            pred = decode_boxes(reg[b, cells], grid[cells])
            iou_loss = iou_loss + (tw * (1.0 - aligned_iou(pred, tboxes))).sum()
            onehot = F.one_hot(tcls, num_classes).to(cls.dtype)
            bce = F.binary_cross_entropy_with_logits(cls[b, cells], onehot, reduction="none").sum(-1)
            cls_loss = cls_loss + (tw * bce).sum()
            obj_target = obj_target.index_fill(0, cells, 1.0)
            obj_weight = obj_weight.index_copy(0, cells, tw)
        obj_loss = obj_loss + (obj_weight * F.binary_cross_entropy_with_logits(
            obj[b], obj_target, reduction="none")).sum()
    iou_loss, cls_loss, obj_loss = iou_loss / bsz, cls_loss / bsz, obj_loss / bsz
    total = config.reg_weight * iou_loss + cls_loss + obj_loss
    return {"iou_loss": iou_loss, "cls_loss": cls_loss, "obj_loss": obj_loss, "total": total}
