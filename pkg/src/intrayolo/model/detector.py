"""Anchor-free one-stage detector (S-YOLO) and its decoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from ..boxes import CLASSES, Box, Detection, nms_indices
from .neck import SPAFPN, conv
from .ssm import SSMAttention

# Decoded centre may move +/- CENTER_RANGE/2 strides from its cell centre.
CENTER_RANGE = 4.0
_PRIOR_LOGIT = -math.log((1 - 0.01) / 0.01)


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 640
    backbone_channels: tuple[int, ...] = (32, 64, 128, 256)
    neck_width: int = 64
    num_classes: int = 2
    ssm_state_dim: int = 8
    use_p2: bool = True
    use_ssm: bool = True
    size_ranges: tuple[float, ...] = (32.0, 64.0, 128.0)
    center_radius: float = 1.5
    nms_iou: float = 0.5
    pre_nms_topk: int = 300
    reg_weight: float = 5.0

    def __post_init__(self):
        if self.input_size % 32:
            raise ValueError(f"input_size {self.input_size} is not a multiple of 32")
        if len(self.backbone_channels) != 4:
            raise ValueError("backbone_channels needs one width per stride 4/8/16/32")
        if self.num_classes != len(CLASSES):
            raise ValueError(f"num_classes must be {len(CLASSES)}")

    @property
    def strides(self) -> tuple[int, ...]:
        return (4, 8, 16, 32) if self.use_p2 else (8, 16, 32)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("backbone_channels", "size_ranges"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


TOY_CONFIG = ModelConfig(input_size=128, backbone_channels=(16, 32, 48, 64), neck_width=32)


@dataclass
class HeadOutput:
    """Per-level raw head tensors: cls (B, K, H, W), obj (B, 1, H, W),
    reg (B, 4, H, W) holding (dx, dy, dw, dh)."""

    cls: list[torch.Tensor]
    obj: list[torch.Tensor]
    reg: list[torch.Tensor]
    strides: tuple[int, ...]

    @property
    def batch_size(self) -> int:
        return self.cls[0].shape[0]

    def flat(self):
        """Concatenate levels: returns cls (B, M, K), obj (B, M), reg (B, M, 4),
        and per-cell (col, row, stride) as an (M, 3) tensor."""
        cls, obj, reg, grid = [], [], [], []
        for c, o, r, s in zip(self.cls, self.obj, self.reg, self.strides):
            b, k, h, w = c.shape
            cls.append(c.permute(0, 2, 3, 1).reshape(b, h * w, k))
            obj.append(o.reshape(b, h * w))
            reg.append(r.permute(0, 2, 3, 1).reshape(b, h * w, 4))
            rows, cols = torch.meshgrid(torch.arange(h), torch.arange(w), indexing="ij")
            grid.append(torch.stack([cols.reshape(-1), rows.reshape(-1),
                                     torch.full((h * w,), s)], dim=1))
        return torch.cat(cls, 1), torch.cat(obj, 1), torch.cat(reg, 1), torch.cat(grid, 0)


MAX_LOG_SIZE = 12.0          # exp(12) strides is far beyond any image


def decode_boxes(reg: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Corner-form boxes from (dx, dy, dw, dh); ``grid`` rows are (col, row, stride)."""
    col, row, s = (grid[:, k].to(reg.dtype) for k in range(3))
    cx = (col + 0.5 + CENTER_RANGE * (torch.sigmoid(reg[..., 0]) - 0.5)) * s
    cy = (row + 0.5 + CENTER_RANGE * (torch.sigmoid(reg[..., 1]) - 0.5)) * s
    w = torch.exp(reg[..., 2]) * s
    h = torch.exp(reg[..., 3]) * s
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.body = nn.Sequential(conv(c, c), nn.Conv2d(c, c, 3, 1, 1))
        self.act = nn.SiLU()

    def forward(self, x):
        return self.act(x + self.body(x))


class Backbone(nn.Module):
    """Four strided stages producing C2..C5 at strides 4/8/16/32."""

    def __init__(self, widths: Sequence[int]):
        super().__init__()
        self.stem = conv(3, widths[0], 3, 2)
        stages = []
        cin = widths[0]
        for w in widths:
            stages.append(nn.Sequential(conv(cin, w, 3, 2), ResBlock(w)))
            cin = w
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class DecoupledHead(nn.Module):
    def __init__(self, width: int, num_classes: int):
        super().__init__()
        self.stem = conv(width, width, 1)
        self.cls_branch = conv(width, width)
        self.reg_branch = conv(width, width)
        self.cls_pred = nn.Conv2d(width, num_classes, 1)
        self.reg_pred = nn.Conv2d(width, 4, 1)
        self.obj_pred = nn.Conv2d(width, 1, 1)
        nn.init.constant_(self.cls_pred.bias, _PRIOR_LOGIT)
        nn.init.constant_(self.obj_pred.bias, _PRIOR_LOGIT)

    def forward(self, x):
        x = self.stem(x)
        c = self.cls_branch(x)
        r = self.reg_branch(x)
        return self.cls_pred(c), self.obj_pred(r), self.reg_pred(r)


class SYOLO(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config.backbone_channels)
        used = config.backbone_channels if config.use_p2 else config.backbone_channels[1:]
        self.neck = SPAFPN(used, config.neck_width)
        self.ssm = nn.ModuleList(
            SSMAttention(config.neck_width, config.ssm_state_dim) for _ in used
        ) if config.use_ssm else None
        self.heads = nn.ModuleList(DecoupledHead(config.neck_width, config.num_classes) for _ in used)

    def pyramid(self, images: torch.Tensor) -> list[torch.Tensor]:
        feats = self.backbone(images)
        if not self.config.use_p2:
            feats = feats[1:]
        levels = self.neck(feats)
        if self.ssm is not None:
            levels = [blk(p) for blk, p in zip(self.ssm, levels)]
        return levels

    def forward(self, images: torch.Tensor) -> HeadOutput:
        """``images`` is float (B, 3, H, W) scaled to [0, 1]."""
        if images.shape[-1] % 32 or images.shape[-2] % 32:
            raise ValueError(f"input spatial size {tuple(images.shape[-2:])} is not a multiple of 32")
        cls, obj, reg = [], [], []
        for head, p in zip(self.heads, self.pyramid(images - 0.5)):
            c, o, r = head(p)
            cls.append(c)
            obj.append(o)
            reg.append(r)
        return HeadOutput(cls, obj, reg, self.config.strides)


def decode_predictions(head: HeadOutput, conf_thresh: float = 0.05, nms_iou: Optional[float] = 0.5,
                       pre_nms_topk: int = 300, scale: float = 1.0) -> list[list[Detection]]:
    """Decode every image in the batch into detections.

    Score is ``sigmoid(obj) * sigmoid(best class logit)``; cells scoring at
    least ``conf_thresh`` (at most ``pre_nms_topk`` per image) go through
    class-aware NMS unless ``nms_iou`` is None. Boxes are multiplied by
    ``scale`` to map back to source pixels.
    """
    with torch.no_grad():
        cls, obj, reg, grid = head.flat()
        # cells that were never positives carry untrained size logits; cap
        # them so exp() stays finite
        reg = torch.cat([reg[..., :2], reg[..., 2:].clamp(max=MAX_LOG_SIZE)], dim=-1)
        boxes = (decode_boxes(reg, grid) * scale).double().numpy()
        cls_sig = torch.sigmoid(cls.double())
        best_p, best_k = cls_sig.max(dim=-1)
        scores = (torch.sigmoid(obj.double()) * best_p).numpy()
        probs = torch.softmax(cls.double(), dim=-1).numpy()
        best_k = best_k.numpy()

    out = []
    for b in range(boxes.shape[0]):
        idx = np.nonzero(scores[b] >= conf_thresh)[0]
        if len(idx) > pre_nms_topk:
            top = np.argsort(-scores[b][idx], kind="stable")[:pre_nms_topk]
            idx = np.sort(idx[top])
        bx, sc, lb = boxes[b][idx], scores[b][idx], best_k[b][idx]
        if nms_iou is not None and len(idx):
            keep = nms_indices(bx, sc, nms_iou, lb)
        else:
            keep = np.arange(len(idx))
        out.append([
            Detection(Box(*map(float, bx[i])), CLASSES[lb[i]], float(min(max(sc[i], 0.0), 1.0)),
                      tuple(map(float, probs[b][idx[i]])))
            for i in keep
        ])
    return out


def to_tensor(images: Sequence[np.ndarray] | np.ndarray, dtype=torch.float32) -> torch.Tensor:
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype) / 255.0
