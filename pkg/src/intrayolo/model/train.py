"""Training driver, augmentation and checkpoint container."""

from __future__ import annotations

import io
import math
import sys
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from ..boxes import Box
from .detector import SYOLO, ModelConfig, to_tensor
from .loss import Target, detection_loss

CHECKPOINT_VERSION = 1


class NonFiniteLossError(FloatingPointError):
    def __init__(self, batch_id, components):
        self.batch_id = batch_id
        self.components = components
        detail = ", ".join(f"{k}={v:.6g}" for k, v in components.items())
        super().__init__(f"non-finite loss at batch {batch_id}: {detail}")


def _canonical(obj):
    """Intern every string so pickle memoisation, and hence the bytes, do not
    depend on object identity (a loaded state would otherwise re-save differently)."""
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, dict):
        return {_canonical(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)) and not hasattr(obj, "_fields"):
        return type(obj)(_canonical(v) for v in obj)
    return obj


def _flip_box(box: Box, width: int, height: int, hflip: bool, vflip: bool) -> Box:
    x0, y0, x1, y1 = box
    if hflip:
        x0, x1 = width - x1, width - x0
    if vflip:
        y0, y1 = height - y1, height - y0
    return Box(x0, y0, x1, y1)


def flip_item(item, width: int, height: int, hflip: bool, vflip: bool):
    """Flip anything carrying a box (Target, pseudo-label, annotation)."""
    if isinstance(item, Target):
        return item._replace(box=_flip_box(item.box, width, height, hflip, vflip))
    if hasattr(item, "xyxy"):
        return Target(_flip_box(item.xyxy, width, height, hflip, vflip), item.label)
    from dataclasses import replace
    return replace(item, box=_flip_box(item.box, width, height, hflip, vflip))


class Trainer:
    """Owns a model, its Adam optimiser with cosine decay and the
    augmentation generator. Deterministic for fixed seeds."""

    def __init__(self, config: ModelConfig, seed: int = 0, lr: float = 1e-3, total_steps: int = 1000,
                 min_lr_ratio: float = 0.05, augment: bool = True, brightness: float = 0.1,
                 warmup_steps: int = 50, model: Optional[SYOLO] = None):
        torch.use_deterministic_algorithms(True)
        torch.manual_seed(seed)
        self.config = config
        self.model = model if model is not None else SYOLO(config)
        self.base_lr = lr
        self.total_steps = max(int(total_steps), 1)
        self.min_lr_ratio = min_lr_ratio
        self.warmup_steps = warmup_steps
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=lr)
        self.rng = np.random.default_rng(seed)
        self.augment = augment
        self.brightness = brightness
        self.step = 0

    def lr_at(self, step: int) -> float:
        t = min(step / self.total_steps, 1.0)
        lr = self.base_lr * (self.min_lr_ratio + (1 - self.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * t)))
        if step < self.warmup_steps:
            lr *= (step + 1) / self.warmup_steps
        return lr

    def _augment(self, images, groups):
        out_imgs = []
        out_groups = [[] for _ in groups]
        for b, img in enumerate(images):
            h, w = img.shape[:2]
            hflip = vflip = False
            gain = 1.0
            if self.augment:
                hflip = bool(self.rng.random() < 0.5)
                vflip = bool(self.rng.random() < 0.5)
                gain = float(self.rng.uniform(1 - self.brightness, 1 + self.brightness))
            if hflip:
                img = img[:, ::-1]
            if vflip:
                img = img[::-1]
            if gain != 1.0:
                img = np.clip(img.astype(np.float32) * gain, 0, 255).astype(np.uint8)
            out_imgs.append(np.ascontiguousarray(img))
            for g, group in enumerate(groups):
                items = group[b] if group is not None else []
                out_groups[g].append([flip_item(it, w, h, hflip, vflip) for it in items])
        return out_imgs, out_groups

    def train_step(self, images: Sequence[np.ndarray], targets: Sequence[Sequence],
                   weights: Optional[Sequence[Sequence[float]]] = None, batch_id=None,
                   pseudo: Optional[Sequence[Sequence]] = None,
                   loss_fn: Optional[Callable] = None) -> dict[str, float]:
        """One optimiser step on ``detection_loss`` (or ``loss_fn``).

        ``loss_fn(head, targets, pseudo)`` receives augmented targets and
        pseudo-labels and must return the loss-component dict.
        """
        self.model.train()
        if weights is not None:
            targets = [[Target(t.xyxy if hasattr(t, "xyxy") else t.box, t.label, w)
                        for t, w in zip(ts, ws)] for ts, ws in zip(targets, weights)]
        imgs, (targets, pseudo_aug) = self._augment(images, [targets, pseudo])
        for group in self.optimizer.param_groups:
            group["lr"] = self.lr_at(self.step)
        head = self.model(to_tensor(imgs))
        if loss_fn is None:
            losses = detection_loss(head, targets, self.config)
        else:
            losses = loss_fn(head, targets, pseudo_aug)
        metrics = {k: float(v.detach()) for k, v in losses.items()}
        if not all(math.isfinite(v) for v in metrics.values()):
            raise NonFiniteLossError(batch_id if batch_id is not None else self.step, metrics)
        self.optimizer.zero_grad(set_to_none=True)
        losses["total"].backward()
        self.optimizer.step()
        self.step += 1
        metrics["lr"] = self.lr_at(self.step - 1)
        return metrics

    def evaluate_loss(self, images, targets) -> float:
        """Forward-only ground-truth loss without augmentation."""
        self.model.eval()
        with torch.no_grad():
            head = self.model(to_tensor(images))
            return float(detection_loss(head, targets, self.config)["total"])

    # checkpoints -------------------------------------------------------
    def state_dict(self, extra: Optional[dict] = None) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "step": self.step,
            "base_lr": self.base_lr,
            "total_steps": self.total_steps,
            "warmup_steps": self.warmup_steps,
            "rng_state": self.rng.bit_generator.state,
            "torch_rng_state": torch.get_rng_state(),
            "extra": extra or {},
        }

    def save(self, path: str, extra: Optional[dict] = None) -> None:
        buf = io.BytesIO()
        torch.save(_canonical(self.state_dict(extra)), buf)
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path: str) -> tuple["Trainer", dict]:
        state = load_checkpoint(path)
        config = ModelConfig.from_dict(state["config"])
        trainer = cls(config, lr=state["base_lr"], total_steps=state["total_steps"],
                      warmup_steps=state.get("warmup_steps", 0))
        trainer.model.load_state_dict(state["model"])
        trainer.optimizer.load_state_dict(state["optimizer"])
        trainer.step = state["step"]
        trainer.rng.bit_generator.state = state["rng_state"]
        torch.set_rng_state(state["torch_rng_state"])
        return trainer, state.get("extra", {})


def load_checkpoint(path: str) -> dict:
    state = torch.load(path, map_location="cpu", weights_only=False)
    if state.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {state.get('format_version')!r}")
    return state


def load_model(path: str) -> SYOLO:
    state = load_checkpoint(path)
    model = SYOLO(ModelConfig.from_dict(state["config"]))
    model.load_state_dict(state["model"])
    model.eval()
    return model
