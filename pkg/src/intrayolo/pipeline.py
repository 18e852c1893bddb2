"""Pipeline stages: teacher training on patches, gated student training on
full images, inference and the distillation ablation sweep."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .boxes import Box, Detection
from .dataset import SMALL_AREA_RATIO, DatasetManifest, crop_patches, read_image, split_dataset
from .distill import (DistillConfig, PseudoLabel, build_candidates, distill_loss, generate_pseudo_labels,
                      select_candidates)
from .evaluation import EvalResult, evaluate
from .inference import DetectorHandle, resize
from .model.detector import TOY_CONFIG, ModelConfig, decode_predictions, to_tensor
from .model.loss import Target
from .model.train import Trainer
from .ppo import PPOAgent, PPOConfig, Trajectory, compute_reward
from .synth import SynthParams, generate_dataset

log = logging.getLogger(__name__)

TABLE2_PHIS = (0.1, 0.15, 0.2, 0.5)


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 400
    batch_size: int = 8
    lr: float = 2e-3
    warmup_steps: int = 50
    seed: int = 0
    augment: bool = True


@dataclass
class TrainRun:
    trainer: Trainer
    agent: Optional[PPOAgent] = None
    metrics: list = field(default_factory=list)
    decisions: list = field(default_factory=list)
    ppo_stats: list = field(default_factory=list)

    def checkpoint_extra(self) -> dict:
        extra = {}
        if self.agent is not None:
            extra["ppo_agent"] = self.agent.state_dict()
        return extra


class ImageCache:
    """Source images loaded once and resized to the training resolution.

    Patch records (``offset`` set) are cut from their cached source image.
    """

    def __init__(self, manifest: DatasetManifest, size: int):
        self.manifest = manifest
        self.size = size
        self._pixels: dict[int, np.ndarray] = {}

    def native(self, image_id: int) -> np.ndarray:
        if image_id not in self._pixels:
            self._pixels[image_id] = read_image(self.manifest, image_id)
        return self._pixels[image_id]

    def scale(self, image_id: int) -> tuple[float, float]:
        rec = self.manifest.image(image_id)
        return self.size / rec.width, self.size / rec.height

    def __getitem__(self, image_id: int) -> np.ndarray:
        return resize(self.native(image_id), self.size, self.size)


def _scale_box(box: Box, sx: float, sy: float) -> Box:
    return Box(box.x_min * sx, box.y_min * sy, box.x_max * sx, box.y_max * sy)


def _batches(ids: Sequence[int], batch_size: int, steps: int, rng: np.random.Generator):
    order: list[int] = []
    for _ in range(steps):
        if len(order) < batch_size:
            order.extend(rng.permutation(ids).tolist())
        batch, order = order[:batch_size], order[batch_size:]
        yield batch


def train_detector(manifest: DatasetManifest, config: ModelConfig, settings: TrainSettings,
                   distill: DistillConfig = DistillConfig(), pseudo: Sequence[PseudoLabel] = (),
                   ppo_config: PPOConfig = PPOConfig(),
                   on_step: Optional[Callable[[int, dict], None]] = None) -> TrainRun:
    """Train a detector on ``manifest`` with optional gated pseudo-labels.

    Images are resized to ``config.input_size``. With distillation enabled,
    each batch's pseudo-labels are scored against the current student
    (decoded at confidence 0), gated, deduplicated against ground truth and
    added to the loss. In ppo mode every batch is one episode whose reward
    is the change in ground-truth loss across the update.
    """
    if not manifest.images:
        raise ValueError("cannot train on an empty manifest")
    trainer = Trainer(config, seed=settings.seed, lr=settings.lr, total_steps=settings.steps,
                      warmup_steps=settings.warmup_steps, augment=settings.augment)
    agent = PPOAgent(ppo_config, seed=settings.seed) if distill.mode == "ppo" else None
    run = TrainRun(trainer, agent)
    cache = ImageCache(manifest, config.input_size)
    by_image = manifest.annotations_by_image()
    pseudo_by_image: dict[int, list[PseudoLabel]] = {}
    for p in pseudo:
        pseudo_by_image.setdefault(p.image_id, []).append(p)
    sizes = {im.id: (im.width, im.height) for im in manifest.images}
    batch_rng = np.random.default_rng([settings.seed, 11])
    gate_rng = np.random.default_rng([settings.seed, 12])
    ids = [im.id for im in manifest.images]
    pending: list[Trajectory] = []
    batches_since_update = 0

    def loss_fn(head, targets, accepted):
        return distill_loss(head, targets, accepted, distill, config)

    for step, batch in enumerate(_batches(ids, settings.batch_size, settings.steps, batch_rng)):
        images = [cache[i] for i in batch]
        scales = [cache.scale(i) for i in batch]
        gts = [[Target(_scale_box(a.xyxy, sx, sy), a.label) for a in by_image.get(i, [])]
               for i, (sx, sy) in zip(batch, scales)]
        accepted_per_image: list[list[PseudoLabel]] = [[] for _ in batch]
        decisions: list[dict] = []
        batch_pseudo = [p for i in batch for p in pseudo_by_image.get(i, [])]
        if distill.mode != "none" and batch_pseudo:
            student = student_detections(trainer.model, images, batch, scales)
            cands = build_candidates(batch_pseudo, student, sizes, config.num_classes)
            accepted, decisions = select_candidates(cands, distill, agent, gate_rng)
            slot = {i: k for k, i in enumerate(batch)}
            for p in accepted:
                sx, sy = scales[slot[p.image_id]]
                accepted_per_image[slot[p.image_id]].append(
                    PseudoLabel(p.image_id, _scale_box(p.box, sx, sy), p.label, p.teacher_conf))
        before = trainer.evaluate_loss(images, gts) if decisions else None
        metrics = trainer.train_step(images, gts, batch_id=step, pseudo=accepted_per_image, loss_fn=loss_fn)
        metrics["accepted"] = sum(len(a) for a in accepted_per_image)
        metrics["candidates"] = len(decisions) if distill.mode == "ppo" else len(batch_pseudo)
        if decisions:
            after = trainer.evaluate_loss(images, gts)
            rewards = compute_reward(decisions, before, after, ppo_config)
            pending.append(Trajectory([d["state"] for d in decisions], [d["action"] for d in decisions],
                                      [d["log_prob"] for d in decisions], rewards,
                                      [d["value"] for d in decisions]))
            run.decisions.extend(decisions)
            batches_since_update += 1
            if batches_since_update >= ppo_config.update_interval:
                run.ppo_stats.append(agent.update(pending))
                pending, batches_since_update = [], 0
        run.metrics.append(metrics)
        if on_step is not None:
            on_step(step, metrics)
    if pending:
        run.ppo_stats.append(agent.update(pending))
    return run


def student_detections(model, images: Sequence[np.ndarray], ids: Sequence[int],
                       scales: Sequence[tuple[float, float]]) -> dict[int, list[Detection]]:
    """Decode the current model at confidence 0, in source-image pixels."""
    model.eval()
    with torch.no_grad():
        head = model(to_tensor(images))
    per_image = decode_predictions(head, 0.0, model.config.nms_iou, model.config.pre_nms_topk)
    out = {}
    for i, (sx, sy), dets in zip(ids, scales, per_image):
        out[i] = [Detection(_scale_box(d.box, 1 / sx, 1 / sy), d.label, d.score, d.class_probs) for d in dets]
    return out


def train_teacher(manifest: DatasetManifest, config: ModelConfig, settings: TrainSettings,
                  patch_size: Optional[int] = None) -> TrainRun:
    """Train on non-empty, non-overlapping crops of side ``patch_size``
    (default: the model input size, so patches are seen at native scale)."""
    patches = crop_patches(manifest, patch_size or config.input_size)
    return train_detector(patches, config, settings)


def infer(handle: DetectorHandle, manifest: DatasetManifest, use_slicing: bool = False,
          conf_thresh: float = 0.01) -> dict[int, list[Detection]]:
    return {rec.id: handle.detect(read_image(manifest, rec.id), use_slicing, conf_thresh)
            for rec in sorted(manifest.images, key=lambda r: r.id)}


def sweep_rows(phis: Sequence[float] = TABLE2_PHIS) -> list[tuple[str, DistillConfig]]:
    rows = [("none", DistillConfig("none"))]
    rows += [(f"phi={phi:g}", DistillConfig("static", phi)) for phi in phis]
    rows.append(("ppo", DistillConfig("ppo")))
    return rows


def table2_sweep(train: DatasetManifest, val: DatasetManifest, pseudo: Sequence[PseudoLabel],
                 config: ModelConfig, settings: TrainSettings, phis: Sequence[float] = TABLE2_PHIS,
                 use_slicing: bool = True, ppo_config: PPOConfig = PPOConfig(),
                 rows: Optional[Sequence[tuple[str, DistillConfig]]] = None) -> list[tuple[str, EvalResult]]:
    """Train one student per ablation row and evaluate each on ``val``."""
    results = []
    for name, dcfg in rows or sweep_rows(phis):
        run = train_detector(train, config, settings, dcfg, pseudo, ppo_config)
        dets = infer(DetectorHandle(run.trainer.model), val, use_slicing)
        results.append((name, evaluate(dets, val)))
        log.info("sweep row %s: mAP50 %.4f", name, results[-1][1]["mAP50"])
    return results


# end-to-end experiment -----------------------------------------------

STUDENT_CONFIG = ModelConfig(**{**TOY_CONFIG.to_dict(), "input_size": 256})


@dataclass
class ExperimentResult:
    seed: int
    teacher_full: EvalResult
    teacher_sliced: EvalResult
    pseudo_sliced: list
    pseudo_full: list
    rows: list
    image_sizes: dict
    timings: dict = field(default_factory=dict)

    def row(self, name: str) -> EvalResult:
        return dict(self.rows)[name]

    def small_pseudo_counts(self, ratio: float = SMALL_AREA_RATIO) -> tuple[int, int]:
        """(sliced, full-frame) counts of pseudo-labels below ``ratio`` of the image area."""
        def count(labels):
            return sum(p.box.area / (self.image_sizes[p.image_id][0] * self.image_sizes[p.image_id][1]) < ratio
                       for p in labels)
        return count(self.pseudo_sliced), count(self.pseudo_full)


def run_experiment(seed: int, workdir: str, n_images: int = 200, teacher_steps: int = 600,
                   student_steps: int = 300, teacher_config: ModelConfig = TOY_CONFIG,
                   student_config: ModelConfig = STUDENT_CONFIG, score_floor: float = 0.3,
                   rows: Optional[Sequence[tuple[str, DistillConfig]]] = None) -> ExperimentResult:
    """Synthesize a dataset, train the patch teacher, compare its full-frame
    and sliced inference, pseudo-label the training split and run the
    distillation sweep. Everything is seeded from ``seed``."""
    timings = {}
    t0 = time.perf_counter()
    manifest = generate_dataset(n_images, SynthParams(seed=seed), workdir)
    train, val = split_dataset(manifest, 0.8, seed)
    teacher = train_teacher(train, teacher_config, TrainSettings(steps=teacher_steps, seed=seed))
    timings["teacher"] = time.perf_counter() - t0
    handle = DetectorHandle(teacher.trainer.model)
    full = evaluate(infer(handle, val, use_slicing=False), val)
    sliced = evaluate(infer(handle, val, use_slicing=True), val)
    pseudo = generate_pseudo_labels(handle, train, use_slicing=True, score_floor=score_floor)
    pseudo_full = generate_pseudo_labels(handle, train, use_slicing=False, score_floor=score_floor)
    timings["pseudo"] = time.perf_counter() - t0
    results = []
    for name, dcfg in rows or sweep_rows():
        run = train_detector(train, student_config, TrainSettings(steps=student_steps, seed=seed), dcfg, pseudo)
        results.append((name, evaluate(infer(DetectorHandle(run.trainer.model), val, True), val)))
        timings[name] = time.perf_counter() - t0
        log.info("seed %d row %s: mAP50 %.4f", seed, name, results[-1][1]["mAP50"])
    sizes = {im.id: (im.width, im.height) for im in manifest.images}
    return ExperimentResult(seed, full, sliced, pseudo, pseudo_full, results, sizes, timings)
