"""Teacher -> student pseudo-label distillation with a static or learned gate."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .boxes import CATEGORY_IDS, Box, Detection, iou_matrix
from .model.loss import Target, detection_loss
from .ppo import ACCEPT, PPOAgent, normalize_state


@dataclass(frozen=True)
class PseudoLabel:
    image_id: int
    box: Box
    label: str
    teacher_conf: float


@dataclass(frozen=True)
class DistillCandidate:
    pseudo: PseudoLabel
    area_norm: float
    best_student_iou: float
    student_entropy: float


@dataclass(frozen=True)
class DistillConfig:
    mode: str = "none"              # none | static | ppo
    phi: Optional[float] = None
    score_floor: float = 0.3
    lambda_distill: float = 0.5
    gt_dedup_iou: float = 0.7
    phi_rule: str = "min_iou"       # min_iou: accept iff IoU >= phi; unmatched: accept iff IoU < phi

    def __post_init__(self):
        if self.mode not in ("none", "static", "ppo"):
            raise ValueError(f"unknown distillation mode {self.mode!r}")
        if self.phi is not None and not 0 <= self.phi <= 1:
            raise ValueError("phi must lie in [0, 1]")
        if self.lambda_distill < 0:
            raise ValueError("lambda_distill must be non-negative")
        if self.phi_rule not in ("min_iou", "unmatched"):
            raise ValueError(f"unknown phi_rule {self.phi_rule!r}")


def class_entropy(probs: Sequence[float]) -> float:
    p = np.asarray(probs, dtype=np.float64)
    if (p < 0).any() or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"not a probability distribution: {p.tolist()}")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def generate_pseudo_labels(teacher, manifest, use_slicing: bool = True,
                           score_floor: float = 0.3) -> list[PseudoLabel]:
    """Run the teacher over every manifest image and keep detections scoring
    at least ``score_floor``. ``teacher`` is a :class:`DetectorHandle`."""
    from .dataset import read_image

    out = []
    for rec in sorted(manifest.images, key=lambda r: r.id):
        image = read_image(manifest, rec.id)
        for d in teacher.detect(image, use_slicing=use_slicing, conf_thresh=score_floor):
            if d.score >= score_floor:
                out.append(PseudoLabel(rec.id, d.box, d.label, d.score))
    return out


def build_candidates(pseudo: Sequence[PseudoLabel], student_dets: Mapping[int, Sequence[Detection]],
                     image_sizes: Mapping[int, tuple[int, int]], num_classes: int = 2) -> list[DistillCandidate]:
    cands = []
    max_entropy = math.log(num_classes)
    for p in pseudo:
        w, h = image_sizes[p.image_id]
        same = [d for d in student_dets.get(p.image_id, ()) if d.label == p.label]
        best_iou, entropy = 0.0, max_entropy
        if same:
            ious = iou_matrix(np.asarray([p.box]), np.asarray([d.box for d in same]))[0]
            k = int(np.argmax(ious))
            if ious[k] > 0:
                best_iou = float(ious[k])
                probs = same[k].class_probs
                entropy = class_entropy(probs) if probs is not None else max_entropy
        cands.append(DistillCandidate(p, min(p.box.area / (w * h), 1.0), best_iou, min(entropy, max_entropy)))
    return cands


def candidate_state(c: DistillCandidate, num_classes: int = 2) -> tuple[float, float, float]:
    return normalize_state(c.area_norm, c.pseudo.teacher_conf, c.student_entropy, num_classes)


def select_candidates(cands: Sequence[DistillCandidate], config: DistillConfig,
                      policy: Optional[PPOAgent] = None, rng: Optional[np.random.Generator] = None):
    """Return ``(accepted pseudo-labels, decision log)``.

    The decision log is only populated in ppo mode: one record per candidate
    with its state, action, log-probability and value estimate.
    """
    if config.mode == "none":
        return [], []
    if config.mode == "static":
        if config.phi is None:
            raise ValueError("static mode needs phi")
        if config.phi_rule == "min_iou":
            return [c.pseudo for c in cands if c.best_student_iou >= config.phi], []
        return [c.pseudo for c in cands if c.best_student_iou < config.phi], []
    if policy is None:
        raise ValueError("ppo mode needs a policy")
    states = np.asarray([candidate_state(c) for c in cands], dtype=np.float64).reshape(-1, 3)
    actions, log_probs, values = policy.act(states, rng)
    decisions = [
        {"image_id": int(c.pseudo.image_id), "state": [float(v) for v in s], "action": int(a),
         "log_prob": float(lp), "value": float(v), "reward": None}
        for c, s, a, lp, v in zip(cands, states, actions, log_probs, values)
    ]
    accepted = [c.pseudo for c, a in zip(cands, actions) if a == ACCEPT]
    return accepted, decisions


def dedup_pseudo(gts: Sequence, accepted: Sequence[PseudoLabel], thr: float) -> list[PseudoLabel]:
    """Drop pseudo-labels overlapping a same-class ground truth at IoU >= thr."""
    out = []
    for p in accepted:
        same = [g.xyxy if hasattr(g, "xyxy") else g.box for g in gts if g.label == p.label]
        if same and iou_matrix(np.asarray([p.box]), np.asarray(same)).max() >= thr:
            continue
        out.append(p)
    return out


def distill_loss(head, gts: Sequence[Sequence], accepted: Sequence[Sequence[PseudoLabel]],
                 config: DistillConfig, model_config):
    """Ground truths (weight 1) plus surviving pseudo-labels (weight
    ``lambda_distill``) through the ordinary detection loss."""
    targets = []
    for image_gts, image_pseudo in zip(gts, accepted):
        kept = dedup_pseudo(image_gts, image_pseudo, config.gt_dedup_iou)
        tg = [g if isinstance(g, Target) else Target(g.xyxy if hasattr(g, "xyxy") else g.box, g.label)
              for g in image_gts]
        tg.extend(Target(p.box, p.label, config.lambda_distill) for p in kept)
        targets.append(tg)
    return detection_loss(head, targets, model_config)


# persistence -----------------------------------------------------------

def save_pseudo_labels(pseudo: Sequence[PseudoLabel], path: str) -> None:
    recs = [{"image_id": p.image_id, "category_id": CATEGORY_IDS[p.label],
             "bbox": [float(v) for v in p.box.to_xywh()], "score": float(p.teacher_conf),
             "teacher_conf": float(p.teacher_conf)} for p in pseudo]
    with open(path, "w") as fh:
        json.dump(recs, fh)


def load_pseudo_labels(path: str) -> list[PseudoLabel]:
    with open(path) as fh:
        recs = json.load(fh)
    names = {v: k for k, v in CATEGORY_IDS.items()}
    return [PseudoLabel(int(r["image_id"]), Box.from_xywh(r["bbox"]), names[int(r["category_id"])],
                        float(r.get("teacher_conf", r["score"]))) for r in recs]


def write_decision_log(decisions: Sequence[dict], fh) -> None:
    for d in decisions:
        fh.write(json.dumps({k: d[k] for k in ("image_id", "state", "action", "log_prob", "reward")}) + "\n")
