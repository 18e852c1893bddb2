"""Synthetic intraoral-like scenes with caries and MIH blobs.

Lesion box-area ratios follow a log-normal whose mass below
``small_area_ratio`` equals ``small_fraction_target``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from .boxes import Box, iou
from .dataset import Annotation, DatasetManifest, ImageRecord, save_manifest

# Colour families (RGB). Caries dark/cavitated, MIH chalky/yellow opaque.
CARIES_RGB = (78, 48, 30)
MIH_RGB = (242, 214, 128)
TOOTH_RGB = (226, 218, 196)
GUM_RGB = (186, 96, 98)
HUE_JITTER = 14
MAX_BLOB_IOU = 0.3


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthParams:
    image_size: tuple[int, int] = (256, 256)
    lesions_per_image: tuple[int, int] = (3, 10)
    small_fraction_target: float = 0.78
    small_area_ratio: float = 0.0058
    class_mix: float = 0.554            # MIH share of lesions
    background_style: str = "gradient"
    seed: int = 0
    log_sigma: float = 0.8
    brightness_jitter: float = 0.12
    min_side: int = 3
    max_attempts: int = 60

    def __post_init__(self):
        if not 0 < self.small_area_ratio < 1:
            raise ValueError("small_area_ratio must lie in (0, 1)")
        if not 0 <= self.small_fraction_target <= 1:
            raise ValueError("small_fraction_target must lie in [0, 1]")
        lo, hi = self.lesions_per_image
        if lo < 0 or hi < lo:
            raise ValueError("lesions_per_image must be a non-negative (min, max) range")
        if self.background_style not in ("gradient", "textured"):
            raise ValueError(f"unknown background_style {self.background_style!r}")
        if not 0 <= self.class_mix <= 1:
            raise ValueError("class_mix must lie in [0, 1]")

    @property
    def log_mu(self) -> float:
        p = min(max(self.small_fraction_target, 1e-9), 1 - 1e-9)
        return math.log(self.small_area_ratio) - self.log_sigma * NormalDist().inv_cdf(p)


def sample_area_ratios(params: SynthParams, rng: np.random.Generator, n: int) -> np.ndarray:
    return np.minimum(rng.lognormal(params.log_mu, params.log_sigma, size=n), 0.2)


def _background(params: SynthParams, rng: np.random.Generator) -> np.ndarray:
    w, h = params.image_size
    yy = np.linspace(0.0, 1.0, h)[:, None, None]
    gum = np.asarray(GUM_RGB, dtype=np.float64) * (0.85 + 0.3 * yy)
    img = np.broadcast_to(gum, (h, w, 3)).copy()

    # Two jaws of rounded teeth separated by a dark occlusal gap.
    gap = int(h * rng.uniform(0.45, 0.55))
    n_teeth = int(rng.integers(5, 9))
    tooth_w = w / n_teeth
    for jaw_top, jaw_bot in ((int(h * 0.08), gap - 2), (gap + 2, int(h * 0.92))):
        for k in range(n_teeth):
            cx = (k + 0.5) * tooth_w + rng.uniform(-2, 2)
            cy = 0.5 * (jaw_top + jaw_bot)
            rx, ry = 0.46 * tooth_w, 0.5 * (jaw_bot - jaw_top)
            x0, x1 = max(int(cx - rx), 0), min(int(cx + rx) + 2, w)
            y0, y1 = max(int(cy - ry), 0), min(int(cy + ry) + 2, h)
            xs = np.arange(x0, x1)[None, :]
            ys = np.arange(y0, y1)[:, None]
            inside = (np.abs(xs - cx) / rx) ** 4 + (np.abs(ys - cy) / ry) ** 4 <= 1.0
            shade = np.asarray(TOOTH_RGB) + rng.normal(0, 5, size=3)
            img[y0:y1, x0:x1][inside] = shade
    img[gap - 2:gap + 2] *= 0.35

    if params.background_style == "textured":
        coarse = rng.normal(0, 10, size=(h // 16 + 2, w // 16 + 2))
        noise = np.kron(coarse, np.ones((16, 16)))[:h, :w]
        img += noise[..., None]
    return img


def _lesion_colour(label: str, rng: np.random.Generator) -> np.ndarray:
    base = CARIES_RGB if label == "caries" else MIH_RGB
    return np.asarray(base, dtype=np.float64) + rng.integers(-HUE_JITTER, HUE_JITTER + 1, size=3)


def ellipse_mask(w: int, h: int) -> np.ndarray:
    """Pixel-centre test for the ellipse inscribed in a ``w`` x ``h`` box;
    for w, h >= 2 its tight bound is the whole box."""
    ys = (np.arange(h) + 0.5 - h / 2) / (h / 2)
    xs = (np.arange(w) + 0.5 - w / 2) / (w / 2)
    return xs[None, :] ** 2 + ys[:, None] ** 2 <= 1.0


def generate_scene(params: SynthParams, rng: np.random.Generator, return_masks: bool = False):
    """Render one scene; returns ``(image, annotations)`` (plus full-size blob
    masks when ``return_masks``). Annotations carry image_id 0."""
    w, h = params.image_size
    lo, hi = params.lesions_per_image
    n_target = int(rng.integers(lo, hi + 1))
    img = _background(params, rng)

    placed = []  # (box, label)
    ratios = sample_area_ratios(params, rng, n_target)
    for ratio in ratios:
        area = ratio * w * h
        aspect = math.exp(rng.uniform(-0.4, 0.4))
        bw = int(min(max(round(math.sqrt(area * aspect)), params.min_side), w // 2))
        bh = int(min(max(round(math.sqrt(area / aspect)), params.min_side), h // 2))
        label = "mih" if rng.random() < params.class_mix else "caries"
        for _ in range(params.max_attempts):
            x0 = int(rng.integers(0, w - bw + 1))
            y0 = int(rng.integers(0, h - bh + 1))
            box = Box(x0, y0, x0 + bw, y0 + bh)
            if all(iou(box, other) <= MAX_BLOB_IOU for other, _ in placed):
                placed.append((box, label))
                break
    if len(placed) < lo:
        raise PlacementError(f"placed {len(placed)} lesions, need at least {lo} in a {w}x{h} image")

    anns, masks = [], []
    for k, ((x0, y0, x1, y1), label) in enumerate(placed):
        m = ellipse_mask(x1 - x0, y1 - y0)
        colour = _lesion_colour(label, rng)
        region = img[y0:y1, x0:x1]
        region[m] = 0.2 * region[m] + 0.8 * colour
        rows, cols = np.nonzero(m)
        bx0, by0 = x0 + cols.min(), y0 + rows.min()
        bx1, by1 = x0 + cols.max() + 1, y0 + rows.max() + 1
        anns.append(Annotation(k + 1, 0, label, (float(bx0), float(by0), float(bx1 - bx0), float(by1 - by0))))
        if return_masks:
            full = np.zeros((h, w), dtype=bool)
            full[y0:y1, x0:x1] = m
            masks.append(full)

    img *= 1.0 + rng.uniform(-params.brightness_jitter, params.brightness_jitter)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    if return_masks:
        return img, anns, masks
    return img, anns


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def generate_dataset(n_images: int, params: SynthParams, out: str) -> DatasetManifest:
    """Write ``n_images`` PNG scenes plus ``manifest.json`` under ``out``."""
    from PIL import Image

    if n_images <= 0:
        raise ValueError("n_images must be positive")
    img_dir = os.path.join(out, "images")
    os.makedirs(img_dir, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory not writable: {out}")

    images, anns = [], []
    next_ann = 1
    for i in range(n_images):
        img, scene_anns = generate_scene(params, scene_rng(params.seed, i))
        rel = os.path.join("images", f"{i + 1:05d}.png")
        Image.fromarray(img).save(os.path.join(out, rel))
        images.append(ImageRecord(i + 1, params.image_size[0], params.image_size[1], rel))
        for a in scene_anns:
            anns.append(Annotation(next_ann, i + 1, a.label, a.box))
            next_ann += 1
    manifest = DatasetManifest(tuple(images), tuple(anns), "none", os.path.abspath(out))
    save_manifest(manifest, os.path.join(out, "manifest.json"))
    return manifest
