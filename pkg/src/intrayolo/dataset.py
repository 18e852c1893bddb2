"""Annotated image datasets: COCO-style manifests, splits, patch crops and
lesion-size statistics."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .boxes import CATEGORY_IDS, CATEGORY_NAMES, Box

log = logging.getLogger(__name__)

SMALL_AREA_RATIO = 0.0058


class ManifestError(ValueError):
    """Raised for an invalid annotation document; names the offending record."""


@dataclass(frozen=True)
class ImageRecord:
    id: int
    width: int
    height: int
    path: str
    source_image_id: Optional[int] = None
    offset: Optional[tuple[int, int]] = None

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ManifestError(f"image {self.id}: non-positive size {self.width}x{self.height}")


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    label: str
    box: tuple[float, float, float, float]  # x, y, w, h

    def __post_init__(self):
        if self.label not in CATEGORY_IDS:
            raise ManifestError(f"annotation {self.id}: unknown label {self.label!r}")
        if not (self.box[2] > 0 and self.box[3] > 0):
            raise ManifestError(f"annotation {self.id}: degenerate box {list(self.box)}")

    @property
    def xyxy(self) -> Box:
        return Box.from_xywh(self.box)

    @property
    def area(self) -> float:
        return self.box[2] * self.box[3]


@dataclass(frozen=True)
class DatasetManifest:
    images: tuple[ImageRecord, ...]
    annotations: tuple[Annotation, ...]
    split_tag: str = "none"
    root: str = field(default="", compare=False)

    def __post_init__(self):
        ids = [im.id for im in self.images]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise ManifestError(f"duplicate image id {dup}")
        known = set(ids)
        for a in self.annotations:
            if a.image_id not in known:
                raise ManifestError(f"annotation {a.id}: references absent image {a.image_id}")
        if self.split_tag not in ("train", "val", "none"):
            raise ManifestError(f"unknown split tag {self.split_tag!r}")

    def image(self, image_id: int) -> ImageRecord:
        return self._by_id()[image_id]

    def _by_id(self) -> dict[int, ImageRecord]:
        cache = self.__dict__.get("_image_index")
        if cache is None:
            cache = {im.id: im for im in self.images}
            object.__setattr__(self, "_image_index", cache)
        return cache

    def annotations_by_image(self) -> dict[int, list[Annotation]]:
        out: dict[int, list[Annotation]] = {im.id: [] for im in self.images}
        for a in self.annotations:
            out[a.image_id].append(a)
        return out

    def image_path(self, image_id: int) -> str:
        return os.path.join(self.root, self.image(image_id).path)


def _clip_xywh(box, width, height):
    x0, y0, x1, y1 = Box.from_xywh(box).clip(width, height)
    return (x0, y0, x1 - x0, y1 - y0)


def manifest_from_coco(doc: dict, root: str = "") -> DatasetManifest:
    if not isinstance(doc, dict) or "images" not in doc or "annotations" not in doc:
        raise ManifestError("malformed document: expected top-level 'images' and 'annotations'")
    categories = {int(c["id"]): c["name"] for c in doc.get("categories", [])} or dict(CATEGORY_NAMES)
    for cid, name in categories.items():
        if CATEGORY_IDS.get(name) != cid:
            raise ManifestError(f"category {cid}: expected {CATEGORY_NAMES.get(cid)!r}, got {name!r}")

    images = []
    for rec in doc["images"]:
        try:
            offset = None
            if "offset_x" in rec:
                offset = (int(rec["offset_x"]), int(rec["offset_y"]))
            images.append(ImageRecord(
                id=int(rec["id"]), width=int(rec["width"]), height=int(rec["height"]),
                path=rec.get("file_name", ""),
                source_image_id=rec.get("source_image_id"), offset=offset,
            ))
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"malformed image record {rec.get('id', '?')}: {exc}") from None
    sizes = {im.id: (im.width, im.height) for im in images}

    anns = []
    for rec in doc["annotations"]:
        aid = rec.get("id", "?")
        try:
            cid = int(rec["category_id"])
            bbox = [float(v) for v in rec["bbox"]]
            image_id = int(rec["image_id"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"annotation {aid}: malformed record ({exc})") from None
        if cid not in CATEGORY_NAMES or cid not in categories:
            raise ManifestError(f"annotation {aid}: unknown category id {cid}")
        if image_id not in sizes:
            raise ManifestError(f"annotation {aid}: references absent image {image_id}")
        if len(bbox) != 4 or bbox[2] <= 0 or bbox[3] <= 0:
            raise ManifestError(f"annotation {aid}: degenerate box {bbox}")
        clipped = _clip_xywh(bbox, *sizes[image_id])
        if clipped[2] <= 0 or clipped[3] <= 0:
            raise ManifestError(f"annotation {aid}: box {bbox} lies outside its image")
        anns.append(Annotation(id=int(aid), image_id=image_id, label=CATEGORY_NAMES[cid], box=clipped))

    return DatasetManifest(tuple(images), tuple(anns), doc.get("split_tag", "none"), root)


def load_manifest(path: str) -> DatasetManifest:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"malformed document {path}: {exc}") from None
    return manifest_from_coco(doc, root=os.path.dirname(os.path.abspath(path)))


def manifest_to_coco(manifest: DatasetManifest) -> dict:
    images = []
    for im in manifest.images:
        rec = {"id": im.id, "width": im.width, "height": im.height, "file_name": im.path}
        if im.source_image_id is not None:
            rec["source_image_id"] = im.source_image_id
            rec["offset_x"], rec["offset_y"] = im.offset
        images.append(rec)
    return {
        "split_tag": manifest.split_tag,
        "images": images,
        "annotations": [
            {"id": a.id, "image_id": a.image_id, "category_id": CATEGORY_IDS[a.label],
             "bbox": [float(v) for v in a.box], "area": float(a.area), "iscrowd": 0}
            for a in manifest.annotations
        ],
        "categories": [{"id": cid, "name": name} for name, cid in CATEGORY_IDS.items()],
    }


def save_manifest(manifest: DatasetManifest, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(manifest_to_coco(manifest), fh, indent=1, sort_keys=True)


def split_dataset(manifest: DatasetManifest, ratio: float = 0.8, seed: int = 0):
    """Random image-level split; annotations follow their image.

    The train side gets ``floor(ratio * n)`` images (822 at 0.8 -> 657/165).
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio {ratio} outside (0, 1)")
    n = len(manifest.images)
    if n == 0:
        raise ValueError("cannot split an empty manifest")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(ratio * n + 1e-9))
    train_idx = set(perm[:n_train].tolist())

    def subset(indices, tag):
        images = tuple(im for k, im in enumerate(manifest.images) if k in indices)
        ids = {im.id for im in images}
        anns = tuple(a for a in manifest.annotations if a.image_id in ids)
        return DatasetManifest(images, anns, tag, manifest.root)

    val_idx = set(range(n)) - train_idx
    return subset(train_idx, "train"), subset(val_idx, "val")


def crop_patches(manifest: DatasetManifest, patch_size: int = 640,
                 min_visibility: float = 0.5) -> DatasetManifest:
    """Tile every image on a zero-overlap grid and keep non-empty patches.

    Patch records point back at their source image through
    ``source_image_id``/``offset``; ``path`` is the source image path, so
    pixels are cut on demand (see :func:`read_patch`).
    """
    from .slicing import assign_annotations, make_grid

    if patch_size <= 0:
        raise ValueError("patch_size must be positive")
    if not 0.0 < min_visibility <= 1.0:
        raise ValueError("min_visibility must lie in (0, 1]")

    by_image = manifest.annotations_by_image()
    images, anns = [], []
    next_image, next_ann = 1, 1
    for im in manifest.images:
        grid = make_grid(im.width, im.height, patch_size, 0.0)
        for tile, tile_anns in zip(grid.tiles, assign_annotations(grid, by_image[im.id], min_visibility)):
            if not tile_anns:
                continue
            ox, oy = tile.offset
            images.append(ImageRecord(next_image, tile.size[0], tile.size[1], im.path,
                                      source_image_id=im.id, offset=(ox, oy)))
            for a in tile_anns:
                anns.append(replace(a, id=next_ann, image_id=next_image))
                next_ann += 1
            next_image += 1
    if not images:
        log.warning("crop_patches produced no patches (no annotation survived visibility %.2f)",
                    min_visibility)
    return DatasetManifest(tuple(images), tuple(anns), manifest.split_tag, manifest.root)


def read_image(manifest: DatasetManifest, image_id: int) -> np.ndarray:
    """Load an image (or the pixels of a patch record) as ``uint8`` HxWx3."""
    from PIL import Image

    rec = manifest.image(image_id)
    with Image.open(os.path.join(manifest.root, rec.path)) as img:
        arr = np.asarray(img.convert("RGB"))
    if rec.offset is not None:
        ox, oy = rec.offset
        arr = arr[oy:oy + rec.height, ox:ox + rec.width]
    return arr


@dataclass
class AreaHistogram:
    thresholds: list[float]
    counts: list[int]          # len(thresholds) + 1 bins; last bin is ratio >= final threshold
    cumulative: list[float]    # fraction strictly below each threshold
    total: int
    empty: bool = False

    def fraction_below(self, threshold: float) -> float:
        return self.cumulative[self.thresholds.index(threshold)]


def lesion_area_stats(manifest: DatasetManifest,
                      thresholds: Sequence[float] = (SMALL_AREA_RATIO,)) -> AreaHistogram:
    """Histogram of box-area / image-area ratios.

    Bin k counts ratios in ``[t_{k-1}, t_k)``; the final bin holds ratios at or
    above the last threshold, so a whole-image box (ratio 1) lands there.
    """
    thresholds = [float(t) for t in thresholds]
    if any(not 0 < t <= 1 for t in thresholds) or any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly increasing within (0, 1]")
    sizes = {im.id: im.width * im.height for im in manifest.images}
    ratios = np.array([a.area / sizes[a.image_id] for a in manifest.annotations], dtype=np.float64)
    counts = np.bincount(np.searchsorted(thresholds, ratios, side="right"),
                         minlength=len(thresholds) + 1)
    total = int(len(ratios))
    if total == 0:
        return AreaHistogram(thresholds, [0] * (len(thresholds) + 1), [0.0] * len(thresholds), 0, True)
    cum = np.cumsum(counts)[:-1] / total
    return AreaHistogram(thresholds, counts.tolist(), cum.tolist(), total)


def concat_manifests(a: DatasetManifest, b: DatasetManifest) -> DatasetManifest:
    """Concatenate with id renumbering for the second manifest."""
    img_shift = max((im.id for im in a.images), default=0)
    ann_shift = max((x.id for x in a.annotations), default=0)
    images = a.images + tuple(replace(im, id=im.id + img_shift) for im in b.images)
    anns = a.annotations + tuple(replace(x, id=x.id + ann_shift, image_id=x.image_id + img_shift)
                                 for x in b.annotations)
    return DatasetManifest(images, anns, "none", a.root)
