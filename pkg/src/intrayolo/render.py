"""Detection overlays: caries in blue, MIH in yellow."""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from .boxes import Detection

log = logging.getLogger(__name__)

COLORS = {"caries": (0, 0, 255), "mih": (255, 255, 0)}
STROKE = 2
_PAD = 2


def render_overlays(image: np.ndarray, dets: Sequence[Detection], out: str | None = None,
                    labels: bool = True) -> np.ndarray:
    """Draw each detection as a 2-pixel rectangle with a score tab on its
    top-left corner. Boxes leaving the image are clipped with a warning.
    Writes a PNG when ``out`` is given and returns the annotated pixels."""
    canvas = Image.fromarray(np.ascontiguousarray(image[..., :3]).astype(np.uint8))
    h, w = image.shape[:2]
    draw = ImageDraw.Draw(canvas)
    for d in dets:
        color = COLORS[d.label]
        b = d.box.clip(w, h)
        if b != d.box:
            log.warning("box %s leaves the %dx%d image; clipped", tuple(round(v, 1) for v in d.box), w, h)
        if b.degenerate:
            continue
        x0, y0 = int(round(b.x_min)), int(round(b.y_min))
        x1, y1 = min(int(round(b.x_max)), w) - 1, min(int(round(b.y_max)), h) - 1
        if x1 < x0 or y1 < y0:
            continue
        draw.rectangle((x0, y0, x1, y1), outline=color, width=STROKE)
        if labels:
            # darkened tab: pure class colour stays reserved for the stroke
            text = f"{d.score:.2f}"
            tx0, ty0, tx1, ty1 = draw.textbbox((0, 0), text)
            tw, th = tx1 - tx0 + 2 * _PAD, ty1 - ty0 + 2 * _PAD
            top = y0 - th if y0 - th >= 0 else y0
            right = min(x0 + tw, w) - 1
            draw.rectangle((x0, top, right, top + th), fill=tuple(int(v * 0.6) for v in color))
            draw.text((x0 + _PAD - tx0, top + _PAD - ty0), text, fill=(255, 255, 255))
    if out is not None:
        canvas.save(out, format="PNG")
    return np.asarray(canvas)
