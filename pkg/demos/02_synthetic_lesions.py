"""Synthetic intraoral scenes and their lesion-size distribution."""

import sys
import tempfile

import numpy as np

from intrayolo.boxes import Box, Detection
from intrayolo.dataset import SMALL_AREA_RATIO, lesion_area_stats, read_image
from intrayolo.render import render_overlays
from intrayolo.synth import SynthParams, generate_dataset

out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp()
params = SynthParams(seed=0)
manifest = generate_dataset(400, params, out)

stats = lesion_area_stats(manifest)
print(f"{stats.total} lesions on {len(manifest.images)} images")
print(f"fraction below {SMALL_AREA_RATIO:.2%} of the image area: {stats.fraction_below(SMALL_AREA_RATIO):.3f}")

labels = [a.label for a in manifest.annotations]
print("class counts:", {c: labels.count(c) for c in sorted(set(labels))})

areas = np.array([a.box[2] * a.box[3] for a in manifest.annotations])
print("box side (px) quartiles:", np.round(np.sqrt(np.percentile(areas, [25, 50, 75])), 1))

# ground truth drawn as score-1 detections on the first scene
rec = manifest.images[0]
gts = [Detection(Box(*a.xyxy), a.label, 1.0) for a in manifest.annotations if a.image_id == rec.id]
render_overlays(read_image(manifest, rec.id), gts, f"{out}/scene0_gt.png")
print("wrote", f"{out}/scene0_gt.png")
