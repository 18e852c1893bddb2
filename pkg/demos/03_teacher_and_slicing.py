"""Train the patch teacher briefly, then compare full-frame and sliced
inference on held-out scenes."""

import sys
import tempfile

from intrayolo.dataset import read_image, split_dataset
from intrayolo.evaluation import evaluate, report_rows
from intrayolo.inference import DetectorHandle
from intrayolo.model import TOY_CONFIG
from intrayolo.pipeline import TrainSettings, infer, train_teacher
from intrayolo.render import render_overlays
from intrayolo.synth import SynthParams, generate_dataset

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
out = tempfile.mkdtemp()

manifest = generate_dataset(120, SynthParams(seed=1), out)
train, val = split_dataset(manifest, 0.8, seed=1)
print(len(train.images), "train /", len(val.images), "val images")

# 128 px model, trained on 128 px crops of the 256 px scenes
run = train_teacher(train, TOY_CONFIG, TrainSettings(steps=steps, seed=1))
print("loss: first", round(run.metrics[0]["total"], 2), "last", round(run.metrics[-1]["total"], 2))

handle = DetectorHandle(run.trainer.model)
full = evaluate(infer(handle, val, use_slicing=False), val)      # image downscaled to 128
sliced = evaluate(infer(handle, val, use_slicing=True), val)     # 128 tiles at native scale
print(report_rows([("full frame", full), ("sliced", sliced)]))

rec = val.images[0]
dets = handle.detect(read_image(val, rec.id), use_slicing=True, conf_thresh=0.3)
render_overlays(read_image(val, rec.id), dets, f"{out}/sliced.png")
print("wrote", f"{out}/sliced.png")
