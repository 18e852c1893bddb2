"""Box utilities and the tiling grid on a toy scene."""

import numpy as np

from intrayolo.boxes import Box, Detection, greedy_match, iou, nms
from intrayolo.slicing import make_grid, merge_detections, remap

a, b = Box(0, 0, 10, 10), Box(5, 5, 15, 15)
print("iou:", round(iou(a, b), 4))                 # 25 / 175

dets = [Detection(Box(10, 10, 30, 30), "caries", 0.9),
        Detection(Box(12, 11, 31, 30), "caries", 0.8),   # duplicate of the first
        Detection(Box(12, 11, 31, 30), "mih", 0.7),      # other class survives class-aware NMS
        Detection(Box(60, 60, 70, 72), "caries", 0.4)]
print("nms (class-aware):", [(d.label, d.score) for d in nms(dets, 0.5)])
print("nms (agnostic):   ", [(d.label, d.score) for d in nms(dets, 0.5, class_aware=False)])

gts = [(Box(10, 10, 30, 30), "caries"), (Box(60, 60, 70, 70), "caries")]
print("greedy match:", greedy_match(dets, gts, 0.5))

# a 1280 x 1280 frame cut into 640 tiles with 20% overlap; the last column
# and row are shifted back to stay inside the image
grid = make_grid(1280, 1280, 640, 0.2)
print("tiles:", len(grid.tiles), "x offsets:", sorted({t.offset[0] for t in grid.tiles}))

# detections found in two overlapping tiles merge back into one
local = [Detection(Box(600, 100, 630, 130), "caries", 0.9), Detection(Box(88, 100, 118, 130), "caries", 0.7)]
glob = [remap(local[0], (0, 0)), remap(local[1], (512, 0))]
print("merged:", merge_detections(glob))

cover = np.zeros((1280, 1280), np.int32)
for t in grid.tiles:
    x, y = t.offset
    w, h = t.size
    cover[y:y + h, x:x + w] += 1
print("coverage min/max:", cover.min(), cover.max())
