import math

import numpy as np
import pytest

from intrayolo.boxes import CLASSES, Box, Detection
from intrayolo.dataset import Annotation, DatasetManifest, ImageRecord
from intrayolo.evaluation import (METRICS, average_precision, evaluate, parse_report, pr_curve, report,
                                  report_rows)
from oracles import evaluate_ref

W = H = 400


def make_manifest(gts):
    """gts: list of (image_id, label, Box)."""
    ids = sorted({g[0] for g in gts} | {1})
    images = tuple(ImageRecord(i, W, H, f"{i}.png") for i in ids)
    anns = tuple(Annotation(k + 1, i, lab, tuple(b.to_xywh())) for k, (i, lab, b) in enumerate(gts))
    return DatasetManifest(images, anns)


def random_box(rng):
    # sides 8..160 px straddle the 32^2 and 96^2 bucket boundaries
    w, h = np.exp(rng.uniform(np.log(8), np.log(160), 2))
    x, y = rng.uniform(0, W - w), rng.uniform(0, H - h)
    return Box(float(x), float(y), float(x + w), float(y + h))


def jitter(rng, b, scale):
    d = rng.normal(0, scale, 4) * np.array([b.width, b.height, b.width, b.height])
    x0, y0, x1, y1 = np.array(b) + d
    x0, x1 = sorted((min(max(x0, 0), W), min(max(x1, 0), W)))
    y0, y1 = sorted((min(max(y0, 0), H), min(max(y1, 0), H)))
    return Box(float(x0), float(y0), float(max(x1, x0 + 1)), float(max(y1, y0 + 1)))


def random_instance(rng):
    n_img = int(rng.integers(1, 6))
    gts, dets = [], []
    for lab in CLASSES:
        for _ in range(int(rng.integers(0, 6))):
            gts.append((int(rng.integers(1, n_img + 1)), lab, random_box(rng)))
        mine = [g for g in gts if g[1] == lab]
        for _ in range(int(rng.integers(0, 9))):
            if mine and rng.random() < 0.7:
                img, _, b = mine[rng.integers(len(mine))]
                box = jitter(rng, b, 0.12)
            else:
                img, box = int(rng.integers(1, n_img + 1)), random_box(rng)
            dets.append((img, lab, box, float(rng.uniform())))
    return n_img, gts, dets


def run_both(gts, dets, n_img):
    images = tuple(ImageRecord(i, W, H, f"{i}.png") for i in range(1, n_img + 1))
    manifest = DatasetManifest(images, make_manifest(gts).annotations)
    by_image = {}
    for img, lab, box, score in dets:
        by_image.setdefault(img, []).append(Detection(box, lab, score))
    got = evaluate(by_image, manifest)
    ref = evaluate_ref([(i, lab, tuple(b), s) for i, lab, b, s in dets],
                       [(i, lab, tuple(b)) for i, lab, b in gts], CLASSES)
    return got, ref


def same(a, b, tol=1e-6):
    return (math.isnan(a) and math.isnan(b)) or abs(a - b) <= tol


def test_matches_bruteforce_oracle_on_random_instances():
    rng = np.random.default_rng(7)
    for case in range(200):
        n_img, gts, dets = random_instance(rng)
        got, ref = run_both(gts, dets, n_img)
        for m in METRICS:
            assert same(got[m], ref[m]), (case, m, got[m], ref[m])


def test_two_point_curve_gives_half():
    gt = [Box(0, 0, 10, 10)]
    dets = [Detection(Box(50, 50, 60, 60), "caries", 0.9), Detection(Box(0, 0, 10, 10), "caries", 0.8)]
    assert average_precision(dets, gt, 0.5) == 0.5


def test_average_precision_trivial_cases():
    gt = [Box(0, 0, 10, 10)]
    assert average_precision([Detection(Box(0, 0, 10, 10), "caries", 0.7)], gt) == 1.0
    assert average_precision([], gt) == 0.0
    assert math.isnan(average_precision([], []))


def test_perfect_detector_scores_one_everywhere():
    rng = np.random.default_rng(3)
    gts = [(1 + k % 3, CLASSES[k % 2], random_box(rng)) for k in range(12)]
    manifest = make_manifest(gts)
    dets = {}
    for i, lab, b in gts:
        dets.setdefault(i, []).append(Detection(b, lab, 1.0))
    result = evaluate(dets, manifest)
    for m in METRICS:
        for cls in CLASSES:
            v = result.per_class[cls][m]
            assert math.isnan(v) or v == pytest.approx(1.0)
        assert result[m] == pytest.approx(1.0) or math.isnan(result[m])


def test_empty_detections_score_zero():
    gts = [(1, "caries", Box(0, 0, 20, 20)), (1, "mih", Box(50, 50, 200, 200))]
    result = evaluate({}, make_manifest(gts))
    assert result["mAP"] == 0.0
    assert result.per_class["caries"]["AP_small"] == 0.0
    assert math.isnan(result.per_class["caries"]["AP_large"])


def test_class_without_ground_truth_is_left_out_of_mean():
    gts = [(1, "caries", Box(0, 0, 20, 20))]
    dets = {1: [Detection(Box(0, 0, 20, 20), "caries", 0.9), Detection(Box(5, 5, 9, 9), "mih", 0.9)]}
    result = evaluate(dets, make_manifest(gts))
    assert math.isnan(result.per_class["mih"]["mAP"])
    assert result["mAP"] == 1.0


def test_unknown_image_or_category_rejected():
    manifest = make_manifest([(1, "caries", Box(0, 0, 20, 20))])
    with pytest.raises(ValueError, match="unknown image"):
        evaluate({9: []}, manifest)
    with pytest.raises(ValueError, match="unknown category"):
        evaluate([{"image_id": 1, "category_id": 7, "bbox": [0, 0, 1, 1], "score": 0.5}], manifest)


def test_ap_monotone_in_threshold_and_scale_invariant():
    rng = np.random.default_rng(11)
    for _ in range(30):
        n_img, gts, dets = random_instance(rng)
        if not gts:
            continue
        for cls in CLASSES:
            d = [Detection(b, lab, s) for i, lab, b, s in dets if lab == cls and i == 1]
            g = [b for i, lab, b in gts if lab == cls and i == 1]
            if not g:
                continue
            aps = [average_precision(d, g, t) for t in np.linspace(0.5, 0.95, 10)]
            assert all(a >= b - 1e-12 for a, b in zip(aps, aps[1:]))
            scaled = [Detection(x.box, x.label, x.score * 0.5) for x in d]
            assert average_precision(scaled, g) == average_precision(d, g)
            if d:
                top = max(d, key=lambda x: x.score)
                dup = d + [Detection(top.box, top.label, top.score * 0.99)]
                assert average_precision(dup, g) <= average_precision(d, g) + 1e-12


def test_pr_curve_envelope_non_increasing():
    c = pr_curve(np.array([1, 0, 1, 1, 0, 0, 1]), 5)
    assert np.all(np.diff(c.recall) >= 0)
    assert np.all(np.diff(c.envelope) <= 0)


def test_report_layout_and_round_trip():
    gts = [(1, "caries", Box(0, 0, 20, 20)), (1, "mih", Box(50, 50, 100, 90))]
    dets = {1: [Detection(Box(0, 0, 20, 19), "caries", 0.8), Detection(Box(52, 50, 100, 90), "mih", 0.6)]}
    result = evaluate(dets, make_manifest(gts))
    text = report(result, "table2", "ppo")
    assert text.splitlines()[0].split() == ["phi", "mAP", "mAP50", "mAP75", "mAPs", "APm", "mAPL"]
    (name, values), = parse_report(text)
    assert name == "ppo"
    for k, v in values.items():
        if math.isnan(result[k]):
            assert math.isnan(v)
        else:
            assert v == pytest.approx(round(result[k] * 100, 1) / 100, abs=1e-9)
    assert report_rows([("X", result)], "table1").splitlines()[0].split() == ["Model", "mAP", "mAP50", "mAP75"]


def test_report_of_zero_result():
    result = evaluate({}, make_manifest([(1, "caries", Box(0, 0, 20, 20)), (1, "mih", Box(0, 0, 10, 10))]))
    row = report(result, "table2", "none").splitlines()[2].split()
    assert row[1:5] == ["0.0", "0.0", "0.0", "0.0"]
