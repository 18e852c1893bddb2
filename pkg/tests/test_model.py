import math

import numpy as np
import pytest
import torch

from intrayolo.boxes import Box, iou
from intrayolo.model import (SPAFPN, SYOLO, TOY_CONFIG, HeadOutput, ModelConfig, NonFiniteLossError,
                             SSMAttention, Target, Trainer, decode_predictions, detection_loss,
                             spafpn_forward, ssm_attention)


def fd_rel_error(fn, params, h=1e-6):
    """Worst norm-wise relative error between autograd and central differences."""
    for p in params:
        p.grad = None
    fn().backward()
    worst = 0.0
    for p in params:
        analytic = p.grad.detach().clone().reshape(-1)
        numeric = torch.zeros_like(analytic)
        flat = p.data.reshape(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + h
                up = fn().item()
                flat[i] = old - h
                down = fn().item()
                flat[i] = old
            numeric[i] = (up - down) / (2 * h)
        scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
        worst = max(worst, (analytic - numeric).norm().item() / scale)
    return worst


def zero_biases(module):
    for m in module.modules():
        if isinstance(m, torch.nn.Conv2d) and m.bias is not None:
            torch.nn.init.zeros_(m.bias)


# ---------------------------------------------------------------- neck

def test_pyramid_sizes_at_640():
    neck = SPAFPN((32, 64, 128, 256), 16)
    feats = [torch.randn(1, c, 640 // s, 640 // s) for c, s in zip((32, 64, 128, 256), (4, 8, 16, 32))]
    out = spafpn_forward(feats, neck)
    assert [tuple(p.shape[-2:]) for p in out] == [(160, 160), (80, 80), (40, 40), (20, 20)]
    assert all(p.shape[1] == 16 for p in out)


@pytest.mark.parametrize("size", [64, 128, 256])
def test_pyramid_shape_contract_full_model(size):
    torch.manual_seed(0)
    cfg = ModelConfig(input_size=size, backbone_channels=(8, 8, 16, 16), neck_width=8)
    levels = SYOLO(cfg).pyramid(torch.rand(2, 3, size, size))
    for p, s in zip(levels, cfg.strides):
        assert p.shape[-1] * s == size and p.shape[-2] * s == size


def test_zero_features_give_zero_pyramid():
    neck = SPAFPN((4, 6, 8, 10), 5)
    zero_biases(neck)
    feats = [torch.zeros(1, c, 32 // 2 ** k, 32 // 2 ** k) for k, c in enumerate((4, 6, 8, 10))]
    assert all(torch.count_nonzero(p) == 0 for p in neck(feats))


def test_c2_pixel_reaches_p5():
    torch.manual_seed(1)
    neck = SPAFPN((4, 6, 8, 10), 5).double()
    feats = [torch.randn(1, c, 64 // 2 ** k, 64 // 2 ** k, dtype=torch.float64) for k, c in enumerate((4, 6, 8, 10))]
    base = neck(feats)
    bumped = [f.clone() for f in feats]
    bumped[0][0, :, 20, 20] += 1.0
    out = neck(bumped)
    d2 = (out[0] - base[0]).abs().sum(1)[0]
    assert d2[20, 20] > 0
    assert d2[0, 0] == 0 and d2[-1, -1] == 0       # the change stays local on P2
    assert (out[3] - base[3]).abs().max() > 0


def test_neck_shape_errors():
    neck = SPAFPN((4, 6, 8, 10), 5)
    good = [torch.zeros(1, c, 32 // 2 ** k, 32 // 2 ** k) for k, c in enumerate((4, 6, 8, 10))]
    with pytest.raises(ValueError):
        neck(good[1:])
    bad = list(good)
    bad[1] = torch.zeros(1, 7, 16, 16)
    with pytest.raises(ValueError):
        neck(bad)
    bad = list(good)
    bad[0] = torch.zeros(1, 4, 30, 30)
    with pytest.raises(ValueError):
        neck(bad)


def test_spafpn_gradient_matches_finite_differences():
    torch.manual_seed(2)
    neck = SPAFPN((2, 3, 3, 4), 2).double()
    feats = [torch.randn(1, c, 8 // 2 ** k, 8 // 2 ** k, dtype=torch.float64)
             for k, c in enumerate((2, 3, 3, 4))]
    weights = [torch.randn_like(p) for p in neck(feats)]

    def loss():
        return sum((w * p).sum() for w, p in zip(weights, neck(feats)))

    params = [neck.lateral[0].weight, neck.smooth[0][0].weight, neck.down[2][0].weight, neck.smooth[3][0].bias]
    assert fd_rel_error(loss, params) <= 1e-4


# ----------------------------------------------------------------- SSM

def test_ssm_zero_input_and_shape():
    torch.manual_seed(3)
    blk = SSMAttention(5, 3)
    assert torch.equal(ssm_attention(torch.zeros(2, 5, 7, 3), blk), torch.zeros(2, 5, 7, 3))
    x = torch.randn(1, 5, 6, 11)
    assert ssm_attention(x, blk).shape == x.shape


def test_ssm_scan_matches_explicit_recurrence():
    torch.manual_seed(4)
    blk = SSMAttention(3, 2).double()
    x = torch.randn(1, 3, 4, 5, dtype=torch.float64)
    decay, gain_in = blk.decay(), blk.delta[..., None] * blk.b

    def run(seq, d):
        # seq (C, L) along the scan direction
        h = torch.zeros(3, 2, dtype=torch.float64)
        ys = []
        for t in range(seq.shape[1]):
            h = decay[d] * h + gain_in[d] * seq[:, t, None]
            ys.append((blk.c[d] * h).sum(-1))
        return torch.stack(ys, 1)

    ref = torch.zeros_like(x)
    for r in range(4):
        row = x[0, :, r, :]
        ref[0, :, r, :] += run(row, 0) + run(row.flip(1), 1).flip(1)
    for c in range(5):
        col = x[0, :, :, c]
        ref[0, :, :, c] += run(col, 2) + run(col.flip(1), 3).flip(1)
    assert torch.allclose(blk.scan(x), ref, atol=1e-12)


def test_ssm_gradient_matches_finite_differences():
    torch.manual_seed(5)
    blk = SSMAttention(2, 3).double()
    x = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    w = torch.randn(1, 2, 4, 4, dtype=torch.float64)

    def loss():
        return (w * ssm_attention(x, blk)).sum()

    assert fd_rel_error(loss, [blk.a_raw, blk.b, blk.c, blk.delta_raw]) <= 1e-4


@pytest.mark.parametrize("sign", [1.0, -1.0])
def test_ssm_decay_stays_inside_unit_interval(sign):
    # push every decay hard towards 1 (sign +1) or 0 (sign -1)
    torch.manual_seed(6)
    blk = SSMAttention(4, 8)
    opt = torch.optim.Adam(blk.parameters(), lr=0.05)
    x = torch.randn(1, 4, 8, 8)
    for _ in range(100):
        loss = -sign * blk.decay().sum() + blk(x).pow(2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        d = blk.decay()
        assert bool((d > 0).all()) and bool((d < 1).all())


def test_ssm_decay_inside_unit_interval_during_detector_training():
    trainer = Trainer(ModelConfig(input_size=64, backbone_channels=(8, 8, 16, 16), neck_width=8),
                      seed=0, lr=1e-2, total_steps=100, warmup_steps=0)
    rng = np.random.default_rng(0)
    img = rng.integers(0, 255, (64, 64, 3), dtype=np.uint8)
    tg = [Target(Box(10, 10, 22, 20), "caries")]
    for _ in range(100):
        trainer.train_step([img], [tg])
        for blk in trainer.model.ssm:
            d = blk.decay()
            assert bool((d > 0).all()) and bool((d < 1).all())


# -------------------------------------------------------------- decode

def blank_head(size=32, strides=(8,), dtype=torch.float64, fill=-30.0):
    cls, obj, reg = [], [], []
    for s in strides:
        n = size // s
        cls.append(torch.full((1, 2, n, n), fill, dtype=dtype))
        obj.append(torch.full((1, 1, n, n), fill, dtype=dtype))
        reg.append(torch.zeros((1, 4, n, n), dtype=dtype))
    return HeadOutput(cls, obj, reg, tuple(strides))


def test_decode_zero_logits_cell():
    head = blank_head()
    head.cls[0][0, :, 0, 0] = 0.0
    head.obj[0][0, 0, 0, 0] = 0.0
    (dets,) = decode_predictions(head, conf_thresh=0.1)
    assert len(dets) == 1
    d = dets[0]
    assert d.box == Box(0, 0, 8, 8)
    assert d.score == pytest.approx(0.25)
    assert decode_predictions(head, conf_thresh=1.0) == [[]]


def test_decode_caps_runaway_size_logits():
    head = blank_head()
    head.cls[0][0, :, 0, 0] = 0.0
    head.obj[0][0, 0, 0, 0] = 0.0
    head.reg[0][0, 2:, 0, 0] = 200.0                 # exp overflows float32
    (dets,) = decode_predictions(head, conf_thresh=0.1)
    assert len(dets) == 1 and all(math.isfinite(v) for v in dets[0].box)


def test_decode_two_overlapping_cells_then_nms():
    head = blank_head()
    # cell (0,0): wide box, strong; cell (0,1): shifted by dx so it overlaps
    head.obj[0][0, 0, 0, 0] = 2.0
    head.cls[0][0, 0, 0, 0] = 1.0
    head.reg[0][0, 2, 0, 0] = math.log(2.0)
    head.obj[0][0, 0, 0, 1] = 1.0
    head.cls[0][0, 0, 0, 1] = 1.0
    head.reg[0][0, 0, 0, 1] = -1.0
    head.reg[0][0, 2, 0, 1] = math.log(2.0)

    sig = lambda v: 1 / (1 + math.exp(-v))
    cx1 = (1 + 0.5 + 4 * (sig(-1.0) - 0.5)) * 8
    b0, b1 = Box(-4, 0, 12, 8), Box(cx1 - 8, 0, cx1 + 8, 8)
    s0, s1 = sig(2.0) * sig(1.0), sig(1.0) * sig(1.0)
    assert iou(b0, b1) > 0.5
    (raw,) = decode_predictions(head, conf_thresh=0.1, nms_iou=None)
    assert [(d.label, round(d.score, 12)) for d in raw] == [("caries", round(s0, 12)), ("caries", round(s1, 12))]
    assert np.allclose(raw[1].box, b1, atol=1e-9)
    (kept,) = decode_predictions(head, conf_thresh=0.1, nms_iou=0.5)
    assert len(kept) == 1 and np.allclose(kept[0].box, b0) and kept[0].score == pytest.approx(s0)
    (loose,) = decode_predictions(head, conf_thresh=0.1, nms_iou=iou(b0, b1) + 0.01)
    assert len(loose) == 2


# ---------------------------------------------------------------- loss

LOSS_CFG = ModelConfig(input_size=64, backbone_channels=(8, 8, 16, 16), neck_width=8)


def test_loss_with_zero_targets():
    torch.manual_seed(7)
    head = blank_head(64, LOSS_CFG.strides, fill=0.0)
    for o in head.obj:
        o.normal_()
    out = detection_loss(head, [[]], LOSS_CFG)
    assert out["iou_loss"] == 0 and out["cls_loss"] == 0
    allobj = torch.cat([o.reshape(-1) for o in head.obj])
    expect = torch.nn.functional.binary_cross_entropy_with_logits(allobj, torch.zeros_like(allobj), reduction="sum")
    assert out["obj_loss"].item() == pytest.approx(expect.item(), rel=1e-12)


def perfect_head(target: Target, big=40.0):
    """Head whose positive cells decode exactly onto ``target`` with saturated logits."""
    head = blank_head(64, LOSS_CFG.strides, fill=-big)
    cls, obj, reg, grid = head.flat()
    from intrayolo.model import assign
    cells, _ = assign([target], grid, LOSS_CFG)
    x0, y0, x1, y1 = target.box
    cx, cy, w, h = (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0
    k = 0 if target.label == "caries" else 1
    offsets = np.cumsum([0] + [c.shape[-1] * c.shape[-2] for c in head.cls])
    for cell in cells.tolist():
        col, row, s = grid[cell].tolist()
        lvl = int(np.searchsorted(offsets, cell, side="right") - 1)
        fx = (cx / s - col - 0.5) / 4 + 0.5
        fy = (cy / s - row - 0.5) / 4 + 0.5
        head.reg[lvl][0, :, row, col] = torch.tensor([math.log(fx / (1 - fx)), math.log(fy / (1 - fy)),
                                                      math.log(w / s), math.log(h / s)], dtype=torch.float64)
        head.obj[lvl][0, 0, row, col] = big
        head.cls[lvl][0, k, row, col] = big
    return head, len(cells)


def test_perfect_fit_limit_and_decode_consistency():
    target = Target(Box(8, 8, 24, 24), "mih")
    losses = []
    for big in (10.0, 20.0, 40.0):
        head, n_pos = perfect_head(target, big)
        assert n_pos > 1
        out = detection_loss(head, [[target]], LOSS_CFG)
        assert out["iou_loss"].item() == pytest.approx(0.0, abs=1e-12)
        losses.append(out["total"].item())
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-12
    (dets,) = decode_predictions(head, conf_thresh=0.5, nms_iou=None)
    assert len(dets) == n_pos
    assert all(iou(d.box, target.box) == pytest.approx(1.0, abs=1e-12) and d.label == "mih" for d in dets)


def test_doubling_weight_doubles_iou_term():
    torch.manual_seed(8)
    head = blank_head(64, LOSS_CFG.strides, fill=0.0)
    for r in head.reg:
        r.normal_(0, 0.3)
    a, b = Target(Box(5, 5, 19, 15), "caries"), Target(Box(30, 30, 60, 58), "mih")
    base = detection_loss(head, [[a, b]], LOSS_CFG, weights=[[1.0, 1.0]])
    only_b = detection_loss(head, [[b]], LOSS_CFG)
    doubled = detection_loss(head, [[a, b]], LOSS_CFG, weights=[[2.0, 1.0]])
    a_part = base["iou_loss"] - only_b["iou_loss"]
    assert a_part > 0
    assert (doubled["iou_loss"] - only_b["iou_loss"]).item() == pytest.approx(2 * a_part.item(), rel=1e-12)


def test_loss_rejects_degenerate_target_and_batch_mismatch():
    head = blank_head(64, LOSS_CFG.strides)
    with pytest.raises(ValueError, match="non-positive area"):
        detection_loss(head, [[Target(Box(5, 5, 5, 10), "caries")]], LOSS_CFG)
    with pytest.raises(ValueError):
        detection_loss(head, [[], []], LOSS_CFG)


def test_detection_loss_gradient_matches_finite_differences():
    torch.manual_seed(9)
    cfg = ModelConfig(input_size=32, backbone_channels=(4, 4, 4, 4), neck_width=4, ssm_state_dim=2)
    model = SYOLO(cfg).double()
    images = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    target = Target(Box(6.0, 7.0, 17.0, 15.0), "caries")

    def loss():
        return detection_loss(model(images), [[target]], cfg)["total"]

    head = model.heads[0]
    params = [head.cls_pred.weight, head.cls_pred.bias, head.obj_pred.bias, head.reg_pred.weight,
              head.reg_pred.bias, head.reg_branch[0].weight]
    assert fd_rel_error(loss, params) <= 1e-4


# ------------------------------------------------------------ training

TRAIN_CFG = ModelConfig(input_size=64, backbone_channels=(8, 8, 16, 16), neck_width=8)


def batch(seed=0):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 255, (64, 64, 3), dtype=np.uint8)
    return [img], [[Target(Box(4, 4, 20, 16), "caries"), Target(Box(30, 34, 50, 60), "mih")]]


def test_zero_learning_rate_leaves_parameters_unchanged():
    trainer = Trainer(TRAIN_CFG, seed=0, lr=0.0, total_steps=5)
    before = {k: v.clone() for k, v in trainer.model.state_dict().items()}
    for _ in range(3):
        trainer.train_step(*batch())
    after = trainer.model.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_same_seed_gives_bit_identical_trajectory():
    def run():
        t = Trainer(TRAIN_CFG, seed=3, lr=1e-3, total_steps=10)
        return [t.train_step(*batch())["total"] for _ in range(6)]

    assert run() == run()


def test_non_finite_loss_aborts_with_diagnostics():
    trainer = Trainer(TRAIN_CFG, seed=0)

    def bad_loss(head, targets, pseudo):
        out = detection_loss(head, targets, TRAIN_CFG)
        out["cls_loss"] = out["cls_loss"] * float("nan")
        out["total"] = out["total"] + out["cls_loss"]
        return out

    with pytest.raises(NonFiniteLossError) as exc:
        trainer.train_step(*batch(), batch_id=17, loss_fn=bad_loss)
    assert exc.value.batch_id == 17
    assert math.isnan(exc.value.components["cls_loss"])
    assert "batch 17" in str(exc.value)


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    trainer = Trainer(TRAIN_CFG, seed=1, total_steps=10)
    trainer.train_step(*batch())
    p1, p2 = tmp_path / "a.pt", tmp_path / "b.pt"
    trainer.save(str(p1), extra={"note": 1})
    loaded, extra = Trainer.load(str(p1))
    assert extra == {"note": 1}
    loaded.save(str(p2), extra=extra)
    assert p1.read_bytes() == p2.read_bytes()
    # training continues identically from the restored state
    torch_state = torch.get_rng_state()
    a = trainer.train_step(*batch(1))["total"]
    torch.set_rng_state(torch_state)
    b = loaded.train_step(*batch(1))["total"]
    assert a == b


def test_input_size_must_be_multiple_of_32():
    with pytest.raises(ValueError):
        ModelConfig(input_size=100)
    with pytest.raises(ValueError):
        SYOLO(TOY_CONFIG)(torch.zeros(1, 3, 100, 128))
