import math
import random

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sfpn.detection import (
    COCO_THRESHOLDS, AnchorSet, Detection, decode, evaluate_map, iou, iou_corners, nms,
    write_detections_csv,
)
from sfpn.errors import ConfigError, ValidationError
from sfpn.event_io import GtBox

ANCHORS = AnchorSet.default()


def _zero_heads(n=1, hw=64, classes=2):
    return [torch.zeros(n, 3, 5 + classes, hw // s, hw // s) for s in ANCHORS.strides]


def test_zero_offset_identity():
    heads = _zero_heads()
    for h in heads:
        h[:, :, 4] = -50.0
    heads[0][0, 1, 4, 0, 0] = 50.0
    (dets,) = decode(heads, ANCHORS, 0.3, (64, 64))
    assert len(dets) == 1
    d = dets[0]
    aw, ah = ANCHORS.scales[0][1]
    # anchor (16, 12) centred at (4, 4) spans [-4, 12] x [-2, 10]; clamping keeps [0, 12] x [0, 10]
    assert (aw, ah) == (16.0, 12.0)
    assert d.box == pytest.approx((6.0, 5.0, 12.0, 10.0))
    assert d.score == pytest.approx(0.5)


def test_zero_offset_identity_interior():
    heads = _zero_heads()
    for h in heads:
        h[:, :, 4] = -50.0
    heads[1][0, 0, 4, 1, 2] = 50.0
    (dets,) = decode(heads, ANCHORS, 0.3, (64, 64))
    (d,) = dets
    assert d.box == pytest.approx((2.5 * 16, 1.5 * 16, *ANCHORS.scales[1][0]))


def test_very_negative_confidence_gives_nothing():
    heads = [torch.randn(2, 3, 7, 64 // s, 64 // s) for s in ANCHORS.strides]
    for h in heads:
        h[:, :, 4] = -1e4
    assert decode(heads, ANCHORS, 0.3, (64, 64)) == [[], []]


def decode_oracle(heads, anchors, thr, hw):
    """Per-cell loops with the math module only."""
    H, W = hw
    out = [[] for _ in range(heads[0].shape[0])]
    for d, head in enumerate(heads):
        t = head.tolist()
        stride = anchors.strides[d]
        for i, img in enumerate(t):
            for a, ch in enumerate(img):
                for cy in range(len(ch[0])):
                    for cx in range(len(ch[0][0])):
                        v = [c[cy][cx] for c in ch]
                        logits = v[5:]
                        m = max(logits)
                        exps = [math.exp(z - m) for z in logits]
                        best = exps.index(max(exps))
                        score = 1 / (1 + math.exp(-v[4])) * exps[best] / sum(exps)
                        if score < thr:
                            continue
                        aw, ah = anchors.scales[d][a]
                        x = (1 / (1 + math.exp(-v[0])) + cx) * stride
                        y = (1 / (1 + math.exp(-v[1])) + cy) * stride
                        w, h = aw * math.exp(v[2]), ah * math.exp(v[3])
                        x0, x1 = max(0, x - w / 2), min(W, x + w / 2)
                        y0, y1 = max(0, y - h / 2), min(H, y + h / 2)
                        if x1 > x0 and y1 > y0:
                            out[i].append((best, score, (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0))
    return out


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_decode_matches_brute_force(seed):
    g = torch.Generator().manual_seed(seed)
    heads = [torch.randn(2, 3, 8, 64 // s, 64 // s, generator=g, dtype=torch.float64) for s in ANCHORS.strides]
    got = decode(heads, ANCHORS, 0.2, (64, 64))
    want = decode_oracle(heads, ANCHORS, 0.2, (64, 64))
    assert sum(map(len, want)) > 10
    for dets, ref in zip(got, want):
        assert len(dets) == len(ref)
        for d, r in zip(dets, ref):
            assert d.class_id == r[0]
            assert (d.score, d.x, d.y, d.w, d.h) == pytest.approx(r[1:], abs=1e-9)


def test_iou_examples():
    assert iou((5, 5, 4, 2), (5, 5, 4, 2)) == 1.0
    assert iou_corners((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7)
    assert iou((0, 0, 1, 1), (10, 10, 1, 1)) == 0.0
    assert iou((0, 0, 0, 0), (0, 0, 0, 0)) == 0.0


box = st.tuples(st.floats(0, 50), st.floats(0, 50), st.floats(0, 20), st.floats(0, 20))


def test_iou_of_tiny_identical_boxes_is_capped_at_one():
    a = (1.0, 0.0, 2.477882966318805e-10, 2.477882966318805e-10)
    assert iou(a, a) <= 1.0
    assert iou(a, a) == pytest.approx(1.0)


@settings(max_examples=200)
@given(box, box)
def test_iou_symmetry_and_range(a, b):
    assert iou(a, b) == pytest.approx(iou(b, a), abs=1e-12)
    assert 0.0 <= iou(a, b) <= 1.0 + 1e-12
    if a[2] > 1e-3 and a[3] > 1e-3:
        assert iou(a, a) == pytest.approx(1.0)


def test_nms_examples():
    a = Detection(0, 0.9, 10, 10, 4, 4)
    b = Detection(0, 0.8, 10, 10, 4, 4)
    assert nms([b, a]) == [a]
    far = Detection(0, 0.8, 40, 40, 4, 4)
    other_class = Detection(1, 0.7, 10, 10, 4, 4)
    assert nms([a, far, other_class]) == [a, far, other_class]
    assert nms([]) == []


def test_nms_ties_keep_input_order():
    a = Detection(0, 0.5, 10, 10, 4, 4)
    b = Detection(0, 0.5, 10.5, 10, 4, 4)
    assert nms([a, b]) == [a]
    assert nms([b, a]) == [b]


def nms_reference(dets, thr):
    """O(n^2) textbook loop over a python list."""
    remaining = sorted(dets, key=lambda d: -d.score)
    kept = []
    while remaining:
        best = remaining.pop(0)
        kept.append(best)
        remaining = [d for d in remaining if d.class_id != best.class_id or iou(d.box, best.box) < thr]
    return kept


def _random_dets(rng, n):
    return [Detection(rng.randrange(3), round(rng.random(), 3), rng.uniform(0, 60), rng.uniform(0, 60),
                      rng.uniform(2, 15), rng.uniform(2, 15)) for _ in range(n)]


@pytest.mark.parametrize("seed", range(5))
def test_nms_matches_reference(seed):
    dets = _random_dets(random.Random(seed), 200)
    assert nms(dets, 0.5) == nms_reference(dets, 0.5)
    assert nms(dets, 0.3) == nms_reference(dets, 0.3)


@settings(max_examples=50)
@given(st.integers(0, 60), st.integers(0, 2**31))
def test_nms_idempotent(n, seed):
    dets = _random_dets(random.Random(seed), n)
    once = nms(dets)
    assert nms(once) == once


def _gt(cls, x, y, w, h):
    return GtBox(0, cls, x - w / 2, y - h / 2, w, h)


def test_single_match_and_miss():
    gt = [[_gt(0, 10, 10, 10, 10)]]
    # shifted 2.5 px: overlap 7.5x10 over union 125 gives IoU 0.6
    hit = Detection(0, 0.9, 12.5, 10, 10, 10)
    assert iou(hit.box, (10, 10, 10, 10)) == pytest.approx(0.6)
    assert evaluate_map([[hit]], gt, [0.5])[0] == 1.0
    miss = Detection(0, 0.9, 10 + 70 / 13, 10, 10, 10)  # overlap 60/13 wide: IoU 0.3
    assert iou(miss.box, (10, 10, 10, 10)) == pytest.approx(0.3)
    assert evaluate_map([[miss]], gt, [0.5])[0] == 0.0


def test_five_image_worked_example():
    # One class, one GT per image.  Ranked predictions:
    #   0.9 img0 TP | 0.8 img1 FP (wrong place) | 0.7 img2 TP | 0.6 img3 TP ; img4 has no prediction
    # cumulative TP 1,1,2,3 over 5 GT -> recall .2 .2 .4 .6, precision 1 .5 .667 .75
    # envelope: 1 on (0,.2], .75 on (.2,.6] -> AP = .2*1 + .4*.75 = 0.5
    gts = [[_gt(0, 20, 20, 10, 10)] for _ in range(5)]
    preds = [
        [Detection(0, 0.9, 20, 20, 10, 10)],
        [Detection(0, 0.8, 50, 50, 10, 10)],
        [Detection(0, 0.7, 21, 20, 10, 10)],
        [Detection(0, 0.6, 20, 21, 10, 10)],
        [],
    ]
    map50, _, per_class = evaluate_map(preds, gts, [0.5])
    assert map50 == pytest.approx(0.5) and per_class == {0: pytest.approx(0.5)}


def test_duplicate_detection_counts_as_false_positive():
    gts = [[_gt(0, 20, 20, 10, 10)]]
    preds = [[Detection(0, 0.9, 20, 20, 10, 10), Detection(0, 0.8, 20, 20, 10, 10)]]
    assert evaluate_map(preds, gts, [0.5])[0] == 1.0  # the FP ranks after full recall
    preds = [[Detection(0, 0.9, 20, 20, 10, 10), Detection(0, 0.95, 20, 20, 10, 10)]]
    assert evaluate_map(preds, gts, [0.5])[0] == 1.0


def test_map_range_uses_ten_thresholds():
    assert len(COCO_THRESHOLDS) == 10 and COCO_THRESHOLDS[0] == 0.5 and COCO_THRESHOLDS[-1] == 0.95
    gts = [[_gt(0, 20, 20, 10, 10)]]
    # IoU 7.4 / 12.6 = 0.587 -> matched at 0.5 and 0.55 only
    preds = [[Detection(0, 0.9, 22.6, 20, 10, 10)]]
    map50, map_range, _ = evaluate_map(preds, gts)
    assert map50 == 1.0 and map_range == pytest.approx(0.2)


def test_no_ground_truth_is_an_error():
    with pytest.raises(ValidationError):
        evaluate_map([[Detection(0, 0.9, 1, 1, 1, 1)]], [[]])
    with pytest.raises(ValidationError):
        evaluate_map([[]], [[], []])


def test_empty_predictions_score_zero():
    assert evaluate_map([[], []], [[_gt(0, 5, 5, 4, 4)], [_gt(1, 9, 9, 4, 4)]])[:2] == (0.0, 0.0)


def _random_problem(rng, n_img=6):
    gts, preds = [], []
    for _ in range(n_img):
        g = [(rng.randrange(2), (rng.uniform(5, 55), rng.uniform(5, 55), rng.uniform(4, 12), rng.uniform(4, 12)))
             for _ in range(rng.randrange(1, 4))]
        p = []
        for c, (x, y, w, h) in g:
            if rng.random() < 0.7:
                p.append(Detection(c, rng.random(), x + rng.uniform(-2, 2), y + rng.uniform(-2, 2), w, h))
        p += _random_dets(rng, rng.randrange(3))
        gts.append(g)
        preds.append([d for d in p if d.class_id < 2])
    return preds, gts


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_map_permutation_invariant(seed):
    rng = random.Random(seed)
    preds, gts = _random_problem(rng)
    order = list(range(len(preds)))
    rng.shuffle(order)
    a = evaluate_map(preds, gts)
    b = evaluate_map([preds[i] for i in order], [gts[i] for i in order])
    assert a[0] == pytest.approx(b[0]) and a[1] == pytest.approx(b[1])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_adding_top_scored_correct_detection_never_hurts(seed):
    rng = random.Random(seed)
    preds, gts = _random_problem(rng)
    before = evaluate_map(preds, gts, [0.5])[2]
    # choose a GT that no prediction currently covers
    for img, g in enumerate(gts):
        for c, b in g:
            if all(iou(d.box, b) < 0.5 or d.class_id != c for d in preds[img]):
                extra = [list(p) for p in preds]
                extra[img].append(Detection(c, 2.0, *b))
                after = evaluate_map(extra, gts, [0.5])[2]
                assert after[c] >= before[c] - 1e-12
                return


def test_default_anchor_set():
    assert ANCHORS.k == 3
    assert ANCHORS.scales[0] == ((8.0, 8.0), (16.0, 12.0), (24.0, 24.0))
    assert ANCHORS.scales[2][2] == (96.0, 96.0)
    with pytest.raises(ConfigError):
        AnchorSet.default(k=4)


def test_kmeans_anchors_sorted_by_area():
    rng = np.random.default_rng(0)
    wh = np.concatenate([rng.normal(m, 1, (40, 2)) for m in (5, 10, 20, 30, 40, 50, 60, 70, 80)])
    anchors = AnchorSet.from_kmeans(np.abs(wh), k=3, seed=0)
    areas = [w * h for group in anchors.scales for w, h in group]
    assert areas == sorted(areas)
    with pytest.raises(ConfigError):
        AnchorSet.from_kmeans([(1, 1)] * 4)


def test_detections_csv(tmp_path):
    write_detections_csv(tmp_path / "d.csv", [[Detection(1, 0.5, 1, 2, 3, 4)], []])
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines == ["image_id,class_id,score,x,y,w,h", "0,1,0.500000,1.000,2.000,3.000,4.000"]
