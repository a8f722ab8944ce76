"""Anchor decoding, IoU, greedy per-class NMS, and all-point interpolated mAP."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import ConfigError, ValidationError
from .event_io import GtBox

STRIDES = (8, 16, 32)
BASE_ANCHORS = ((8.0, 8.0), (16.0, 12.0), (24.0, 24.0))
SCALE_MULTIPLIERS = (1, 2, 4)
COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class AnchorSet:
    """``scales[d]`` holds the K (w, h) anchor sizes in pixels for stride ``strides[d]``."""

    scales: tuple[tuple[tuple[float, float], ...], ...]
    strides: tuple[int, ...] = STRIDES

    def __post_init__(self):
        if len(self.scales) != len(self.strides):
            raise ConfigError("one anchor group per stride required")
        ks = {len(s) for s in self.scales}
        if len(ks) != 1:
            raise ConfigError("every scale must have the same number of anchors")

    @property
    def k(self) -> int:
        return len(self.scales[0])

    def all_anchors(self) -> list[tuple[int, int, float, float]]:
        """Flat list of ``(scale, anchor index, w, h)``."""
        return [(d, a, w, h) for d, group in enumerate(self.scales) for a, (w, h) in enumerate(group)]

    @classmethod
    def default(cls, scale_factor: float = 1.0, k: int = 3):
        if k != len(BASE_ANCHORS):
            raise ConfigError(f"default anchors come in groups of {len(BASE_ANCHORS)}, got k={k}")
        return cls(tuple(
            tuple((w * m * scale_factor, h * m * scale_factor) for w, h in BASE_ANCHORS)
            for m in SCALE_MULTIPLIERS
        ))

    @classmethod
    def from_kmeans(cls, boxes: Sequence[tuple[float, float]], k: int = 3, seed: int = 0, iters: int = 100):
        """Cluster GT (w, h) with ``1 - IoU`` distance into ``k * 3`` anchors, smallest to the finest scale."""
        wh = np.asarray(boxes, dtype=np.float64).reshape(-1, 2)
        n = k * len(STRIDES)
        if len(wh) < n:
            raise ConfigError(f"k-means needs at least {n} boxes, got {len(wh)}")
        rng = np.random.default_rng(seed)
        centers = wh[rng.choice(len(wh), n, replace=False)]
        for _ in range(iters):
            assign = np.argmax(_shape_iou(wh, centers), axis=1)
            new = np.array([
                np.median(wh[assign == j], axis=0) if np.any(assign == j) else centers[j] for j in range(n)
            ])
            if np.allclose(new, centers):
                break
            centers = new
        centers = centers[np.argsort(centers[:, 0] * centers[:, 1])]
        return cls(tuple(
            tuple((float(w), float(h)) for w, h in centers[d * k:(d + 1) * k]) for d in range(len(STRIDES))
        ))


def _shape_iou(wh, centers):
    inter = np.minimum(wh[:, None, 0], centers[None, :, 0]) * np.minimum(wh[:, None, 1], centers[None, :, 1])
    union = wh[:, None, 0] * wh[:, None, 1] + centers[None, :, 0] * centers[None, :, 1] - inter
    return inter / np.maximum(union, 1e-12)


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    x: float  # box center
    y: float
    w: float
    h: float

    @property
    def box(self):
        return (self.x, self.y, self.w, self.h)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def decode(heads, anchors: AnchorSet, score_threshold: float, image_hw: tuple[int, int]) -> list[list[Detection]]:
    """Turn per-scale head tensors ``(N, K, C+5, h, w)`` into detections per image.

    Only the best class of each anchor is emitted; boxes are clamped to the image.
    """
    H, W = image_hw
    out = None
    for d, head in enumerate(heads):
        t = head.detach().cpu().double().numpy() if torch.is_tensor(head) else np.asarray(head, dtype=np.float64)
        n, k, ch, gh, gw = t.shape
        if out is None:
            out = [[] for _ in range(n)]
        stride = anchors.strides[d]
        cls_logits = t[:, :, 5:]
        cls_logits = cls_logits - cls_logits.max(axis=2, keepdims=True)
        probs = np.exp(cls_logits)
        probs /= probs.sum(axis=2, keepdims=True)
        best = probs.argmax(axis=2)
        score = _sigmoid(t[:, :, 4]) * np.take_along_axis(probs, best[:, :, None], axis=2)[:, :, 0]
        keep = np.argwhere(score >= score_threshold)
        for i, a, cy, cx in keep:
            aw, ah = anchors.scales[d][a]
            tx, ty, tw, th = t[i, a, :4, cy, cx]
            x = (_sigmoid(tx) + cx) * stride
            y = (_sigmoid(ty) + cy) * stride
            w = aw * math.exp(min(tw, 20.0))
            h = ah * math.exp(min(th, 20.0))
            x0, y0 = max(0.0, x - w / 2), max(0.0, y - h / 2)
            x1, y1 = min(float(W), x + w / 2), min(float(H), y + h / 2)
            if x1 <= x0 or y1 <= y0:
                continue
            out[i].append(Detection(int(best[i, a, cy, cx]), float(score[i, a, cy, cx]),
                                    (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0))
    return out or []


def iou(a, b) -> float:
    """IoU of two center-format ``(x, y, w, h)`` boxes; 0 when the union is empty."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw / 2, bx + bw / 2) - max(ax - aw / 2, bx - bw / 2)
    ih = min(ay + ah / 2, by + bh / 2) - max(ay - ah / 2, by - bh / 2)
    # edge rounding can push the overlap of near-identical tiny boxes past their own area
    inter = min(max(iw, 0.0) * max(ih, 0.0), aw * ah, bw * bh)
    union = aw * ah + bw * bh - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_corners(a, b) -> float:
    """IoU of corner-format ``(x0, y0, x1, y1)`` boxes."""
    return iou(((a[0] + a[2]) / 2, (a[1] + a[3]) / 2, a[2] - a[0], a[3] - a[1]),
               ((b[0] + b[2]) / 2, (b[1] + b[3]) / 2, b[2] - b[0], b[3] - b[1]))


def _iou_matrix(boxes: np.ndarray, others: np.ndarray) -> np.ndarray:
    a0 = boxes[:, None, :2] - boxes[:, None, 2:] / 2
    a1 = boxes[:, None, :2] + boxes[:, None, 2:] / 2
    b0 = others[None, :, :2] - others[None, :, 2:] / 2
    b1 = others[None, :, :2] + others[None, :, 2:] / 2
    wh = np.clip(np.minimum(a1, b1) - np.maximum(a0, b0), 0, None)
    area_a = boxes[:, None, 2] * boxes[:, None, 3]
    area_b = others[None, :, 2] * others[None, :, 3]
    inter = np.minimum(wh[..., 0] * wh[..., 1], np.minimum(area_a, area_b))
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy per-class suppression; kept detections come out in descending score order."""
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)  # stable on ties
    boxes = np.array([dets[i].box for i in order], dtype=np.float64)
    classes = np.array([dets[i].class_id for i in order])
    overlap = _iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(order), dtype=bool)
    kept = []
    for r in range(len(order)):
        if suppressed[r]:
            continue
        kept.append(dets[order[r]])
        suppressed |= (classes == classes[r]) & (overlap[r] >= iou_threshold)
    return kept


# -- evaluation -----------------------------------------------------------------


def _gt_box(g):
    if isinstance(g, GtBox):
        return g.class_id, (g.x + g.w / 2, g.y + g.h / 2, g.w, g.h)
    return g


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the monotone precision envelope (all-point interpolation)."""
    r = np.concatenate([[0.0], recall, [1.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    idx = np.nonzero(r[1:] != r[:-1])[0]
    return float(np.sum((r[idx + 1] - r[idx]) * p[idx + 1]))


def _class_ap(preds, gts, cls, thr):
    scored = []
    n_gt = 0
    gt_boxes = []
    for img, (p_img, g_img) in enumerate(zip(preds, gts)):
        boxes = [b for c, b in g_img if c == cls]
        gt_boxes.append(boxes)
        n_gt += len(boxes)
        scored.extend((d.score, img, j, d.box) for j, d in enumerate(p_img) if d.class_id == cls)
    if n_gt == 0:
        return None
    scored.sort(key=lambda s: (-s[0], s[1], s[2]))
    used = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
    tp = np.zeros(len(scored))
    for i, (_, img, _, box) in enumerate(scored):
        best, best_j = thr, -1
        for j, g in enumerate(gt_boxes[img]):
            if used[img][j]:
                continue
            o = iou(box, g)
            if o >= best:
                best, best_j = o, j
        if best_j >= 0:
            used[img][best_j] = True
            tp[i] = 1
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(scored) + 1)
    return average_precision(recall, precision)


def evaluate_map(preds: Sequence[Sequence[Detection]], gts: Sequence[Iterable],
                 iou_thresholds: Sequence[float] = COCO_THRESHOLDS):
    """Return ``(mAP50, mAP over iou_thresholds, {class: AP50})``.

    ``gts`` holds per-image GtBox objects (top-left format) or ``(class, center box)``
    pairs. Classes without ground truth are left out of the mean.
    """
    if len(preds) != len(gts):
        raise ValidationError(f"{len(preds)} prediction lists for {len(gts)} images")
    gts = [[_gt_box(g) for g in img] for img in gts]
    classes = sorted({c for img in gts for c, _ in img})
    if not classes:
        raise ValidationError("no ground-truth boxes: recall is undefined")

    def mean_ap(thr):
        aps = {c: _class_ap(preds, gts, c, thr) for c in classes}
        return float(np.mean(list(aps.values()))), aps

    map50, per_class = mean_ap(0.5)
    if list(iou_thresholds) == [0.5]:
        return map50, map50, per_class
    map_range = float(np.mean([map50 if abs(t - 0.5) < 1e-12 else mean_ap(t)[0] for t in iou_thresholds]))
    return map50, map_range, per_class


def write_detections_csv(path, detections: Sequence[Sequence[Detection]], image_ids=None):
    image_ids = list(range(len(detections))) if image_ids is None else list(image_ids)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "class_id", "score", "x", "y", "w", "h"])
        for img, dets in zip(image_ids, detections):
            for d in dets:
                writer.writerow([img, d.class_id, f"{d.score:.6f}", f"{d.x:.3f}", f"{d.y:.3f}",
                                 f"{d.w:.3f}", f"{d.h:.3f}"])
