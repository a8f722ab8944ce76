"""Detection loss, AdamW with first-epoch warm-up, and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import Dataset, Sample
from .detection import AnchorSet, decode, evaluate_map, nms
from .errors import ConfigError, NonFiniteError, TrainingDiverged
from .event_io import GtBox
from .serde import to_dict
from .spikefpn import NetworkGraph, NetworkSpec, build_network, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

OPTIM_PREFIX = "optim."


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 5e-4
    epochs: int = 30
    batch_size: int = 32
    warmup_floor: float = 0.05
    seed: int = 0
    lambda_box: float = 1.0
    lambda_conf: float = 1.0
    lambda_cls: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    divergence_threshold: float = 1e4
    anchors: str = "default"
    eval_batch_size: int = 32

    def validate(self):
        if min(self.lr, self.epochs, self.batch_size, self.eval_batch_size) <= 0:
            raise ConfigError("lr, epochs and batch sizes must be positive")
        if self.weight_decay < 0 or min(self.lambda_box, self.lambda_conf, self.lambda_cls) < 0:
            raise ConfigError("weight decay and loss weights must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("invalid AdamW moments configuration")
        if not 0 < self.warmup_floor <= 1:
            raise ConfigError("warmup_floor must lie in (0, 1]")
        if self.anchors not in ("default", "kmeans"):
            raise ConfigError(f"anchors must be 'default' or 'kmeans', got {self.anchors!r}")
        return self


def desk_train_config(**overrides) -> TrainConfig:
    # 1e-3 suits full-size datasets; 450 desk samples give too few steps per epoch for it
    kw = dict(batch_size=8, lr=5e-3)
    kw.update(overrides)
    return TrainConfig(**kw)


# -- targets and loss ---------------------------------------------------------


@dataclass
class Targets:
    """Per-scale dense targets; ``obj[d]`` is ``(N, K, h, w)``."""

    obj: list[torch.Tensor]
    box: list[torch.Tensor]  # (N, K, 4, h, w) center-format pixels
    cls: list[torch.Tensor]  # (N, K, h, w) long

    @property
    def num_positive(self):
        return int(sum(o.sum() for o in self.obj))


def assign_targets(boxes: Sequence[Sequence[GtBox]], anchors: AnchorSet,
                   grid_hw: Sequence[tuple[int, int]]) -> Targets:
    """Each GT goes to the anchor (over all scales) with the best shape IoU,
    at the cell containing its center.  A later GT claiming an occupied slot is dropped."""
    n = len(boxes)
    k = anchors.k
    obj = [torch.zeros(n, k, h, w) for h, w in grid_hw]
    box = [torch.zeros(n, k, 4, h, w) for h, w in grid_hw]
    cls = [torch.zeros(n, k, h, w, dtype=torch.long) for h, w in grid_hw]
    flat = anchors.all_anchors()
    for i, img in enumerate(boxes):
        for g in img:
            cx, cy, w, h = g.center
            shape_iou = [min(w, aw) * min(h, ah) / (w * h + aw * ah - min(w, aw) * min(h, ah))
                         for _, _, aw, ah in flat]
            d, a, _, _ = flat[int(np.argmax(shape_iou))]
            stride = anchors.strides[d]
            gh, gw = grid_hw[d]
            gx = min(int(cx // stride), gw - 1)
            gy = min(int(cy // stride), gh - 1)
            if obj[d][i, a, gy, gx]:
                continue
            obj[d][i, a, gy, gx] = 1.0
            box[d][i, a, :, gy, gx] = torch.tensor([cx, cy, w, h])
            cls[d][i, a, gy, gx] = g.class_id
    return Targets(obj, box, cls)


def pred_boxes(head: torch.Tensor, anchors_wh, stride: int) -> torch.Tensor:
    """Decoded ``(N, K, 4, h, w)`` center-format boxes (differentiable)."""
    _, k, _, gh, gw = head.shape
    gy, gx = torch.meshgrid(torch.arange(gh, dtype=head.dtype), torch.arange(gw, dtype=head.dtype), indexing="ij")
    aw = torch.tensor([a[0] for a in anchors_wh], dtype=head.dtype).reshape(1, k, 1, 1)
    ah = torch.tensor([a[1] for a in anchors_wh], dtype=head.dtype).reshape(1, k, 1, 1)
    x = (torch.sigmoid(head[:, :, 0]) + gx) * stride
    y = (torch.sigmoid(head[:, :, 1]) + gy) * stride
    w = aw * torch.exp(head[:, :, 2].clamp(max=10.0))
    h = ah * torch.exp(head[:, :, 3].clamp(max=10.0))
    return torch.stack([x, y, w, h], dim=2)


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise IoU of center-format boxes stacked along the last dimension."""
    ax0, ax1 = a[..., 0] - a[..., 2] / 2, a[..., 0] + a[..., 2] / 2
    ay0, ay1 = a[..., 1] - a[..., 3] / 2, a[..., 1] + a[..., 3] / 2
    bx0, bx1 = b[..., 0] - b[..., 2] / 2, b[..., 0] + b[..., 2] / 2
    by0, by1 = b[..., 1] - b[..., 3] / 2, b[..., 1] + b[..., 3] / 2
    iw = (torch.minimum(ax1, bx1) - torch.maximum(ax0, bx0)).clamp(min=0)
    ih = (torch.minimum(ay1, by1) - torch.maximum(ay0, by0)).clamp(min=0)
    inter = iw * ih
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return inter / union.clamp(min=1e-9)


def detection_loss(heads: Sequence[torch.Tensor], targets: Targets, anchors: AnchorSet,
                   weights: tuple[float, float, float] = (1.0, 1.0, 1.0), parts: bool = False):
    """Box (1 - IoU) and class CE over positives plus objectness BCE over every anchor,
    summed and divided by the batch size."""
    lb, lo, lc = weights
    n = heads[0].shape[0]
    box_l = heads[0].new_zeros(())
    conf_l = heads[0].new_zeros(())
    cls_l = heads[0].new_zeros(())
    for d, head in enumerate(heads):
        obj = targets.obj[d].to(head.dtype)
        conf_l = conf_l + F.binary_cross_entropy_with_logits(head[:, :, 4], obj, reduction="sum")
        pos = obj.bool()
        if pos.any():
            pb = pred_boxes(head, anchors.scales[d], anchors.strides[d])
            ious = box_iou(pb.movedim(2, -1)[pos], targets.box[d].to(head.dtype).movedim(2, -1)[pos])
            box_l = box_l + (1 - ious).sum()
            logits = head[:, :, 5:].movedim(2, -1)[pos]
            cls_l = cls_l + F.cross_entropy(logits, targets.cls[d][pos], reduction="sum")
    total = (lb * box_l + lo * conf_l + lc * cls_l) / n
    if not torch.isfinite(total):
        bad = [f"scale {d}: {int((~torch.isfinite(h)).sum())} non-finite head values"
               for d, h in enumerate(heads)]
        raise NonFiniteError(
            f"loss is {total.item()} (box {box_l.item()}, conf {conf_l.item()}, cls {cls_l.item()}); " + "; ".join(bad)
        )
    if parts:
        return total, {"box": box_l.item() / n, "conf": conf_l.item() / n, "cls": cls_l.item() / n}
    return total


# -- optimizer ------------------------------------------------------------------


@dataclass
class OptimizerState:
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)

    def to_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, m in self.exp_avg.items():
            out[f"{OPTIM_PREFIX}m.{name}"] = m
            out[f"{OPTIM_PREFIX}v.{name}"] = self.exp_avg_sq[name]
        return out

    @classmethod
    def from_tensors(cls, step: int, tensors: dict[str, torch.Tensor]):
        state = cls(step)
        for key, value in tensors.items():
            if key.startswith(OPTIM_PREFIX + "m."):
                state.exp_avg[key[len(OPTIM_PREFIX) + 2:]] = value.clone()
            elif key.startswith(OPTIM_PREFIX + "v."):
                state.exp_avg_sq[key[len(OPTIM_PREFIX) + 2:]] = value.clone()
        return state


def adamw_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor | None],
               state: OptimizerState, lr: float, config: TrainConfig,
               boxes: dict[str, tuple[float, float]] | None = None) -> OptimizerState:
    """In-place decoupled-weight-decay Adam update, then projection onto ``boxes``."""
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if name not in state.exp_avg:
                state.exp_avg[name] = torch.zeros_like(p)
                state.exp_avg_sq[name] = torch.zeros_like(p)
            m, v = state.exp_avg[name], state.exp_avg_sq[name]
            p.mul_(1 - lr * config.weight_decay)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / c2).sqrt_().add_(config.eps)
            p.addcdiv_(m, denom, value=-lr / c1)
        for name, (lo, hi) in (boxes or {}).items():
            params[name].clamp_(lo, hi)
    return state


def lr_at(step: int, config: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warm-up over the first epoch from ``warmup_floor * lr``; constant afterwards."""
    if steps_per_epoch <= 0:
        raise ConfigError("steps_per_epoch must be positive")
    if step >= steps_per_epoch:
        return config.lr
    return config.lr * max(config.warmup_floor, step / steps_per_epoch)


def named_boxes(graph: NetworkGraph) -> dict[str, tuple[float, float]]:
    by_id = {id(p): box for p, box in graph.param_boxes().items()}
    return {name: by_id[id(p)] for name, p in graph.named_parameters() if id(p) in by_id}


# -- loop -----------------------------------------------------------------------


def batch_tensor(samples: Sequence[Sample]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.stack for s in samples]).astype(np.float32))


def grid_sizes(spec: NetworkSpec, anchors: AnchorSet) -> list[tuple[int, int]]:
    H, W = spec.input_hw
    return [(H // s, W // s) for s in anchors.strides]


def resolve_anchors(config: TrainConfig, train_set: Dataset, seed: int) -> AnchorSet:
    if config.anchors == "kmeans":
        wh = [(b.w, b.h) for s in train_set.samples for b in s.boxes]
        return AnchorSet.from_kmeans(wh, seed=seed)
    return AnchorSet.default()


def predict(graph: NetworkGraph, samples: Sequence[Sample], anchors: AnchorSet,
            score_threshold: float, nms_iou: float, batch_size: int = 32, record: bool = False):
    """Eval-mode detections per sample and, when ``record``, the batch-weighted firing record."""
    graph.eval()
    dets, records, weights = [], [], []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            heads, rec = graph(batch_tensor(chunk), record=record)
            for img in decode(heads, anchors, score_threshold, graph.spec.input_hw):
                dets.append(nms(img, nms_iou))
            if record:
                records.append(rec)
                weights.append(len(chunk))
    return dets, (merge_records(records, weights) if record else None)


def merge_records(records, weights):
    total = float(sum(weights))
    merged = {"neurons": {}, "neuron_sizes": dict(records[0]["neuron_sizes"]), "synapses": {}}
    for key in ("neurons", "synapses"):
        for name in records[0][key]:
            arr = sum(np.asarray(r[key][name]) * w for r, w in zip(records, weights)) / total
            merged[key][name] = arr.tolist()
    return merged


def evaluate(graph: NetworkGraph, samples: Sequence[Sample], anchors: AnchorSet,
             score_threshold: float = 0.3, nms_iou: float = 0.5, batch_size: int = 32,
             record: bool = True) -> dict:
    dets, rec = predict(graph, samples, anchors, score_threshold, nms_iou, batch_size, record)
    map50, map5095, per_class = evaluate_map(dets, [s.boxes for s in samples])
    out = {"map50": map50, "map50_95": map5095, "per_class_ap50": {str(k): v for k, v in per_class.items()},
           "detections": dets}
    if rec is not None:
        out["firing_record"] = rec
        out["firing_rate_mean"] = mean_firing_rate(rec)
        out["first_layer_rate"] = float(np.mean(rec["neurons"]["stem0"]))
    return out


def mean_firing_rate(record) -> float:
    """Activation-count-weighted network mean over all spiking layers and steps."""
    num = sum(np.mean(r) * record["neuron_sizes"][k] for k, r in record["neurons"].items())
    den = sum(record["neuron_sizes"][k] for k in record["neurons"])
    return float(num / den) if den else 0.0


@dataclass
class TrainResult:
    graph: NetworkGraph
    anchors: AnchorSet
    history: list[dict]
    best_map50: float
    best_epoch: int
    losses: list[float]


def _metric_line(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True) + "\n"


def train(train_set: Dataset, val_set: Dataset, spec: NetworkSpec, config: TrainConfig,
          out_dir=None, resume=None, on_epoch: Callable[[dict], None] | None = None,
          score_threshold: float = 0.3, nms_iou: float = 0.5) -> TrainResult:
    """Train ``spec`` on ``train_set``; validate on ``val_set`` after every epoch.

    With ``out_dir`` the loop writes ``metrics.jsonl`` (one record per epoch),
    ``last.sfpn`` (resumable, includes optimizer moments) and ``best.sfpn``.
    """
    config.validate()
    if len(train_set) == 0:
        raise ConfigError("empty training set")
    torch.manual_seed(config.seed)
    graph = build_network(spec, config.seed)
    anchors = resolve_anchors(config, train_set, config.seed)
    state = OptimizerState()
    history: list[dict] = []
    losses: list[float] = []
    start_epoch, best_map, best_epoch = 0, -1.0, -1
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        graph, meta, extra = load_checkpoint(resume, expect_spec=spec)
        state = OptimizerState.from_tensors(int(meta["optim_step"]), extra)
        anchors = AnchorSet(tuple(tuple(tuple(a) for a in g) for g in meta["anchors"]))
        history = list(meta.get("history", []))
        losses = list(meta.get("losses", []))
        start_epoch = int(meta["epoch"]) + 1
        best_map, best_epoch = float(meta["best_map50"]), int(meta["best_epoch"])
    if out is not None:
        (out / "metrics.jsonl").write_text("".join(_metric_line(r) for r in history))

    params = dict(graph.named_parameters())
    boxes = named_boxes(graph)
    grids = grid_sizes(spec, anchors)
    weights = (config.lambda_box, config.lambda_conf, config.lambda_cls)
    n = len(train_set)
    steps_per_epoch = math.ceil(n / config.batch_size)
    last_good = str(resume) if resume is not None else None

    def meta_for(epoch):
        return {
            "epoch": epoch, "optim_step": state.step, "best_map50": best_map, "best_epoch": best_epoch,
            "anchors": [list(map(list, g)) for g in anchors.scales], "history": history, "losses": losses,
            "train_config": to_dict(config),
        }

    for epoch in range(start_epoch, config.epochs):
        graph.train()
        order = torch.randperm(n, generator=torch.Generator().manual_seed(config.seed * 1000 + epoch)).tolist()
        epoch_loss = 0.0
        lr = config.lr
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            chunk = [train_set[i] for i in idx]
            lr = lr_at(epoch * steps_per_epoch + b, config, steps_per_epoch)
            heads, _ = graph(batch_tensor(chunk))
            targets = assign_targets([s.boxes for s in chunk], anchors, grids)
            try:
                loss = detection_loss(heads, targets, anchors, weights)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch} step {b}: {exc}", last_good) from None
            if loss.item() > config.divergence_threshold:
                raise TrainingDiverged(
                    f"epoch {epoch} step {b}: loss {loss.item():.4g} exceeds {config.divergence_threshold:g}",
                    last_good)
            graph.zero_grad(set_to_none=True)
            loss.backward()
            grads = {k: p.grad for k, p in params.items()}
            adamw_step(params, grads, state, lr, config, boxes)
            losses.append(loss.item())
            epoch_loss += loss.item() * len(chunk)
        ev = evaluate(graph, val_set.samples, anchors, score_threshold, nms_iou,
                      config.eval_batch_size) if len(val_set) else None
        rec = {
            "epoch": epoch,
            "train_loss": epoch_loss / n,
            "map50": ev["map50"] if ev else None,
            "map50_95": ev["map50_95"] if ev else None,
            "lr": lr,
            "firing_rate_mean": ev["firing_rate_mean"] if ev else None,
            "first_layer_rate": ev["first_layer_rate"] if ev else None,
        }
        history.append(rec)
        log.info("epoch %d loss %.4f map50 %s", epoch, rec["train_loss"], rec["map50"])
        improved = ev is not None and ev["map50"] > best_map
        if improved:
            best_map, best_epoch = ev["map50"], epoch
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(_metric_line(rec))
            save_checkpoint(out / "last.sfpn", graph, meta_for(epoch), state.to_tensors())
            last_good = str(out / "last.sfpn")
            if improved:
                save_checkpoint(out / "best.sfpn", graph, meta_for(epoch))
        if on_epoch is not None:
            on_epoch(rec)
    return TrainResult(graph, anchors, history, best_map, best_epoch, losses)
