"""Command-line entry point: synthesize, encode, train, eval, infer, cost-report, sweep."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import plotting
from .config import RunConfig, dump_run_config, load_run_config
from .cost_model import record_firing, write_report
from .dataset import Dataset, load_dataset, scene_seed, synthesize_dataset
from .detection import AnchorSet, write_detections_csv
from .encoding import encode, load_stack, save_stack, stack_sparsity
from .errors import ConfigError, SfpnError
from .event_io import load_events, save_events, save_labels, synthesize_scene
from .serde import canonical_json
from .spikefpn import build_network, load_checkpoint
from .training import evaluate, predict, train

log = logging.getLogger("sfpn")

SWEEP_AXES = ("tau", "threshold", "s_c_config", "beta")


# -- helpers ------------------------------------------------------------------


def configure_runtime():
    torch.set_num_threads(int(os.environ.get("SFPN_THREADS", "1")))
    torch.use_deterministic_algorithms(True)


def prepare_out(out, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def with_first_layer(cfg: RunConfig, kind: str | None) -> RunConfig:
    if kind is None:
        return cfg
    return dataclasses.replace(cfg, network=dataclasses.replace(cfg.network, first_layer_neuron=kind))


def apply_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    if seed is None:
        return cfg
    return dataclasses.replace(
        cfg,
        train=dataclasses.replace(cfg.train, seed=seed),
        dataset=dataclasses.replace(cfg.dataset, seed=seed),
    )


def get_dataset(cfg: RunConfig, data_dir=None) -> Dataset:
    if data_dir is not None:
        return load_dataset(data_dir, cfg.encoder, cfg.dataset.label_stride, cfg.dataset.samples)
    return synthesize_dataset(cfg.dataset.samples, cfg.scene, cfg.encoder, cfg.dataset.seed,
                              cfg.dataset.label_stride)


def split(cfg: RunConfig, data: Dataset):
    return data.split_by_scene(cfg.dataset.val_fraction, cfg.dataset.seed)


def anchors_from_meta(meta) -> AnchorSet:
    if "anchors" not in meta:
        return AnchorSet.default()
    return AnchorSet(tuple(tuple(tuple(a) for a in g) for g in meta["anchors"]))


def _write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# -- commands -----------------------------------------------------------------


def cmd_synthesize(cfg: RunConfig, out_dir, scenes: int = 100, binary: bool = False) -> dict:
    cfg.scene.validate()
    out = Path(out_dir)
    totals = {"scenes": scenes, "events": 0, "boxes": 0}
    for i in range(scenes):
        stream, boxes = synthesize_scene(scene_seed(cfg.dataset.seed, i), cfg.scene)
        ext = "bin" if binary else "csv"
        save_events(stream, out / f"scene_{i:04d}.events.{ext}", binary=binary)
        save_labels(boxes, out / f"scene_{i:04d}.labels.csv")
        totals["events"] += len(stream)
        totals["boxes"] += len(boxes)
    _write_json(out / "summary.json", totals)
    print(f"wrote {scenes} scenes: {totals['events']} events, {totals['boxes']} boxes -> {out}")
    return totals


def cmd_encode(cfg: RunConfig, events_path, t_labels, out_dir) -> list[Path]:
    H, W = cfg.encoder.geometry
    stream = load_events(events_path, (W, H))
    paths = []
    for t in t_labels:
        stack = encode(stream, t, cfg.encoder)
        path = Path(out_dir) / f"stack_{t}.stk"
        save_stack(stack, path)
        paths.append(path)
        print(f"{path}: shape {stack.shape}, density {stack_sparsity(stack):.4f}")
    return paths


def cmd_train(cfg: RunConfig, data_dir, out_dir, resume=None) -> dict:
    out = Path(out_dir)
    (out / "config.json").write_text(dump_run_config(cfg))
    train_set, val_set = split(cfg, get_dataset(cfg, data_dir))
    print(f"training on {len(train_set)} samples, validating on {len(val_set)}")
    result = train(
        train_set, val_set, cfg.network, cfg.train, out_dir=out, resume=resume,
        on_epoch=lambda r: print(json.dumps(r, sort_keys=True), flush=True),
        score_threshold=cfg.eval.score_threshold, nms_iou=cfg.eval.nms_iou,
    )
    plotting.training_curves({cfg.network.first_layer_neuron: result.history}, out / "training_curves.png")
    summary = {"best_map50": result.best_map50, "best_epoch": result.best_epoch,
               "final": result.history[-1] if result.history else None}
    _write_json(out / "summary.json", summary)
    return summary


def cmd_eval(cfg: RunConfig, checkpoint, data_dir, out_dir, split_name: str = "val",
             check_spec: bool = False) -> dict:
    graph, meta, _ = load_checkpoint(checkpoint, expect_spec=cfg.network if check_spec else None)
    cfg = dataclasses.replace(cfg, network=graph.spec)
    data = get_dataset(cfg, data_dir)
    if split_name != "all":
        train_set, val_set = split(cfg, data)
        data = val_set if split_name == "val" else train_set
    anchors = anchors_from_meta(meta)
    ev = evaluate(graph, data.samples, anchors, cfg.eval.score_threshold, cfg.eval.nms_iou,
                  cfg.train.eval_batch_size, record=False)
    report = {"split": split_name, "samples": len(data), "map50": ev["map50"], "map50_95": ev["map50_95"],
              "per_class_ap50": ev["per_class_ap50"]}
    print(f"mAP50 {report['map50']:.4f}  mAP50:95 {report['map50_95']:.4f}")
    for cls, ap in sorted(report["per_class_ap50"].items()):
        print(f"  class {cls}: AP50 {ap:.4f}")
    if out_dir is not None:
        _write_json(Path(out_dir) / "eval.json", report)
        write_detections_csv(Path(out_dir) / "detections.csv", ev["detections"])
    return report


def cmd_infer(cfg: RunConfig, checkpoint, out_dir, stack_paths=(), events_path=None, t_labels=()) -> list:
    graph, meta, _ = load_checkpoint(checkpoint)
    cfg = dataclasses.replace(cfg, network=graph.spec)
    stacks, ids = [], []
    for p in stack_paths:
        stacks.append(load_stack(p))
        ids.append(Path(p).stem)
    if events_path is not None:
        H, W = cfg.encoder.geometry
        stream = load_events(events_path, (W, H))
        for t in t_labels:
            stacks.append(encode(stream, t, cfg.encoder).data)
            ids.append(str(t))
    if not stacks:
        raise ConfigError("nothing to infer: pass --stack files or --events with --t-label")
    from .dataset import Sample
    samples = [Sample(s, [], 0, 0) for s in stacks]
    dets, _ = predict(graph, samples, anchors_from_meta(meta), cfg.eval.score_threshold, cfg.eval.nms_iou)
    path = Path(out_dir) / "detections.csv"
    write_detections_csv(path, dets, ids)
    print(f"{sum(map(len, dets))} detections -> {path}")
    return dets


def cmd_cost_report(cfg: RunConfig, checkpoint, data_dir, out_dir, samples: int = 32) -> dict:
    if checkpoint is not None:
        graph, _, _ = load_checkpoint(checkpoint)
        cfg = dataclasses.replace(cfg, network=graph.spec)
    else:
        graph = build_network(cfg.network, cfg.train.seed)
        # fresh batch-norm statistics come from one training-mode pass
        warm = get_dataset(dataclasses.replace(cfg, dataset=dataclasses.replace(cfg.dataset, samples=samples)), data_dir)
        with torch.no_grad():
            graph.train()
            graph(torch.from_numpy(warm.stacks().astype(np.float32)))
    data = get_dataset(dataclasses.replace(cfg, dataset=dataclasses.replace(cfg.dataset, samples=samples)), data_dir)
    graph.eval()
    with torch.no_grad():
        _, record = graph(torch.from_numpy(data.stacks().astype(np.float32)), record=True)
    report = record_firing(record, graph)
    out = Path(out_dir)
    data_json = write_report(report, out / "cost_report.json", out / "cost_report.csv")
    plotting.firing_rates(data_json["firing_rates"], out / "firing_rates.png")
    t = data_json["totals"]
    print(f"ops {t['ops']:.4g}  head MACs {t['head_macs']:.4g}  energy {t['energy_j'] * 1e3:.4g} mJ  "
          f"network firing rate {t['network_firing_rate']:.4f}")
    return data_json


def _parse_sweep_value(axis: str, text: str):
    if axis == "s_c_config":
        try:
            s, c = text.lower().split("x")
            return int(s), int(c)
        except ValueError:
            raise ConfigError(f"s_c_config values look like 3x3, got {text!r}") from None
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{axis} values must be numbers, got {text!r}") from None


def sweep_point_config(cfg: RunConfig, axis: str, value) -> RunConfig:
    net = cfg.network
    if axis == "tau":
        return dataclasses.replace(cfg, network=dataclasses.replace(net, neuron=dataclasses.replace(net.neuron, tau=value)))
    if axis == "threshold":
        return dataclasses.replace(cfg, network=dataclasses.replace(net, neuron=dataclasses.replace(net.neuron, u_th=value)))
    if axis == "beta":
        return dataclasses.replace(cfg, network=dataclasses.replace(net, neuron=dataclasses.replace(net.neuron, beta=value)))
    if axis == "s_c_config":
        s, c = value
        enc = dataclasses.replace(cfg.encoder, stacks=s, frames_per_stack=c)
        return dataclasses.replace(cfg, encoder=enc,
                                   network=dataclasses.replace(net, time_steps=s, frames_per_stack=c))
    raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")


def cmd_sweep(cfg: RunConfig, axis: str, values, out_dir, data_dir=None) -> list[dict]:
    """Train and evaluate once per grid value; writes ``sweep.csv`` and ``sweep.png``."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    values = list(values)
    if not values:
        raise ConfigError("empty sweep grid")
    out = Path(out_dir)
    rows = []
    cached: dict[str, tuple[Dataset, Dataset]] = {}
    for value in values:
        point = sweep_point_config(cfg, axis, value).validate()
        key = canonical_json(point.encoder)
        if key not in cached:
            cached[key] = split(point, get_dataset(point, data_dir))
        train_set, val_set = cached[key]
        label = "x".join(map(str, value)) if isinstance(value, tuple) else f"{value:g}"
        point_dir = out / f"{axis}_{label}"
        point_dir.mkdir(parents=True, exist_ok=True)
        (point_dir / "config.json").write_text(dump_run_config(point))
        result = train(train_set, val_set, point.network, point.train, out_dir=point_dir,
                       score_threshold=point.eval.score_threshold, nms_iou=point.eval.nms_iou)
        final = result.history[-1]
        row = {"axis": axis, "value": label, "map50": final["map50"], "best_map50": result.best_map50,
               "map50_95": final["map50_95"], "firing_rate_mean": final["firing_rate_mean"],
               "first_layer_rate": final["first_layer_rate"], "final_train_loss": final["train_loss"]}
        rows.append(row)
        print(json.dumps(row, sort_keys=True), flush=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    plotting.sweep_plot(axis, [r["value"] for r in rows],
                        {"mAP50": [r["map50"] for r in rows], "best mAP50": [r["best_map50"] for r in rows]},
                        out / "sweep.png")
    return rows


# -- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sfpn", description="Spiking feature-pyramid detector on event streams.")
    p.add_argument("--config", help="run configuration JSON (defaults to the built-in desk preset)")
    p.add_argument("--seed", type=int, help="overrides dataset and training seeds")
    p.add_argument("--out", default="sfpn-out", help="output directory (default: sfpn-out)")
    p.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synthesize", help="write synthetic event and label files")
    s.add_argument("--scenes", type=int, default=100, help="number of scenes (default 100)")
    s.add_argument("--objects", type=int, help="moving objects per scene")
    s.add_argument("--noise", type=float, help="background noise events per pixel per second")
    s.add_argument("--duration", type=int, help="scene duration in microseconds")
    s.add_argument("--binary", action="store_true", help="write packed binary event files")

    s = sub.add_parser("encode", help="encode an event file into STK1 frame stacks")
    s.add_argument("--events", required=True, help="event file (CSV or binary)")
    s.add_argument("--t-label", type=int, action="append", required=True, help="label timestamp (repeatable)")
    s.add_argument("--mode", choices=("SBT", "SBE"), help="override encoder mode")

    s = sub.add_parser("train", help="train a detector")
    s.add_argument("--data", help="directory from `synthesize` (default: synthesize in memory)")
    s.add_argument("--first-layer", choices=("alif", "lif", "binary"), help="first-layer neuron model")
    s.add_argument("--epochs", type=int, help="override the epoch count")
    s.add_argument("--resume", help="continue from a last.sfpn checkpoint")

    s = sub.add_parser("eval", help="report mAP of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", help="directory from `synthesize` (default: synthesize in memory)")
    s.add_argument("--split", choices=("val", "train", "all"), default="val")

    s = sub.add_parser("infer", help="write detections for stacks or event files")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--stack", action="append", default=[], help="STK1 file (repeatable)")
    s.add_argument("--events", help="event file to encode")
    s.add_argument("--t-label", type=int, action="append", default=[], help="label timestamp (repeatable)")

    s = sub.add_parser("cost-report", help="firing rates, operation counts and energy")
    s.add_argument("--checkpoint", help="trained checkpoint (default: freshly initialized network)")
    s.add_argument("--data", help="directory from `synthesize` (default: synthesize in memory)")
    s.add_argument("--samples", type=int, default=32, help="samples to average over (default 32)")

    s = sub.add_parser("sweep", help="train and evaluate over a grid of one hyper-parameter")
    s.add_argument("--axis", required=True, choices=SWEEP_AXES)
    s.add_argument("--values", required=True, help="comma-separated grid, e.g. 0,0.1,0.2 or 3x3,5x3")
    s.add_argument("--data", help="directory from `synthesize` (default: synthesize in memory)")
    s.add_argument("--first-layer", choices=("alif", "lif", "binary"), help="first-layer neuron model")
    s.add_argument("--epochs", type=int, help="override the epoch count")
    return p


def run(args) -> object:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    cfg = apply_seed(cfg, args.seed)
    if getattr(args, "first_layer", None):
        cfg = with_first_layer(cfg, args.first_layer)
    if getattr(args, "epochs", None):
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, epochs=args.epochs))
    cmd = args.command
    if cmd == "synthesize":
        scene = cfg.scene
        for flag, name in (("objects", "num_objects"), ("noise", "noise_rate"), ("duration", "duration_us")):
            if getattr(args, flag) is not None:
                scene = dataclasses.replace(scene, **{name: getattr(args, flag)})
        cfg = dataclasses.replace(cfg, scene=scene)
        cfg.scene.validate()
    elif cmd == "encode" and args.mode:
        cfg = dataclasses.replace(cfg, encoder=dataclasses.replace(cfg.encoder, mode=args.mode))
    cfg.validate()
    # train with --resume appends to its own directory
    resuming = cmd == "train" and args.resume
    if resuming:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
    else:
        out = prepare_out(args.out, args.force)
    if cmd == "synthesize":
        return cmd_synthesize(cfg, out, args.scenes, args.binary)
    if cmd == "encode":
        return cmd_encode(cfg, args.events, args.t_label, out)
    if cmd == "train":
        return cmd_train(cfg, args.data, out, args.resume)
    if cmd == "eval":
        return cmd_eval(cfg, args.checkpoint, args.data, out, args.split, check_spec=args.config is not None)
    if cmd == "infer":
        return cmd_infer(cfg, args.checkpoint, out, args.stack, args.events, args.t_label)
    if cmd == "cost-report":
        return cmd_cost_report(cfg, args.checkpoint, args.data, out, args.samples)
    if cmd == "sweep":
        values = [_parse_sweep_value(args.axis, v.strip()) for v in args.values.split(",") if v.strip()]
        return cmd_sweep(cfg, args.axis, values, out, args.data)
    raise ConfigError(f"unknown command {cmd}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    configure_runtime()
    try:
        run(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SfpnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
