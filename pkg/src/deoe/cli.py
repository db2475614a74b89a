"""Command-line entry point: synth, train, infer, eval, bench, gradcheck."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .evalkit import ClassSplit, ProtocolError, evaluate_run
from .events import (EventFormatError, SceneSpec, load_annotations, load_events, save_annotations, save_events,
                     synth_scene)
from .infer import bench_inference, frame_times, render_overlay, run_stream, save_predictions
from .trainer import TrainConfig, encode_frame, load_model, make_config, run_training, set_threads, write_config

log = logging.getLogger("deoe")


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, args: argparse.Namespace, config: dict | None,
                   inputs: list[str | Path], outputs: list[str | Path]) -> Path:
    """Everything needed to re-run ``command``; written before the work starts."""
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "arguments": {k: v for k, v in vars(args).items() if k != "func"},
        "config": config,
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "inputs": {str(p): file_digest(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _require(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def cmd_synth(args) -> int:
    spec_path = _require(args.spec, "scene spec")
    try:
        values = json.loads(spec_path.read_text())
        if args.seed is not None:
            values["seed"] = args.seed
        spec = SceneSpec.from_dict(values)
    except (json.JSONDecodeError, TypeError) as exc:
        raise ValueError(f"{spec_path}: invalid scene spec: {exc}") from None
    out = Path(args.out)
    evt, ann = out / f"{args.name}.evt", out / f"{args.name}.ann.jsonl"
    write_manifest(out, "synth", args, None, [spec_path], [evt, ann])
    stream, anns = synth_scene(spec)
    save_events(stream, evt, binary=args.binary)
    save_annotations(anns, ann)
    print(f"{len(stream)} events, {len(anns)} annotations -> {evt}, {ann}")
    return 0


def _train_config(args) -> TrainConfig:
    overrides = dict(kv.split("=", 1) for kv in (args.set or []))
    for key, flag in (("seed", args.seed), ("variant", args.variant), ("potential_count", args.potential_count),
                      ("sequence_length", args.sequence_length)):
        if flag is not None:
            overrides[key] = flag
    if getattr(args, "data", None):
        overrides["data_dir"] = args.data
    config = _require(args.config, "config file") if args.config else None
    return make_config(config, **overrides)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    out = Path(args.out)
    inputs = [args.config] if args.config else []
    if cfg.data_dir:
        inputs += sorted(Path(cfg.data_dir).glob("*.evt")) + sorted(Path(cfg.data_dir).glob("*.ann.jsonl"))
    if args.resume:
        inputs.append(_require(args.resume, "checkpoint"))
    write_manifest(out, "train", args, cfg.to_dict(), inputs, [out / "final.ckpt", out / "loss.csv"])
    write_config(cfg, out / "config.resolved")
    final, _ = run_training(cfg, out, resume=args.resume)
    print(f"checkpoint -> {final}")
    return 0


def _frames(args, cfg: TrainConfig, stream):
    if args.annotations:
        ticks = sorted({a.t for a in load_annotations(_require(args.annotations, "annotation file"))})
        ticks = [t for t in ticks if t >= cfg.delta_t]
    else:
        end = int(stream.t[-1]) if len(stream) else 0
        ticks = frame_times(0, end, cfg.delta_t)
    return [(t, encode_frame(stream, t, cfg)) for t in ticks]


def cmd_infer(args) -> int:
    ckpt = _require(args.checkpoint, "checkpoint")
    events = _require(args.events, "event file")
    out = Path(args.out)
    pred = out / "predictions.jsonl"
    inputs = [ckpt, events] + ([args.annotations] if args.annotations else [])
    model, cfg, _ = load_model(ckpt)
    write_manifest(out, "infer", args, cfg.to_dict(), inputs, [pred])
    stream = load_events(events)
    frames = _frames(args, cfg, stream)
    scale = 2.0 if cfg.downsample else 1.0
    sets = list(run_stream(model, frames, scale=scale))
    save_predictions(sets, pred)
    if args.overlay_dir:
        odir = Path(args.overlay_dir)
        odir.mkdir(parents=True, exist_ok=True)
        for (t, tensor), ds in zip(frames, sets):
            render_overlay(tensor, ds, odir / f"frame_{t:010d}.png")
    print(f"{sum(len(s) for s in sets)} detections over {len(sets)} frames -> {pred}")
    return 0


def cmd_eval(args) -> int:
    pred = _require(args.predictions, "prediction file")
    ann = _require(args.annotations, "annotation file")
    split = ClassSplit.parse(args.split) if args.split else None
    out = Path(args.out)
    write_manifest(out, "eval", args, None, [pred, ann], [out / "report.jsonl", out / "report.txt"])
    report = evaluate_run(pred, ann, split, label=args.label)
    (out / "report.jsonl").write_text(report.to_jsonl())
    (out / "report.txt").write_text(report.to_table() + "\n")
    print(report.to_table())
    return 0


def cmd_bench(args) -> int:
    ckpt = _require(args.checkpoint, "checkpoint")
    events = _require(args.events, "event file")
    out = Path(args.out)
    model, cfg, _ = load_model(ckpt)
    write_manifest(out, "bench", args, cfg.to_dict(), [ckpt, events], [out / "latency.json"])
    stream = load_events(events)
    frames = [tensor for _, tensor in _frames(argparse.Namespace(annotations=None), cfg, stream)][: args.frames]
    if not frames:
        raise ValueError(f"{events}: no complete frames to benchmark")
    stats = bench_inference(model, frames)
    (out / "latency.json").write_text(json.dumps(stats.as_dict(), indent=2) + "\n")
    print(json.dumps(stats.as_dict(), indent=2))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_gradient_suite, run_primitive_suite

    out = Path(args.out)
    write_manifest(out, "gradcheck", args, None, [], [out / "gradcheck.json"])
    results = run_primitive_suite() + run_gradient_suite(seed=args.seed or 0)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<14} max rel err {r.error:.3e} (< {r.tolerance:g})")
    (out / "gradcheck.json").write_text(json.dumps({r.name: r.error for r in results}, indent=2) + "\n")
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deoe", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic event recording from a JSON scene spec")
    s.add_argument("spec")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--name", default="scene")
    s.add_argument("--binary", action="store_true", help="binary event file instead of text")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--variant", choices=["deoe", "ca", "ca_o", "ca_p", "oracle"])
    t.add_argument("--potential-count", type=int)
    t.add_argument("--sequence-length", type=int)
    t.add_argument("--data", help="directory of <name>.evt / <name>.ann.jsonl pairs")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    t.add_argument("--resume")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="run a checkpoint over an event file")
    i.add_argument("checkpoint")
    i.add_argument("events")
    i.add_argument("--annotations", help="use these annotation timestamps as frame times")
    i.add_argument("--overlay-dir")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="AR_k / AUC report for a prediction file")
    e.add_argument("predictions")
    e.add_argument("annotations")
    e.add_argument("--split", help='e.g. "known=0;unknown=1,2" (default: from the annotated flags)')
    e.add_argument("--label", default="")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="per-frame inference latency")
    b.add_argument("checkpoint")
    b.add_argument("events")
    b.add_argument("--frames", type=int, default=100)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gradcheck", help="finite-difference checks of every loss term")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    set_threads()
    try:
        return args.func(args)
    except ProtocolError as exc:
        print(f"deoe {args.command}: protocol error: {exc}", file=sys.stderr)
        return 3
    except (FileNotFoundError, EventFormatError, ValueError, KeyError) as exc:
        print(f"deoe {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
