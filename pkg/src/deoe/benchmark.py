"""Desk-scale open-world benchmark on synthetic scenes.

Known class: rectangles. Unknown classes: discs and triangles. Every variant is
trained on the same scenes (only rectangles annotated) and evaluated on held-out
scenes with all shapes annotated. Reports are cached on disk, keyed by the full
training config and a digest of the package source.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import statistics
import time
from pathlib import Path

from .evalkit import ClassSplit, EvalReport, evaluate_frames
from .events import KIND_CLASS_ID, synth_scene
from .infer import run_stream
from .trainer import Recording, TrainConfig, _recording, encode_frame, load_dataset, run_training

log = logging.getLogger(__name__)

SPLIT = ClassSplit(frozenset({KIND_CLASS_ID["rectangle"]}),
                   frozenset({KIND_CLASS_ID["disc"], KIND_CLASS_ID["triangle"]}))

# 16x16 grid of 8-pixel priors; objects sized to match a single prior
BENCH_DEFAULTS = dict(
    channels=(16, 32),
    strides=(4, 2),
    head_width=32,
    T=4,
    iterations=1500,
    batch_size=4,
    lr=2e-3,
    scenes=24,
    scene_duration=500_000,
    size_min=5.0,
    size_max=14.0,
    screen_min_events=4,
)

TEST_SCENES = 6
TEST_SEED = 90_000
SEEDS = (0, 1, 2)

# label -> config overrides; the rows needed by the ordering, potential-count and head checks
SUITE = {
    "ca": dict(variant="ca"),
    "deoe": dict(variant="deoe"),
    "oracle": dict(variant="oracle"),
    "deoe_n0": dict(variant="deoe", potential_count=0),
    "deoe_n15": dict(variant="deoe", potential_count=15),
    "deoe_n100": dict(variant="deoe", potential_count=100),
    "objectness_only": dict(variant="deoe", dual_regressor=False),
}


def bench_config(variant: str, seed: int, **overrides) -> TrainConfig:
    values = {**BENCH_DEFAULTS, "variant": variant, "seed": seed, **overrides}
    return TrainConfig(**values)


def holdout_recordings(cfg: TrainConfig, scenes: int = TEST_SCENES, seed: int = TEST_SEED) -> list[Recording]:
    out = []
    for i in range(scenes):
        spec = dataclasses.replace(cfg.scene_spec(0), seed=seed + i)
        stream, anns = synth_scene(spec)
        out.append(_recording(stream, anns, cfg))
    return out


def evaluate_model(model, cfg: TrainConfig, recordings: list[Recording], label: str = "") -> EvalReport:
    frames = []
    scale = 2.0 if cfg.downsample else 1.0
    for rec in recordings:
        inputs = [(t, encode_frame(rec.stream, t, cfg)) for t in rec.ticks]
        for ds in run_stream(model, inputs, scale=scale):
            frames.append((ds.detections, rec.frames[ds.t]))
    return evaluate_frames(frames, SPLIT, label)


def run_variant(cfg: TrainConfig, out_dir: str | Path, train_data=None, test_data=None, label: str = "") -> EvalReport:
    t0 = time.time()
    train_data = train_data if train_data is not None else load_dataset(cfg)
    test_data = test_data if test_data is not None else holdout_recordings(cfg)
    _, model = run_training(cfg, out_dir, data=train_data)
    model.eval()
    report = evaluate_model(model, cfg, test_data, label or cfg.variant)
    log.info("%s seed %d done in %.0fs", label or cfg.variant, cfg.seed, time.time() - t0)
    Path(out_dir, "report.jsonl").write_text(report.to_jsonl())
    return report


def source_digest() -> str:
    """sha256 over every module of the package, so cached reports expire with the code."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def cache_key(cfg: TrainConfig) -> str:
    blob = json.dumps({"config": cfg.to_dict(), "test": [TEST_SCENES, TEST_SEED], "source": source_digest()},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def run_suite(work_dir: str | Path, seeds=SEEDS, labels=None) -> dict[str, dict[int, EvalReport]]:
    """Train and evaluate every suite row for every seed, reusing cached reports."""
    work_dir = Path(work_dir)
    labels = list(labels or SUITE)
    data = None
    out: dict[str, dict[int, EvalReport]] = {label: {} for label in labels}
    for seed in seeds:
        for label in labels:
            cfg = bench_config(seed=seed, **SUITE[label])
            run_dir = work_dir / f"{label}_seed{seed}_{cache_key(cfg)}"
            cached = run_dir / "report.jsonl"
            if cached.exists():
                out[label][seed] = EvalReport.from_jsonl(cached.read_text())
                continue
            if data is None:
                # scenes depend on scene_seed and geometry only, shared by every row and seed
                data = load_dataset(cfg), holdout_recordings(cfg)
            out[label][seed] = run_variant(cfg, run_dir, *data, label=label)
    return out


def metric(reports: dict[int, EvalReport], key: str, split: str = "unknown") -> dict[int, float]:
    """Per-seed value of ``key`` (a budget such as 10, or "AUC")."""
    return {seed: r.rows[split][key] for seed, r in reports.items()}


def mean(values: dict[int, float]) -> float:
    return statistics.fmean(values.values())


def summary_table(results: dict[str, dict[int, EvalReport]]) -> str:
    lines = [f"{'row':<16} {'seed':>4} {'uAUC':>7} {'uAR10':>7} {'uAR30':>7} {'aAR10':>7} {'aAR30':>7}"]
    for label, by_seed in results.items():
        for seed, r in sorted(by_seed.items()):
            u, a = r.rows["unknown"], r.rows["all"]
            lines.append(f"{label:<16} {seed:>4} {u['AUC']:7.2f} {u[10]:7.2f} {u[30]:7.2f} {a[10]:7.2f} {a[30]:7.2f}")
    return "\n".join(lines)


def main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="python -m deoe.benchmark", description="run the synthetic open-world suite")
    p.add_argument("--out", required=True, help="work directory; finished runs are reused")
    p.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    p.add_argument("--rows", nargs="+", choices=list(SUITE), default=list(SUITE))
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    results = run_suite(args.out, args.seeds, args.rows)
    print(summary_table(results))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
