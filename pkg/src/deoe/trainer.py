"""Sequence training with truncated backpropagation, checkpoints and run configuration."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F

from . import nncore
from .encode import downsample2x, encode_window
from .events import (
    AnnotationRecord,
    EventStream,
    SceneSpec,
    ShapePopulation,
    annotations_by_time,
    load_annotations,
    load_events,
    synth_scene,
    window,
)
from .heads import PriorGrid
from .loss import CSV_HEADER, LossBreakdown, frame_loss
from .model import Detector, DetectorConfig
from .sampling import ScreeningConfig, VariantMode, variant_assign

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    variant: str = "deoe"
    potential_count: int = 35
    sequence_length: int = 5
    batch_size: int = 4
    iterations: int = 1000
    lr: float = 2e-4
    min_lr: float = 1e-5
    warmup_fraction: float = 0.05
    grad_clip: float = 10.0
    seed: int = 0
    delta_t: int = 10_000  # µs per frame
    T: int = 5
    height: int = 128
    width: int = 128
    downsample: bool = False
    channels: tuple[int, ...] = (16, 32, 64)
    strides: tuple[int, ...] = (4, 2, 2)
    head_width: int = 64
    dropout: float = 0.1
    # head ablations; None means "as the variant implies"
    dual_regressor: bool | None = None
    disentangled: bool | None = None
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    screening_start: int = 0  # first iteration that mines potentials
    screen_min_events: int = 0  # potentials need this many events inside their prior box
    checkpoint_every: int = 0
    log_every: int = 1
    # data: a directory of <name>.evt / <name>.ann.jsonl pairs, or synthetic scenes
    data_dir: str = ""
    scenes: int = 16
    scene_duration: int = 1_000_000
    scene_seed: int = 1000
    known_kinds: tuple[str, ...] = ("rectangle",)
    rectangles: int = 3
    discs: int = 2
    triangles: int = 2
    size_min: float = 10.0  # object side range, pixels at the model resolution
    size_max: float = 28.0
    noise_rate: float = 0.5

    def __post_init__(self):
        self.variant = VariantMode.parse(self.variant).value
        if self.sequence_length < 1:
            raise ValueError("sequence_length must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.screening_start < 0 or self.screen_min_events < 0:
            raise ValueError("screening_start and screen_min_events must be >= 0")
        self.channels = tuple(int(c) for c in self.channels)
        self.strides = tuple(int(s) for s in self.strides)
        self.known_kinds = tuple(self.known_kinds)

    @property
    def mode(self) -> VariantMode:
        return VariantMode(self.variant)

    @property
    def heads(self) -> tuple[bool, bool]:
        """(dual_regressor, disentangled) actually used."""
        if self.mode is not VariantMode.DEOE:
            return False, False
        dual = True if self.dual_regressor is None else self.dual_regressor
        dis = True if self.disentangled is None else self.disentangled
        return dual, dis

    @property
    def detector(self) -> DetectorConfig:
        dual, dis = self.heads
        return DetectorConfig(self.height, self.width, self.T, self.channels, self.strides, self.head_width,
                              self.dropout, dual, dis)

    @property
    def screening(self) -> ScreeningConfig:
        return ScreeningConfig(self.potential_count, self.pos_iou, self.neg_iou)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("channels", "strides", "known_kinds"):
            d[k] = list(d[k])
        return d

    def scene_spec(self, index: int) -> SceneSpec:
        s = 2 if self.downsample else 1
        pops = tuple(
            ShapePopulation(kind, n, size_range=(self.size_min * s, self.size_max * s), speed_range=(150.0 * s, 500.0 * s))
            for kind, n in (("rectangle", self.rectangles), ("disc", self.discs), ("triangle", self.triangles))
            if n > 0
        )
        return SceneSpec(width=self.width * s, height=self.height * s, duration=self.scene_duration,
                         populations=pops, known_kinds=self.known_kinds, noise_rate=self.noise_rate,
                         seed=self.scene_seed + index, annotation_period=self.delta_t,
                         micro_step=min(1000, self.delta_t))


_BOOL = {"true": True, "1": True, "yes": True, "on": True, "false": False, "0": False, "no": False, "off": False}


def coerce(name: str, value: Any) -> Any:
    """Convert a string (config file or CLI) to the type of TrainConfig field ``name``."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    if name not in fields:
        raise KeyError(f"unknown config key {name!r}")
    if not isinstance(value, str):
        return value
    default = fields[name].default
    v = value.strip()
    if name in ("dual_regressor", "disentangled"):
        return None if v.lower() in ("", "none", "auto") else _BOOL[v.lower()]
    if isinstance(default, bool):
        if v.lower() not in _BOOL:
            raise ValueError(f"{name}: expected a boolean, got {value!r}")
        return _BOOL[v.lower()]
    if isinstance(default, int):
        return int(v.replace("_", ""))
    if isinstance(default, float):
        return float(v)
    if isinstance(default, tuple):
        items = [x for x in v.replace(" ", "").split(",") if x]
        return tuple(int(x) for x in items) if name in ("channels", "strides") else tuple(items)
    return v


def read_config(path: str | Path) -> dict[str, Any]:
    """Plain ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, Any] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}: line {lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = coerce(k.replace("-", "_"), v)
    return out


def make_config(path: str | Path | None = None, **overrides) -> TrainConfig:
    values = read_config(path) if path else {}
    values.update({k: coerce(k, v) for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def write_config(cfg: TrainConfig, path: str | Path) -> None:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {'auto' if v is None else v}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# data


@dataclass
class Recording:
    stream: EventStream
    frames: dict[int, list[AnnotationRecord]]
    ticks: list[int] = field(default_factory=list)


def load_dataset(cfg: TrainConfig) -> list[Recording]:
    recs = []
    if cfg.data_dir:
        root = Path(cfg.data_dir)
        if not root.is_dir():
            raise FileNotFoundError(f"data_dir {root} does not exist")
        for evt in sorted(root.glob("*.evt")):
            ann = evt.with_suffix(".ann.jsonl")
            if not ann.exists():
                raise FileNotFoundError(f"missing annotation file {ann} for {evt}")
            recs.append(_recording(load_events(evt), load_annotations(ann), cfg))
        if not recs:
            raise FileNotFoundError(f"no *.evt files in {root}")
    else:
        for i in range(cfg.scenes):
            stream, anns = synth_scene(cfg.scene_spec(i))
            recs.append(_recording(stream, anns, cfg))
    return recs


def _recording(stream: EventStream, anns: list[AnnotationRecord], cfg: TrainConfig) -> Recording:
    frames = annotations_by_time(anns)
    ticks = sorted(t for t in frames if t >= cfg.delta_t)
    return Recording(stream, frames, ticks)


def encode_frame(stream: EventStream, t: int, cfg: TrainConfig) -> np.ndarray:
    """Tensor for the frame ending at ``t`` (window [t - delta_t, t))."""
    s = 2 if cfg.downsample else 1
    ev = window(stream, t - cfg.delta_t, t)
    tensor = encode_window(ev, t - cfg.delta_t, t, cfg.T, cfg.height * s, cfg.width * s)
    if cfg.downsample:
        tensor = downsample2x(tensor)
    return tensor.data


def frame_gt(records: list[AnnotationRecord], cfg: TrainConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """(known boxes, all boxes) in model pixels."""
    s = 0.5 if cfg.downsample else 1.0
    known = [[v * s for v in r.box] for r in records if r.annotated]
    full = [[v * s for v in r.box] for r in records]
    return (torch.tensor(known, dtype=torch.float64).reshape(-1, 4),
            torch.tensor(full, dtype=torch.float64).reshape(-1, 4))


@dataclass
class SequenceBatch:
    frames: torch.Tensor  # (L, B, 2T, H, W)
    known_gt: list[list[torch.Tensor]]  # [L][B]
    full_gt: list[list[torch.Tensor]]


def sample_batch(data: list[Recording], cfg: TrainConfig, iteration: int) -> SequenceBatch:
    """Batch drawn from a generator keyed on (seed, iteration), so resumption is exact."""
    rng = np.random.default_rng([cfg.seed, iteration])
    L = cfg.sequence_length
    eligible = [i for i, r in enumerate(data) if len(r.ticks) >= L]
    if not eligible:
        raise ValueError(f"no recording has {L} annotated frames")
    frames = np.zeros((L, cfg.batch_size, 2 * cfg.T, cfg.height, cfg.width), np.float32)
    known = [[None] * cfg.batch_size for _ in range(L)]
    full = [[None] * cfg.batch_size for _ in range(L)]
    for b in range(cfg.batch_size):
        rec = data[eligible[int(rng.integers(len(eligible)))]]
        start = int(rng.integers(len(rec.ticks) - L + 1))
        for li in range(L):
            t = rec.ticks[start + li]
            frames[li, b] = encode_frame(rec.stream, t, cfg)
            known[li][b], full[li][b] = frame_gt(rec.frames[t], cfg)
    return SequenceBatch(torch.from_numpy(frames), known, full)


# ---------------------------------------------------------------------------
# optimization


def learning_rate(cfg: TrainConfig, iteration: int) -> float:
    """Linear warmup then cosine decay from lr to min_lr."""
    total = max(cfg.iterations, 1)
    warm = max(int(round(cfg.warmup_fraction * total)), 1)
    if iteration < warm:
        return cfg.lr * (iteration + 1) / warm
    progress = (iteration - warm) / max(total - warm, 1)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1 + math.cos(math.pi * min(progress, 1.0)))


class NonFiniteLoss(FloatingPointError):
    pass


def event_support(frames: torch.Tensor, grid: PriorGrid, min_events: int) -> torch.Tensor | None:
    """(B, cells) mask of cells whose prior box holds at least ``min_events`` events; None when off."""
    if min_events <= 0:
        return None
    s = grid.stride
    counts = frames.sum(dim=1, keepdim=True).double()
    # priors may hang past the frame edge: pad up to whole cells
    counts = F.pad(counts, (0, max(0, grid.width * s - counts.shape[-1]), 0, max(0, grid.height * s - counts.shape[-2])))
    counts = F.avg_pool2d(counts[..., : grid.height * s, : grid.width * s], s) * (s * s)
    return counts.flatten(1).round() >= min_events


def sequence_loss(model: Detector, batch: SequenceBatch, cfg: TrainConfig,
                  generator: torch.Generator | None = None, mine: bool = True) -> LossBreakdown:
    """Loss summed over the frames of a batch of sequences, starting from reset state.

    ``mine=False`` trains DEOE without potentials (the screening warm-up).
    """
    dual, dis = cfg.heads
    screen_cfg = cfg.screening
    state = model.initial_state()
    total = None
    dtype = next(model.parameters()).dtype
    for li in range(batch.frames.shape[0]):
        preds, state = model(batch.frames[li].to(dtype), state, generator)
        eligible = event_support(batch.frames[li], model.grid, cfg.screen_min_events)
        selections = [
            variant_assign(cfg.mode, batch.known_gt[li][b], preds.obj_fused[b], preds.iou_s[b], preds.iou_t[b],
                           model.grid, screen_cfg, full_gt=batch.full_gt[li][b], screening=dual and mine,
                           eligible=None if eligible is None else eligible[b])
            for b in range(batch.frames.shape[1])
        ]
        fl = frame_loss(preds, selections, use_spatial=dual, use_positive_only=dis)
        if not torch.isfinite(fl.total):
            d = fl.detached()
            raise NonFiniteLoss(f"non-finite loss at frame {li}: l_pn={float(d.l_pn)} l_po={float(d.l_po)} "
                                f"l_sp={float(d.l_sp)} l_iou={float(d.l_iou)}")
        total = fl if total is None else total + fl
    state.detached()  # sequence boundary: nothing crosses into the next step
    return total


def train_step(model: Detector, optimizer: torch.optim.Adam, batch: SequenceBatch, cfg: TrainConfig,
               iteration: int, dump_dir: Path | None = None) -> LossBreakdown:
    model.train()
    gen = torch.Generator().manual_seed(cfg.seed * 1_000_003 + iteration)
    optimizer.zero_grad(set_to_none=True)
    try:
        lb = sequence_loss(model, batch, cfg, gen, mine=iteration >= cfg.screening_start)
    except NonFiniteLoss as exc:
        if dump_dir is not None:
            path = Path(dump_dir) / f"nonfinite_iter{iteration}.npz"
            np.savez(path, frames=batch.frames.numpy())
            raise NonFiniteLoss(f"{exc}; offending batch dumped to {path}") from None
        raise
    nncore.backward(lb.total)
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    nncore.adam_step(optimizer, learning_rate(cfg, iteration))
    return lb.detached()


def set_threads() -> None:
    n = os.environ.get("DEOE_THREADS")
    if n:
        torch.set_num_threads(max(int(n), 1))


def build(cfg: TrainConfig) -> tuple[Detector, torch.optim.Adam]:
    torch.manual_seed(cfg.seed)
    model = Detector(cfg.detector, seed=cfg.seed)
    return model, nncore.make_adam(model.parameters(), learning_rate(cfg, 0))


def run_training(cfg: TrainConfig, out_dir: str | Path, resume: str | Path | None = None,
                 data: list[Recording] | None = None) -> tuple[Path, Detector]:
    """Train, writing ``loss.csv`` and checkpoints into ``out_dir``; returns the final checkpoint."""
    set_threads()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, opt = build(cfg)
    start = 0
    log_path = out / "loss.csv"
    if resume:
        header = nncore.load_checkpoint(resume, model, opt)
        if header["config_hash"] != nncore.config_hash(cfg.to_dict()):
            raise ValueError(f"{resume}: checkpoint was written with a different config")
        start = int(header["iteration"])
        _truncate_log(log_path, start)
    else:
        with log_path.open("w", newline="") as f:
            csv.writer(f).writerow(CSV_HEADER)
    if data is None:
        data = load_dataset(cfg) if cfg.iterations > start else []
    final = out / "final.ckpt"
    with log_path.open("a", newline="") as f:
        writer = csv.writer(f)
        for it in range(start, cfg.iterations):
            batch = sample_batch(data, cfg, it)
            lb = train_step(model, opt, batch, cfg, it, dump_dir=out)
            writer.writerow(lb.as_row(it + 1))
            if cfg.log_every and (it + 1) % cfg.log_every == 0:
                f.flush()
                log.info("iter %d total %.4f", it + 1, float(lb.total))
            if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                nncore.save_checkpoint(out / f"iter{it + 1:06d}.ckpt", model, opt, it + 1, cfg.to_dict())
    nncore.save_checkpoint(final, model, opt, cfg.iterations, cfg.to_dict())
    return final, model


def _truncate_log(path: Path, iteration: int) -> None:
    if not path.exists():
        with path.open("w", newline="") as f:
            csv.writer(f).writerow(CSV_HEADER)
        return
    rows = list(csv.reader(path.open()))
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= iteration]
    with path.open("w", newline="") as f:
        csv.writer(f).writerows(keep)


def load_model(path: str | Path) -> tuple[Detector, TrainConfig, dict]:
    header, _, _ = nncore.read_checkpoint(path)
    cfg = TrainConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in header["config"].items()})
    model = Detector(cfg.detector, seed=cfg.seed)
    nncore.load_checkpoint(path, model)
    model.eval()
    return model, cfg, header
