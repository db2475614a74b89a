"""Event streams, ground-truth annotations, a moving-shape scene synthesizer and file I/O.

Events are held column-wise in numpy arrays (``t`` int64 microseconds, ``x``/``y``
uint16 pixel indices, ``p`` uint8 polarity) because every downstream consumer
(windowing, encoding) is vectorized.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

KINDS = ("rectangle", "disc", "triangle")
KIND_CLASS_ID = {kind: i for i, kind in enumerate(KINDS)}

TEXT_MAGIC = "EVT1"
BINARY_MAGIC = b"EVB1"
BINARY_RECORD = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])  # 13 bytes, packed


class EventFormatError(ValueError):
    """Raised when an event or annotation file cannot be parsed."""


@dataclass(frozen=True)
class EventPoint:
    t: int
    x: int
    y: int
    p: int


@dataclass
class EventStream:
    sensor_width: int
    sensor_height: int
    t: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    x: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint16))
    y: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint16))
    p: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint8))

    def __post_init__(self) -> None:
        self.t = np.ascontiguousarray(self.t, dtype=np.int64)
        self.x = np.ascontiguousarray(self.x, dtype=np.uint16)
        self.y = np.ascontiguousarray(self.y, dtype=np.uint16)
        self.p = np.ascontiguousarray(self.p, dtype=np.uint8)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event columns have different lengths")

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> EventPoint:
        return EventPoint(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.sensor_width == other.sensor_width
            and self.sensor_height == other.sensor_height
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )

    @classmethod
    def from_points(cls, width: int, height: int, points: Iterable[EventPoint]) -> "EventStream":
        pts = list(points)
        return cls(
            width,
            height,
            np.array([e.t for e in pts], np.int64),
            np.array([e.x for e in pts], np.uint16),
            np.array([e.y for e in pts], np.uint16),
            np.array([e.p for e in pts], np.uint8),
        )

    def validate(self) -> None:
        if len(self) == 0:
            return
        if self.t[0] < 0:
            raise EventFormatError("negative timestamp")
        if np.any(np.diff(self.t) < 0):
            bad = int(np.argmax(np.diff(self.t) < 0)) + 1
            raise EventFormatError(f"timestamps not sorted at event {bad}")
        if int(self.x.max()) >= self.sensor_width or int(self.y.max()) >= self.sensor_height:
            raise EventFormatError("event coordinate outside sensor bounds")
        if int(self.p.max()) > 1:
            raise EventFormatError("polarity must be 0 or 1")

    def slice(self, lo: int, hi: int) -> "EventStream":
        return EventStream(
            self.sensor_width, self.sensor_height, self.t[lo:hi], self.x[lo:hi], self.y[lo:hi], self.p[lo:hi]
        )


@dataclass(frozen=True)
class AnnotationRecord:
    t: int
    box: tuple[float, float, float, float]  # x_min, y_min, w, h
    class_id: int
    annotated: bool

    def to_json(self) -> str:
        x, y, w, h = self.box
        return json.dumps(
            {"t": self.t, "x_min": x, "y_min": y, "w": w, "h": h,
             "class_id": self.class_id, "annotated": self.annotated},
            sort_keys=True,
        )


def window(stream: EventStream, t_a: int, t_b: int) -> EventStream:
    """Events with ``t_a <= t < t_b``, in stream order."""
    if t_a >= t_b:
        raise ValueError(f"empty window: t_a={t_a} >= t_b={t_b}")
    lo = int(np.searchsorted(stream.t, t_a, side="left"))
    hi = int(np.searchsorted(stream.t, t_b, side="left"))
    return stream.slice(lo, hi)


# ---------------------------------------------------------------------------
# scene synthesis


@dataclass(frozen=True)
class Shape:
    """One shape with a linear (optionally wall-reflected) trajectory.

    ``x``/``y`` are the top-left corner of the bounding box at t=0, velocities in px/s,
    ``intensity`` is the signed brightness offset from the background.
    """

    kind: str
    x: float
    y: float
    w: float
    h: float
    vx: float = 0.0
    vy: float = 0.0
    intensity: float = 0.5


@dataclass(frozen=True)
class ShapePopulation:
    kind: str
    count: int
    size_range: tuple[float, float] = (12.0, 28.0)
    speed_range: tuple[float, float] = (200.0, 600.0)  # px/s
    contrast_range: tuple[float, float] = (0.4, 0.8)


@dataclass(frozen=True)
class SceneSpec:
    width: int = 128
    height: int = 128
    duration: int = 1_000_000  # µs
    populations: tuple[ShapePopulation, ...] = ()
    shapes: tuple[Shape, ...] = ()
    known_kinds: tuple[str, ...] = ("rectangle",)
    noise_rate: float = 0.0  # events / pixel / s
    seed: int = 0
    contrast_threshold: float = 0.2
    annotation_period: int = 10_000  # µs, i.e. 100 Hz
    micro_step: int = 1_000  # µs
    bounce: bool = True

    def validate(self) -> None:
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("sensor size must be positive")
        if self.micro_step <= 0 or self.annotation_period <= 0:
            raise ValueError("micro_step and annotation_period must be positive")
        if self.annotation_period % self.micro_step:
            raise ValueError("annotation_period must be a multiple of micro_step")
        if not set(self.known_kinds) <= set(KINDS):
            raise ValueError(f"known_kinds must be a subset of {KINDS}")
        for pop in self.populations:
            if pop.kind not in KINDS:
                raise ValueError(f"unknown shape kind {pop.kind!r}")
            if pop.count < 0 or pop.size_range[0] <= 0:
                raise ValueError(f"invalid population {pop}")
        for s in self.shapes:
            if s.kind not in KINDS:
                raise ValueError(f"unknown shape kind {s.kind!r}")
            if s.w <= 0 or s.h <= 0:
                raise ValueError(f"zero-area shape {s}")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["populations"] = tuple(
            ShapePopulation(**{k: tuple(v) if isinstance(v, list) else v for k, v in p.items()})
            for p in d.get("populations", ())
        )
        d["shapes"] = tuple(Shape(**s) for s in d.get("shapes", ()))
        d["known_kinds"] = tuple(d.get("known_kinds", ("rectangle",)))
        return cls(**d)


def _fold(pos: np.ndarray | float, hi: float):
    """Reflect a free 1-D trajectory into ``[0, hi]`` (triangle wave)."""
    if hi <= 0:
        return np.zeros_like(pos) if isinstance(pos, np.ndarray) else 0.0
    period = 2.0 * hi
    m = np.mod(pos, period)
    return np.where(m > hi, period - m, m)


def shape_box(shape: Shape, t_us: int, spec: SceneSpec) -> tuple[float, float, float, float]:
    """Bounding box (x_min, y_min, w, h) of ``shape`` at time ``t_us``."""
    ts = t_us * 1e-6
    x = shape.x + shape.vx * ts
    y = shape.y + shape.vy * ts
    if spec.bounce:
        x = float(_fold(x, spec.width - shape.w))
        y = float(_fold(y, spec.height - shape.h))
    return (float(x), float(y), shape.w, shape.h)


def _mask(kind: str, box, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Pixel-center coverage mask of one shape."""
    x0, y0, w, h = box
    cx, cy = xs + 0.5, ys + 0.5
    if kind == "rectangle":
        return (cx >= x0) & (cx < x0 + w) & (cy >= y0) & (cy < y0 + h)
    if kind == "disc":
        u = (cx - (x0 + w / 2)) / (w / 2)
        v = (cy - (y0 + h / 2)) / (h / 2)
        return u * u + v * v <= 1.0
    if kind == "triangle":
        # apex at top-center, base along the bottom edge
        v = (cy - y0) / h
        u = np.abs(cx - (x0 + w / 2)) / (w / 2)
        return (v >= 0) & (v < 1) & (u <= v)
    raise ValueError(f"unknown shape kind {kind!r}")


def _render(shapes: Sequence[Shape], boxes, width: int, height: int) -> np.ndarray:
    img = np.zeros((height, width), np.float64)
    for s, box in zip(shapes, boxes):
        x0, y0, w, h = box
        c0, c1 = max(int(math.floor(x0)), 0), min(int(math.ceil(x0 + w)), width)
        r0, r1 = max(int(math.floor(y0)), 0), min(int(math.ceil(y0 + h)), height)
        if c1 <= c0 or r1 <= r0:
            continue
        ys, xs = np.mgrid[r0:r1, c0:c1]
        m = _mask(s.kind, box, xs, ys)
        img[r0:r1, c0:c1][m] = s.intensity  # later shapes occlude earlier ones
    return img


def _sample_shapes(spec: SceneSpec, rng: np.random.Generator) -> list[Shape]:
    out = []
    for pop in spec.populations:
        for _ in range(pop.count):
            w = float(rng.uniform(*pop.size_range))
            h = float(rng.uniform(*pop.size_range))
            x = float(rng.uniform(0, max(spec.width - w, 0)))
            y = float(rng.uniform(0, max(spec.height - h, 0)))
            speed = float(rng.uniform(*pop.speed_range))
            angle = float(rng.uniform(0, 2 * math.pi))
            contrast = float(rng.uniform(*pop.contrast_range))
            sign = 1.0 if rng.random() < 0.5 else -1.0
            out.append(Shape(pop.kind, x, y, w, h, speed * math.cos(angle), speed * math.sin(angle), sign * contrast))
    return out


def synth_scene(spec: SceneSpec) -> tuple[EventStream, list[AnnotationRecord]]:
    """Simulate a contrast-threshold sensor watching moving shapes.

    Every pixel keeps a reference brightness; at each micro-step, a change of at least
    ``contrast_threshold`` against the reference emits one event per threshold crossing
    (p=1 for brighter, p=0 for darker) and moves the reference accordingly.
    Annotations are emitted every ``annotation_period`` for every shape whose clipped box
    is non-empty; ``annotated`` is set for known kinds only.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    shapes = list(spec.shapes) + _sample_shapes(spec, rng)
    W, H = spec.width, spec.height
    first_tick = spec.annotation_period
    if not spec.bounce:
        for s in shapes:
            if _clip(shape_box(s, first_tick, spec), W, H) is None:
                raise ValueError(f"shape {s} leaves the frame before the first annotation")

    ref = np.zeros((H, W), np.float64)
    ev_t, ev_x, ev_y, ev_p = [], [], [], []
    thr = spec.contrast_threshold
    n_steps = spec.duration // spec.micro_step
    if shapes:
        ref = _render(shapes, [shape_box(s, 0, spec) for s in shapes], W, H)
    for k in range(1, n_steps + 1):
        t1 = k * spec.micro_step
        if not shapes:
            break
        img = _render(shapes, [shape_box(s, t1, spec) for s in shapes], W, H)
        diff = img - ref
        n_cross = np.floor(np.abs(diff) / thr + 1e-9).astype(np.int64)
        ys, xs = np.nonzero(n_cross)
        if len(ys) == 0:
            continue
        counts = n_cross[ys, xs]
        pol = (diff[ys, xs] > 0).astype(np.uint8)
        ref[ys, xs] += np.sign(diff[ys, xs]) * counts * thr
        xs = np.repeat(xs, counts)
        ys = np.repeat(ys, counts)
        pol = np.repeat(pol, counts)
        # spread within the micro-step so finer time bins are populated
        ts = (t1 - spec.micro_step) + rng.integers(0, spec.micro_step, len(xs))
        ev_t.append(ts)
        ev_x.append(xs)
        ev_y.append(ys)
        ev_p.append(pol)

    n_noise = int(rng.poisson(spec.noise_rate * W * H * spec.duration * 1e-6)) if spec.noise_rate > 0 else 0
    if n_noise:
        ev_t.append(rng.integers(0, spec.duration, n_noise))
        ev_x.append(rng.integers(0, W, n_noise))
        ev_y.append(rng.integers(0, H, n_noise))
        ev_p.append(rng.integers(0, 2, n_noise).astype(np.uint8))

    if ev_t:
        t = np.concatenate(ev_t).astype(np.int64)
        order = np.argsort(t, kind="stable")
        stream = EventStream(
            W, H, t[order],
            np.concatenate(ev_x)[order], np.concatenate(ev_y)[order], np.concatenate(ev_p)[order],
        )
    else:
        stream = EventStream(W, H)

    annotations = []
    known = set(spec.known_kinds)
    for tick in range(first_tick, spec.duration + 1, spec.annotation_period):
        for s in shapes:
            box = _clip(shape_box(s, tick, spec), W, H)
            if box is None:
                continue
            annotations.append(AnnotationRecord(tick, box, KIND_CLASS_ID[s.kind], s.kind in known))
    return stream, annotations


def _clip(box, width: int, height: int):
    x0, y0, w, h = box
    x1, y1 = min(x0 + w, width), min(y0 + h, height)
    x0, y0 = max(x0, 0.0), max(y0, 0.0)
    if x1 <= x0 or y1 <= y0:
        return None
    return (x0, y0, x1 - x0, y1 - y0)


# ---------------------------------------------------------------------------
# file I/O


def save_events(stream: EventStream, path: str | Path, binary: bool = False) -> None:
    path = Path(path)
    if binary:
        rec = np.empty(len(stream), BINARY_RECORD)
        rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
        with path.open("wb") as f:
            f.write(BINARY_MAGIC + struct.pack("<HH", stream.sensor_width, stream.sensor_height))
            f.write(rec.tobytes())
        return
    with path.open("w") as f:
        f.write(f"{TEXT_MAGIC} {stream.sensor_width} {stream.sensor_height}\n")
        if len(stream):
            np.savetxt(f, np.column_stack([stream.t, stream.x, stream.y, stream.p]), fmt="%d")


def load_events(path: str | Path) -> EventStream:
    path = Path(path)
    with path.open("rb") as f:
        head = f.read(4)
    if head == BINARY_MAGIC:
        stream = _load_binary(path)
    else:
        stream = _load_text(path)
    _check_stream(stream, path)
    return stream


def _load_binary(path: Path) -> EventStream:
    raw = path.read_bytes()
    if len(raw) < 8:
        raise EventFormatError(f"{path}: truncated header at byte 0")
    width, height = struct.unpack("<HH", raw[4:8])
    body = len(raw) - 8
    if body % BINARY_RECORD.itemsize:
        whole = body // BINARY_RECORD.itemsize
        raise EventFormatError(f"{path}: truncated record at byte {8 + whole * BINARY_RECORD.itemsize}")
    rec = np.frombuffer(raw, BINARY_RECORD, offset=8)
    if len(rec) and rec["t"].max() > np.iinfo(np.int64).max:
        raise EventFormatError(f"{path}: timestamp overflow")
    return EventStream(width, height, rec["t"].astype(np.int64), rec["x"], rec["y"], rec["p"])


def _load_text(path: Path) -> EventStream:
    with path.open("r") as f:
        header = f.readline().split()
        if len(header) != 3 or header[0] != TEXT_MAGIC:
            raise EventFormatError(f"{path}: line 1: expected '{TEXT_MAGIC} <width> <height>'")
        try:
            width, height = int(header[1]), int(header[2])
        except ValueError:
            raise EventFormatError(f"{path}: line 1: malformed sensor size") from None
        cols: list[list[int]] = [[], [], [], []]
        for lineno, line in enumerate(f, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise EventFormatError(f"{path}: line {lineno}: expected 't x y p', got {line.strip()!r}")
            try:
                vals = [int(v) for v in parts]
            except ValueError:
                raise EventFormatError(f"{path}: line {lineno}: non-integer field in {line.strip()!r}") from None
            t, x, y, p = vals
            if t < 0 or not (0 <= x < width) or not (0 <= y < height) or p not in (0, 1):
                raise EventFormatError(f"{path}: line {lineno}: field out of range in {line.strip()!r}")
            for c, v in zip(cols, vals):
                c.append(v)
    return EventStream(width, height, np.array(cols[0], np.int64), np.array(cols[1]), np.array(cols[2]),
                       np.array(cols[3]))


def _check_stream(stream: EventStream, path: Path) -> None:
    if len(stream) == 0:
        return
    if int(stream.x.max()) >= stream.sensor_width or int(stream.y.max()) >= stream.sensor_height:
        i = int(np.argmax((stream.x >= stream.sensor_width) | (stream.y >= stream.sensor_height)))
        raise EventFormatError(f"{path}: event {i} outside sensor bounds")
    if int(stream.p.max()) > 1:
        raise EventFormatError(f"{path}: event {int(np.argmax(stream.p > 1))} has polarity > 1")
    d = np.diff(stream.t)
    if np.any(d < 0):
        i = int(np.argmax(d < 0)) + 1
        raise EventFormatError(f"{path}: timestamps not sorted at event {i} (t={int(stream.t[i])})")


def save_annotations(records: Iterable[AnnotationRecord], path: str | Path) -> None:
    with Path(path).open("w") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def load_annotations(path: str | Path) -> list[AnnotationRecord]:
    out = []
    with Path(path).open("r") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                rec = AnnotationRecord(
                    int(d["t"]), (float(d["x_min"]), float(d["y_min"]), float(d["w"]), float(d["h"])),
                    int(d["class_id"]), bool(d["annotated"]),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise EventFormatError(f"{path}: line {lineno}: {exc}") from None
            if rec.box[2] <= 0 or rec.box[3] <= 0:
                raise EventFormatError(f"{path}: line {lineno}: non-positive box size")
            out.append(rec)
    return out


def annotations_by_time(records: Iterable[AnnotationRecord]) -> dict[int, list[AnnotationRecord]]:
    frames: dict[int, list[AnnotationRecord]] = {}
    for r in records:
        frames.setdefault(r.t, []).append(r)
    return frames
