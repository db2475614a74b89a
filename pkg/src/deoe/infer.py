"""Stream inference: fused objectness and boxes, class-agnostic NMS, latency stats, outputs."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
import torch

from .heads import iou
from .model import Detector, StreamState

SCORE_THRESHOLD = 0.05
NMS_IOU = 0.65
MAX_DETECTIONS = 300


@dataclass(frozen=True)
class Detection:
    obj: float
    box: tuple[float, float, float, float]  # x_min, y_min, w, h


@dataclass
class DetectionSet:
    t: int
    detections: list[Detection] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.detections)

    def top(self, k: int) -> "DetectionSet":
        return DetectionSet(self.t, self.detections[:k])


def _sort_key(d: Detection):
    # descending score, then box coordinates for a stable, total order
    return (-d.obj, *d.box)


def nms(detections: Iterable[Detection], iou_threshold: float = NMS_IOU, t: int = 0) -> DetectionSet:
    """Greedy suppression: keep the best box, drop others with IoU >= threshold against any kept box."""
    ordered = sorted(detections, key=_sort_key)
    if not ordered:
        return DetectionSet(t, [])
    boxes = torch.tensor([d.box for d in ordered], dtype=torch.float64)
    ious = iou(boxes[:, None, :], boxes[None, :, :]).numpy()
    suppressed = np.zeros(len(ordered), bool)
    keep = []
    for i in range(len(ordered)):
        if suppressed[i]:
            continue
        keep.append(ordered[i])
        suppressed |= ious[i] >= iou_threshold
    return DetectionSet(t, keep)


def clip_box(box, width: int, height: int):
    x0, y0, w, h = box
    x1, y1 = min(x0 + w, width), min(y0 + h, height)
    x0, y0 = max(x0, 0.0), max(y0, 0.0)
    if x1 <= x0 or y1 <= y0:
        return None
    return (x0, y0, x1 - x0, y1 - y0)


@torch.no_grad()
def predict_frame(model: Detector, tensor: np.ndarray | torch.Tensor, state: StreamState, t: int = 0,
                  score_threshold: float = SCORE_THRESHOLD, nms_iou: float = NMS_IOU,
                  max_detections: int = MAX_DETECTIONS, scale: float = 1.0) -> tuple[DetectionSet, StreamState]:
    """Detections for one (2T, H, W) frame; ``scale`` maps model pixels to output pixels."""
    if model.training:
        raise RuntimeError("predict_frame needs the model in eval mode")
    x = torch.as_tensor(tensor, dtype=next(model.parameters()).dtype)
    if x.dim() == 3:
        x = x[None]
    preds, state = model(x, state)
    obj = preds.obj_fused[0]
    boxes = preds.box_fused[0]
    cand = torch.nonzero(obj >= score_threshold).reshape(-1)
    cfg = model.config
    dets = []
    for c in cand.tolist():
        box = clip_box(tuple(float(v) for v in boxes[c]), cfg.width, cfg.height)
        if box is None:
            continue
        if scale != 1.0:
            box = tuple(v * scale for v in box)
        dets.append(Detection(float(obj[c]), box))
    out = nms(dets, nms_iou, t)
    return out.top(max_detections), state


def frame_times(t_start: int, t_end: int, delta_t: int) -> list[int]:
    """Frame end timestamps delta_t, 2·delta_t, ... within (t_start, t_end]."""
    first = (t_start // delta_t + 1) * delta_t
    return list(range(first, t_end + 1, delta_t))


def run_stream(model: Detector, frames: Iterable[tuple[int, np.ndarray]], **kw) -> Iterator[DetectionSet]:
    """Stateful inference over (timestamp, tensor) frames in time order."""
    model.eval()
    state = model.initial_state()
    for t, tensor in frames:
        dets, state = predict_frame(model, tensor, state, t=t, **kw)
        yield dets


def save_predictions(sets: Iterable[DetectionSet], path: str | Path) -> None:
    with Path(path).open("w") as f:
        for ds in sets:
            for d in ds.detections:
                x, y, w, h = d.box
                f.write(json.dumps({"t": ds.t, "obj": d.obj, "x": x, "y": y, "w": w, "h": h}, sort_keys=True) + "\n")


def load_predictions(path: str | Path) -> dict[int, list[Detection]]:
    frames: dict[int, list[Detection]] = {}
    with Path(path).open() as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                det = Detection(float(d["obj"]), (float(d["x"]), float(d["y"]), float(d["w"]), float(d["h"])))
                frames.setdefault(int(d["t"]), []).append(det)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
    return frames


def render_overlay(counts: np.ndarray, detections: DetectionSet, path: str | Path,
                   gt_boxes: Iterable = ()) -> None:
    """PNG of the event-count image with detections (green) and optional GT (red)."""
    from PIL import Image, ImageDraw

    img = counts.sum(axis=0) if counts.ndim == 3 else counts
    peak = float(img.max()) or 1.0
    gray = (255 * np.clip(img / peak, 0, 1)).astype(np.uint8)
    im = Image.fromarray(gray).convert("RGB")
    draw = ImageDraw.Draw(im)
    for box in gt_boxes:
        x, y, w, h = box
        draw.rectangle([x, y, x + w - 1, y + h - 1], outline=(255, 0, 0))
    for d in detections.detections:
        x, y, w, h = d.box
        draw.rectangle([x, y, x + w - 1, y + h - 1], outline=(0, 255, 0))
    im.save(path, format="PNG")


@dataclass
class LatencyStats:
    frames: int
    height: int
    width: int
    mean_ms: float
    p50_ms: float
    p99_ms: float
    min_ms: float
    max_ms: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def bench_inference(model: Detector, tensors: list[np.ndarray], warmup: int = 3) -> LatencyStats:
    """Per-frame wall clock from tensor in to detections out, batch 1."""
    model.eval()
    state = model.initial_state()
    for tensor in tensors[:warmup]:
        _, state = predict_frame(model, tensor, state)
    state = model.initial_state()
    samples = []
    for i, tensor in enumerate(tensors):
        t0 = time.perf_counter()
        _, state = predict_frame(model, tensor, state, t=i)
        samples.append((time.perf_counter() - t0) * 1e3)
    a = np.asarray(samples)
    cfg = model.config
    return LatencyStats(len(a), cfg.height, cfg.width, float(a.mean()), float(np.percentile(a, 50)),
                        float(np.percentile(a, 99)), float(a.min()), float(a.max()))
