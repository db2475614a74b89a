"""Dense polarity/time histograms of event windows."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .events import EventStream


@dataclass
class EventTensor:
    data: np.ndarray  # (2T, H, W) float32
    T: int
    t_a: int
    t_b: int

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


def bin_index(t_k, t_a: int, t_b: int, T: int):
    """Temporal bin of timestamp(s) ``t_k``; ``t_k == t_b`` lands in the last bin."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if t_b <= t_a:
        raise ValueError("t_b must exceed t_a")
    tk = np.asarray(t_k, dtype=np.int64)
    if np.any(tk < t_a) or np.any(tk > t_b):
        raise ValueError(f"timestamp outside [{t_a}, {t_b}]")
    # integer arithmetic keeps the floor exact
    tau = (tk - t_a) * T // (t_b - t_a)
    tau = np.minimum(tau, T - 1)
    return int(tau) if np.ndim(t_k) == 0 else tau


def encode_window(events: EventStream, t_a: int, t_b: int, T: int, H: int, W: int) -> EventTensor:
    """Count events per (polarity, bin, pixel) into a (2T, H, W) tensor.

    Channel ``p * T + tau`` holds polarity ``p`` at bin ``tau``.
    """
    n = len(events)
    if n == 0:
        if T < 1:
            raise ValueError("T must be >= 1")
        return EventTensor(np.zeros((2 * T, H, W), np.float32), T, t_a, t_b)
    x = events.x.astype(np.int64)
    y = events.y.astype(np.int64)
    p = events.p.astype(np.int64)
    if x.max() >= W or y.max() >= H or p.max() > 1:
        raise ValueError("event outside tensor bounds")
    tau = bin_index(events.t, t_a, t_b, T)
    flat = ((p * T + tau) * H + y) * W + x
    counts = np.bincount(flat, minlength=2 * T * H * W)
    return EventTensor(counts.astype(np.float32).reshape(2 * T, H, W), T, t_a, t_b)


def downsample2x(tensor: EventTensor) -> EventTensor:
    """2x2 sum pooling (event counts are preserved)."""
    c, h, w = tensor.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"spatial size {h}x{w} is not even")
    data = tensor.data.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4), dtype=np.float32)
    return EventTensor(data, tensor.T, tensor.t_a, tensor.t_b)


def save_tensor(tensor: EventTensor, path: str | Path) -> None:
    """Debug dump: three little-endian u32 dims then row-major float32 values."""
    c, h, w = tensor.data.shape
    with Path(path).open("wb") as f:
        f.write(struct.pack("<III", c, h, w))
        f.write(tensor.data.astype("<f4").tobytes())


def load_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    c, h, w = struct.unpack("<III", raw[:12])
    data = np.frombuffer(raw, "<f4", offset=12)
    if data.size != c * h * w:
        raise ValueError(f"{path}: expected {c * h * w} values, found {data.size}")
    return data.reshape(c, h, w).copy()
