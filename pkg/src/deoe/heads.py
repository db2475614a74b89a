"""Dual regressor head, disentangled objectness head, and prediction fusion.

Per-cell tensors are laid out as (B, N) or (B, N, 4) with cells in row-major order
over the feature grid; boxes are (x_min, y_min, w, h) in input pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .nncore import OBJ_BIAS_INIT, dropout_apply

MAX_LOG_SIZE = 4.0


@dataclass(frozen=True)
class PriorGrid:
    height: int  # cells
    width: int
    stride: int

    @property
    def num_cells(self) -> int:
        return self.height * self.width

    def centers(self, dtype=torch.float32) -> torch.Tensor:
        """(N, 2) cell centers ((j + 0.5) s, (i + 0.5) s)."""
        i, j = torch.meshgrid(torch.arange(self.height, dtype=dtype), torch.arange(self.width, dtype=dtype),
                              indexing="ij")
        return torch.stack([(j.reshape(-1) + 0.5) * self.stride, (i.reshape(-1) + 0.5) * self.stride], dim=1)

    def prior_boxes(self, dtype=torch.float32) -> torch.Tensor:
        """(N, 4) squares of side ``stride`` centered on each cell."""
        c = self.centers(dtype)
        s = float(self.stride)
        return torch.cat([c - s / 2, torch.full_like(c, s)], dim=1)


@dataclass
class CellPredictions:
    box_a: torch.Tensor
    box_b: torch.Tensor
    box_fused: torch.Tensor
    o_pn: torch.Tensor
    o_po: torch.Tensor
    obj_fused: torch.Tensor
    iou_s: torch.Tensor
    iou_t: torch.Tensor | None = None


@dataclass
class HeadTemporalBuffer:
    previous: torch.Tensor | None = None  # (B, N, 4) fused boxes, detached
    valid: bool = False


# ---------------------------------------------------------------------------
# box geometry


def iou(a, b):
    """IoU of (..., 4) xywh boxes; plain tuples give a float."""
    if not isinstance(a, torch.Tensor):
        return _iou_scalar(a, b)
    ax1, ay1 = a[..., 0] + a[..., 2], a[..., 1] + a[..., 3]
    bx1, by1 = b[..., 0] + b[..., 2], b[..., 1] + b[..., 3]
    iw = (torch.minimum(ax1, bx1) - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0)
    ih = (torch.minimum(ay1, by1) - torch.maximum(a[..., 1], b[..., 1])).clamp(min=0)
    inter = iw * ih
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return inter / union


def _iou_scalar(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def iou_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU between (N, 4) and (M, 4) boxes."""
    return iou(a[:, None, :], b[None, :, :])


def decode(offsets: torch.Tensor, grid: PriorGrid) -> torch.Tensor:
    """(B, N, 4) offsets (dx, dy, dw, dh) -> xywh boxes."""
    s = float(grid.stride)
    centers = grid.centers(offsets.dtype)
    c = centers + offsets[..., :2] * s
    wh = s * torch.exp(offsets[..., 2:].clamp(max=MAX_LOG_SIZE))
    return torch.cat([c - wh / 2, wh], dim=-1)


def encode(boxes: torch.Tensor, grid: PriorGrid) -> torch.Tensor:
    """Inverse of :func:`decode`."""
    s = float(grid.stride)
    centers = grid.centers(boxes.dtype)
    c = boxes[..., :2] + boxes[..., 2:] / 2
    return torch.cat([(c - centers) / s, torch.log(boxes[..., 2:] / s)], dim=-1)


# ---------------------------------------------------------------------------
# modules


@dataclass(frozen=True)
class HeadConfig:
    in_channels: int = 64
    width: int = 64
    dropout: float = 0.1
    dual_regressor: bool = True
    disentangled: bool = True


class _Branch(nn.Module):
    """Two 3x3 conv + SiLU layers, then a 1x1 projection."""

    def __init__(self, c_in: int, width: int, c_out: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.out = nn.Conv2d(width, c_out, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.silu(self.conv1(x))
        x = F.silu(self.conv2(x))
        return self.out(x)


def _cells(x: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, H*W, C)."""
    return x.flatten(2).transpose(1, 2)


class DualRegressorHead(nn.Module):
    def __init__(self, cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        self.branch_a = _Branch(cfg.in_channels, cfg.width, 4)
        self.branch_b = _Branch(cfg.in_channels, cfg.width, 4) if cfg.dual_regressor else None

    def forward(self, features: torch.Tensor, grid: PriorGrid, training: bool = False,
                generator: torch.Generator | None = None):
        return dual_regressor_forward(self, features, grid, training, generator)


def dual_regressor_forward(head: DualRegressorHead, features: torch.Tensor, grid: PriorGrid,
                           training: bool = False, generator: torch.Generator | None = None):
    """Returns (box_a, box_b, box_fused, iou_s); each branch sees its own dropout mask."""
    _check_grid(features, grid, head.cfg.in_channels)
    if head.branch_b is None:
        box = decode(_cells(head.branch_a(features)), grid)
        ones = box.new_ones(box.shape[:-1])
        return box, box, box, ones
    rate = head.cfg.dropout
    xa = dropout_apply(features, rate, training, generator)
    xb = dropout_apply(features, rate, training, generator)
    box_a = decode(_cells(head.branch_a(xa)), grid)
    box_b = decode(_cells(head.branch_b(xb)), grid)
    fused = (box_a + box_b) / 2
    return box_a, box_b, fused, iou(box_a, box_b)


class ObjectnessHead(nn.Module):
    def __init__(self, cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        self.pn = _Branch(cfg.in_channels, cfg.width, 1)
        self.po = _Branch(cfg.in_channels, cfg.width, 1) if cfg.disentangled else None

    def forward(self, features: torch.Tensor):
        return objectness_forward(self, features)


def objectness_forward(head: ObjectnessHead, features: torch.Tensor):
    """Returns (o_pn, o_po) probabilities; without the positive-only branch o_po is 1."""
    if features.dim() != 4 or features.shape[1] != head.cfg.in_channels:
        raise ValueError(f"expected (B, {head.cfg.in_channels}, H, W) features, got {tuple(features.shape)}")
    o_pn = torch.sigmoid(_cells(head.pn(features))[..., 0])
    if head.po is None:
        return o_pn, torch.ones_like(o_pn)
    return o_pn, torch.sigmoid(_cells(head.po(features))[..., 0])


def _check_grid(features: torch.Tensor, grid: PriorGrid, channels: int) -> None:
    if features.dim() != 4 or features.shape[1] != channels:
        raise ValueError(f"expected (B, {channels}, H, W) features, got {tuple(features.shape)}")
    if features.shape[2] != grid.height or features.shape[3] != grid.width:
        raise ValueError(f"features {tuple(features.shape[2:])} do not match grid {grid.height}x{grid.width}")


def temporal_iou(current_fused: torch.Tensor, iou_s: torch.Tensor,
                 buffer: HeadTemporalBuffer) -> tuple[torch.Tensor, HeadTemporalBuffer]:
    """IoU of each cell's fused box with the same cell's box one step earlier.

    At sequence start (invalid buffer) the spatial IoU is used instead.
    """
    cur = current_fused.detach()
    if buffer.valid and buffer.previous is not None:
        if buffer.previous.shape != cur.shape:
            raise ValueError("temporal buffer shape does not match predictions")
        iou_t = iou(cur, buffer.previous)
    else:
        iou_t = iou_s.detach().clone()
    return iou_t, HeadTemporalBuffer(cur, True)


def init_output_layers_(reg: DualRegressorHead, obj: ObjectnessHead, generator: torch.Generator,
                        scale: float = 0.01) -> None:
    """Small output projections; objectness bias set so the initial probability is σ(-2)."""
    with torch.no_grad():
        for br in (reg.branch_a, reg.branch_b, obj.pn, obj.po):
            if br is None:
                continue
            w = br.out.weight
            w.copy_((torch.rand(w.shape, generator=generator, dtype=torch.float64) * 2 - 1) * scale)
            br.out.bias.zero_()
        for br in (obj.pn, obj.po):
            if br is not None:
                br.out.bias.fill_(OBJ_BIAS_INIT)
