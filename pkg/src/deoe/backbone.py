"""Stateful convolutional feature extractor for event-tensor sequences."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .nncore import ConvGRUCell


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 10  # 2T
    channels: tuple[int, ...] = (16, 32, 64)
    strides: tuple[int, ...] = (4, 2, 2)

    @property
    def total_stride(self) -> int:
        s = 1
        for v in self.strides:
            s *= v
        return s

    def check_input(self, height: int, width: int) -> None:
        s = self.total_stride
        if height % s or width % s:
            raise ValueError(f"input {height}x{width} not divisible by total stride {s}")


@dataclass
class RecurrentState:
    hidden: list[torch.Tensor | None] = field(default_factory=list)
    step: int = 0


@dataclass
class FeatureMap:
    tensor: torch.Tensor  # (B, C, H_f, W_f)
    stride: int


def reset_state(config: BackboneConfig, batch: int | None = None, height: int | None = None,
                width: int | None = None, dtype: torch.dtype = torch.float32) -> RecurrentState:
    """Fresh all-zero state.

    Without input sizes the zero tensors are allocated lazily by the first forward.
    """
    if batch is None or height is None or width is None:
        return RecurrentState([None] * len(config.channels), 0)
    config.check_input(height, width)
    hidden = []
    for c, s in zip(config.channels, config.strides):
        height, width = height // s, width // s
        hidden.append(torch.zeros(batch, c, height, width, dtype=dtype))
    return RecurrentState(hidden, 0)


def detach_state(state: RecurrentState) -> RecurrentState:
    return RecurrentState([None if h is None else h.detach() for h in state.hidden], state.step)


class Backbone(nn.Module):
    """Per stage: strided conv -> SiLU -> ConvGRU. Returns the last hidden as features."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        if len(config.channels) != len(config.strides):
            raise ValueError("channels and strides must have the same length")
        self.config = config
        self.downs = nn.ModuleList()
        self.cells = nn.ModuleList()
        c_in = config.in_channels
        for c, s in zip(config.channels, config.strides):
            # kernel 2s-1, pad s-1: overlapping patches with output size exactly H/s
            self.downs.append(nn.Conv2d(c_in, c, 2 * s - 1, stride=s, padding=s - 1))
            self.cells.append(ConvGRUCell(c, c))
            c_in = c

    def forward(self, x: torch.Tensor, state: RecurrentState) -> tuple[FeatureMap, RecurrentState]:
        cfg = self.config
        if x.dim() != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected (B, {cfg.in_channels}, H, W) input, got {tuple(x.shape)}")
        cfg.check_input(x.shape[2], x.shape[3])
        if len(state.hidden) != len(self.cells):
            raise ValueError("state does not match backbone depth")
        new_hidden = []
        for down, cell, h in zip(self.downs, self.cells, state.hidden):
            x = F.silu(down(x))
            if h is None:
                h = x.new_zeros(x.shape[0], cell.hidden_channels, x.shape[2], x.shape[3])
            elif h.shape[0] != x.shape[0] or h.shape[2:] != x.shape[2:]:
                raise ValueError(f"hidden {tuple(h.shape)} does not match stage input {tuple(x.shape)}")
            x = cell(x, h)
            new_hidden.append(x)
        return FeatureMap(x, cfg.total_stride), RecurrentState(new_hidden, state.step + 1)
