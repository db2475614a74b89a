"""The detector: recurrent backbone followed by the two dense heads."""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .backbone import Backbone, BackboneConfig, RecurrentState, detach_state, reset_state
from .heads import (
    CellPredictions,
    DualRegressorHead,
    HeadConfig,
    HeadTemporalBuffer,
    ObjectnessHead,
    PriorGrid,
    init_output_layers_,
    temporal_iou,
)
from .nncore import init_conv_


@dataclass(frozen=True)
class DetectorConfig:
    height: int = 128
    width: int = 128
    T: int = 5
    channels: tuple[int, ...] = (16, 32, 64)
    strides: tuple[int, ...] = (4, 2, 2)
    head_width: int = 64
    dropout: float = 0.1
    dual_regressor: bool = True
    disentangled: bool = True

    @property
    def backbone(self) -> BackboneConfig:
        return BackboneConfig(2 * self.T, tuple(self.channels), tuple(self.strides))

    @property
    def head(self) -> HeadConfig:
        return HeadConfig(self.channels[-1], self.head_width, self.dropout, self.dual_regressor, self.disentangled)

    @property
    def grid(self) -> PriorGrid:
        s = self.backbone.total_stride
        return PriorGrid(self.height // s, self.width // s, s)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["strides"] = list(self.strides)
        return d


def _generator(seed: int, name: str) -> torch.Generator:
    return torch.Generator().manual_seed((seed * 1_000_003 + zlib.crc32(name.encode())) % (2**63))


@dataclass
class StreamState:
    """Everything a rollout carries between frames."""

    recurrent: RecurrentState
    buffer: HeadTemporalBuffer = field(default_factory=HeadTemporalBuffer)

    def detached(self) -> "StreamState":
        prev = self.buffer.previous
        return StreamState(detach_state(self.recurrent),
                           HeadTemporalBuffer(None if prev is None else prev.detach(), self.buffer.valid))


class Detector(nn.Module):
    def __init__(self, config: DetectorConfig, seed: int = 0):
        super().__init__()
        config.backbone.check_input(config.height, config.width)
        self.config = config
        self.grid = config.grid
        self.backbone = Backbone(config.backbone)
        self.regressor = DualRegressorHead(config.head)
        self.objectness = ObjectnessHead(config.head)
        # per-module generators: a layer's init does not depend on which optional branches exist
        for name, m in self.named_modules():
            if isinstance(m, nn.Conv2d):
                init_conv_(m, _generator(seed, name))
        init_output_layers_(self.regressor, self.objectness, _generator(seed, "outputs"))

    def initial_state(self) -> StreamState:
        return StreamState(reset_state(self.config.backbone))

    def forward(self, x: torch.Tensor, state: StreamState, generator: torch.Generator | None = None
                ) -> tuple[CellPredictions, StreamState]:
        """One frame. Dropout is active only when ``self.training`` is set."""
        feats, rstate = self.backbone(x, state.recurrent)
        box_a, box_b, fused, iou_s = self.regressor(feats.tensor, self.grid, self.training, generator)
        o_pn, o_po = self.objectness(feats.tensor)
        iou_t, buffer = temporal_iou(fused, iou_s, state.buffer)
        preds = CellPredictions(box_a, box_b, fused, o_pn, o_po, o_pn * o_po, iou_s, iou_t)
        return preds, StreamState(rstate, buffer)
