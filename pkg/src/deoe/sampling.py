"""Sample assignment, potential-sample screening and the baseline variants.

All functions here work on one batch element at a time and never record gradients.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import torch

from .heads import CellPredictions, PriorGrid, iou_matrix

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


class VariantMode(str, enum.Enum):
    DEOE = "deoe"
    CA = "ca"
    CA_O = "ca_o"
    CA_P = "ca_p"
    ORACLE = "oracle"

    @classmethod
    def parse(cls, value: "str | VariantMode") -> "VariantMode":
        try:
            return cls(str(getattr(value, "value", value)).lower())
        except ValueError:
            raise ValueError(f"unknown variant {value!r}; expected one of {[m.value for m in cls]}") from None


@dataclass(frozen=True)
class ScreeningConfig:
    potential_count: int = 35
    pos_iou: float = 0.5
    neg_iou: float = 0.4

    def __post_init__(self):
        if self.potential_count < 0:
            raise ValueError("potential_count must be >= 0")
        if not self.pos_iou > self.neg_iou:
            raise ValueError("positive IoU threshold must exceed the negative one")


@dataclass
class Assignment:
    status: torch.Tensor  # (N,) int8: 1 positive, 0 negative, -1 ignore
    matched: torch.Tensor  # (N,) int64 GT index for positives, -1 elsewhere
    iou_g: torch.Tensor  # (N,) float64, prior/GT IoU for positives, 0 elsewhere

    @property
    def positives(self) -> torch.Tensor:
        return torch.nonzero(self.status == POSITIVE).reshape(-1)

    @property
    def negatives(self) -> torch.Tensor:
        return torch.nonzero(self.status == NEGATIVE).reshape(-1)


@dataclass
class PotentialSet:
    cells: torch.Tensor  # (K,) int64, sorted by non-increasing score
    scores: torch.Tensor
    weights: torch.Tensor
    iou_s: torch.Tensor

    @classmethod
    def empty(cls) -> "PotentialSet":
        z = torch.zeros(0, dtype=torch.float64)
        return cls(torch.zeros(0, dtype=torch.long), z, z.clone(), z.clone())

    def __len__(self) -> int:
        return len(self.cells)


def assign(grid: PriorGrid, gt: torch.Tensor, cfg: ScreeningConfig | None = None) -> Assignment:
    """Label prior cells against GT boxes (G, 4).

    Positive if the best IoU is >= pos threshold (matched to the first best GT),
    negative if below the neg threshold, ignored in between. Each GT without a
    positive then claims its best cell (lowest cell index on ties), in GT order;
    a cell already claimed this way keeps its first owner.
    """
    cfg = cfg or ScreeningConfig()
    n = grid.num_cells
    status = torch.full((n,), NEGATIVE, dtype=torch.int8)
    matched = torch.full((n,), -1, dtype=torch.long)
    iou_g = torch.zeros(n, dtype=torch.float64)
    gt = torch.as_tensor(gt, dtype=torch.float64).reshape(-1, 4)
    if len(gt) == 0:
        return Assignment(status, matched, iou_g)
    ious = iou_matrix(grid.prior_boxes(torch.float64), gt)  # (N, G)
    best, arg = ious.max(dim=1)  # first maximum on ties
    pos = best >= cfg.pos_iou
    status[best >= cfg.neg_iou] = IGNORE
    status[pos] = POSITIVE
    matched[pos] = arg[pos]
    iou_g[pos] = best[pos]
    forced = torch.zeros(n, dtype=torch.bool)
    for g in range(len(gt)):
        if bool((matched == g).any()):
            continue
        col = ious[:, g]
        cell = int(torch.argmax(col))
        if forced[cell]:
            continue
        forced[cell] = True
        status[cell] = POSITIVE
        matched[cell] = g
        iou_g[cell] = col[cell]
    return Assignment(status, matched, iou_g)


def score_potential(obj, iou_s, iou_t):
    """Obj * sqrt(IoU_S * IoU_T)."""
    if isinstance(obj, torch.Tensor) or isinstance(iou_s, torch.Tensor) or isinstance(iou_t, torch.Tensor):
        return obj * torch.sqrt(torch.as_tensor(iou_s) * iou_t)
    return obj * (iou_s * iou_t) ** 0.5


def potential_weight(obj, iou_s):
    """sqrt(Obj * IoU_S), in [0, 1] for inputs in [0, 1]."""
    if isinstance(obj, torch.Tensor) or isinstance(iou_s, torch.Tensor):
        return torch.sqrt(torch.as_tensor(obj) * iou_s)
    return (obj * iou_s) ** 0.5


def _top_negatives(scores: torch.Tensor, asg: Assignment, count: int,
                   eligible: torch.Tensor | None = None) -> torch.Tensor:
    neg = asg.negatives
    if eligible is not None:
        neg = neg[eligible[neg]]
    if count <= 0 or len(neg) == 0:
        return torch.zeros(0, dtype=torch.long)
    # stable sort keeps lower cell index first among equal scores
    order = torch.sort(scores[neg], descending=True, stable=True).indices
    return neg[order[:count]]


def screen_potentials(obj: torch.Tensor, iou_s: torch.Tensor, iou_t: torch.Tensor, asg: Assignment,
                      cfg: ScreeningConfig, eligible: torch.Tensor | None = None) -> PotentialSet:
    """Top-N negative cells by Obj·sqrt(IoU_S·IoU_T), with weights sqrt(Obj·IoU_S).

    ``eligible`` (bool per cell) optionally narrows the candidate negatives.
    """
    obj = obj.detach().to(torch.float64)
    iou_s = iou_s.detach().to(torch.float64)
    iou_t = iou_t.detach().to(torch.float64)
    scores = score_potential(obj, iou_s, iou_t)
    cells = _top_negatives(scores, asg, cfg.potential_count, eligible)
    return PotentialSet(cells, scores[cells], potential_weight(obj[cells], iou_s[cells]), iou_s[cells])


def renormalize_weights(losses: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Rescale weights so that sum(w̃·ℓ) == sum(ℓ); relative weighting is kept."""
    losses = losses.detach()
    weights = weights.detach()
    weighted = (weights * losses).sum()
    if weighted <= 0:
        return weights
    return weights * (losses.sum() / weighted)


@dataclass
class SampleSelection:
    """Effective supervision for one batch element of one frame."""

    assignment: Assignment
    gt: torch.Tensor  # (G, 4) boxes the assignment indexes into
    potentials: PotentialSet
    positive_target_iou: bool = False  # positives trained toward IoU_G instead of 1


def variant_assign(mode: VariantMode, known_gt: torch.Tensor, obj: torch.Tensor, iou_s: torch.Tensor,
                   iou_t: torch.Tensor, grid: PriorGrid, cfg: ScreeningConfig,
                   full_gt: torch.Tensor | None = None, screening: bool = True,
                   eligible: torch.Tensor | None = None) -> SampleSelection:
    """Positives and potentials for one element under a training variant.

    ``screening`` disables potential mining for DEOE configurations without the
    dual regressor (its spatial IoU is the screening signal).
    """
    mode = VariantMode.parse(mode)
    if mode is VariantMode.ORACLE:
        if full_gt is None:
            raise ValueError("oracle variant needs the full (annotated + unannotated) ground truth")
        return SampleSelection(assign(grid, full_gt, cfg), torch.as_tensor(full_gt, dtype=torch.float64),
                               PotentialSet.empty())
    known_gt = torch.as_tensor(known_gt, dtype=torch.float64).reshape(-1, 4)
    asg = assign(grid, known_gt, cfg)
    if mode is VariantMode.DEOE:
        pots = screen_potentials(obj, iou_s, iou_t, asg, cfg, eligible) if screening else PotentialSet.empty()
        return SampleSelection(asg, known_gt, pots)
    if mode is VariantMode.CA_P:
        o = obj.detach().to(torch.float64)
        cells = _top_negatives(o, asg, cfg.potential_count)
        ones = torch.ones(len(cells), dtype=torch.float64)
        pots = PotentialSet(cells, o[cells], ones, iou_s.detach().to(torch.float64)[cells])
        return SampleSelection(asg, known_gt, pots)
    return SampleSelection(asg, known_gt, PotentialSet.empty(), positive_target_iou=mode is VariantMode.CA_O)
