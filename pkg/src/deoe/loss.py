"""Training losses: spatial consistency, IoU regression, and the two objectness branches.

Every term is a per-subset mean; empty subsets contribute zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .heads import CellPredictions, iou
from .nncore import bce
from .sampling import SampleSelection, renormalize_weights

SP_EPS = 1e-16


@dataclass
class LossBreakdown:
    l_sp: torch.Tensor
    l_iou: torch.Tensor
    l_pn: torch.Tensor
    l_po: torch.Tensor
    total: torch.Tensor
    n_pos: int = 0
    n_pot: int = 0
    n_neg: int = 0

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(
            self.l_sp + other.l_sp, self.l_iou + other.l_iou, self.l_pn + other.l_pn, self.l_po + other.l_po,
            self.total + other.total, self.n_pos + other.n_pos, self.n_pot + other.n_pot, self.n_neg + other.n_neg,
        )

    def detached(self) -> "LossBreakdown":
        return LossBreakdown(self.l_sp.detach(), self.l_iou.detach(), self.l_pn.detach(), self.l_po.detach(),
                             self.total.detach(), self.n_pos, self.n_pot, self.n_neg)

    def as_row(self, step: int) -> list:
        return [step, float(self.l_pn), float(self.l_po), float(self.l_sp), float(self.l_iou), float(self.total),
                self.n_pos, self.n_pot]


CSV_HEADER = ["step", "l_pn", "l_po", "l_sp", "l_iou", "total", "n_pos", "n_pot"]


def _mean(x: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return x.mean() if x.numel() else like.new_zeros(())


def loss_spatial(iou_s: torch.Tensor) -> torch.Tensor:
    """Mean of -log(IoU_S + 1e-16) over positives and potentials."""
    return _mean(-torch.log(iou_s + SP_EPS), iou_s)


def loss_iou(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean of 1 - IoU(pred, gt) over positives."""
    return _mean(1.0 - iou(pred, gt.to(pred.dtype)), pred)


def loss_pn(o_pos: torch.Tensor, o_pot: torch.Tensor, w_tilde: torch.Tensor, o_neg: torch.Tensor,
            pos_target=1.0) -> torch.Tensor:
    """Positive-negative branch: positives and weighted potentials toward 1, negatives toward 0."""
    ref = o_pos if o_pos.numel() else o_neg
    l_pos = _mean(bce(o_pos, pos_target), ref)
    l_pot = _mean(w_tilde.detach().to(o_pot.dtype) * bce(o_pot, 1.0), ref)
    l_neg = _mean(bce(o_neg, 0.0), ref)
    return l_pos + l_pot + l_neg


def loss_po(o_pos: torch.Tensor, iou_g: torch.Tensor, o_pot: torch.Tensor, iou_s_pot: torch.Tensor) -> torch.Tensor:
    """Positive-only branch: soft targets IoU_G for positives, IoU_S for potentials; no negatives."""
    ref = o_pos if o_pos.numel() else o_pot
    l_pos = _mean(bce(o_pos, iou_g.detach().to(o_pos.dtype)), ref)
    l_pot = _mean(bce(o_pot, iou_s_pot.detach().to(o_pot.dtype)), ref)
    return l_pos + l_pot


def total_loss(l_pn, l_po, l_sp, l_iou, n_pos: int = 0, n_pot: int = 0, n_neg: int = 0) -> LossBreakdown:
    return LossBreakdown(l_sp, l_iou, l_pn, l_po, l_pn + l_po + l_sp + l_iou, n_pos, n_pot, n_neg)


def frame_loss(preds: CellPredictions, selections: list[SampleSelection], *, use_spatial: bool = True,
               use_positive_only: bool = True) -> LossBreakdown:
    """All four terms for one frame of a batch, pooling samples over batch elements.

    ``selections[b]`` supervises batch element ``b``. ``use_spatial`` /
    ``use_positive_only`` switch off the terms of heads that are absent.
    """
    pos_b, pos_c, gt_boxes, iou_g = [], [], [], []
    pot_b, pot_c, pot_w, pot_iou_s = [], [], [], []
    neg_b, neg_c = [], []
    target_iou = False
    for b, sel in enumerate(selections):
        asg = sel.assignment
        p = asg.positives
        pos_b.append(torch.full_like(p, b))
        pos_c.append(p)
        gt_boxes.append(sel.gt[asg.matched[p]] if len(p) else sel.gt.new_zeros(0, 4))
        iou_g.append(asg.iou_g[p])
        n = asg.negatives
        if len(sel.potentials):
            keep = ~torch.isin(n, sel.potentials.cells)
            n = n[keep]
        neg_b.append(torch.full_like(n, b))
        neg_c.append(n)
        pc = sel.potentials.cells
        pot_b.append(torch.full_like(pc, b))
        pot_c.append(pc)
        pot_w.append(sel.potentials.weights)
        pot_iou_s.append(sel.potentials.iou_s)
        target_iou = target_iou or sel.positive_target_iou

    pos_b, pos_c = torch.cat(pos_b), torch.cat(pos_c)
    pot_b, pot_c = torch.cat(pot_b), torch.cat(pot_c)
    neg_b, neg_c = torch.cat(neg_b), torch.cat(neg_c)
    gt_boxes = torch.cat(gt_boxes)
    iou_g = torch.cat(iou_g).to(preds.o_pn.dtype)
    pot_w = torch.cat(pot_w)

    o_pn = preds.o_pn
    o_pos, o_pot, o_neg = o_pn[pos_b, pos_c], o_pn[pot_b, pot_c], o_pn[neg_b, neg_c]
    if len(pot_c):
        w_tilde = renormalize_weights(bce(o_pot.detach(), 1.0), pot_w.to(o_pn.dtype))
    else:
        w_tilde = o_pot.new_zeros(0)
    l_pn = loss_pn(o_pos, o_pot, w_tilde, o_neg, iou_g if target_iou else 1.0)

    zero = o_pn.new_zeros(())
    if use_positive_only:
        l_po = loss_po(preds.o_po[pos_b, pos_c], iou_g, preds.o_po[pot_b, pot_c],
                       torch.cat(pot_iou_s).to(o_pn.dtype))
    else:
        l_po = zero
    if use_spatial:
        l_sp = loss_spatial(torch.cat([preds.iou_s[pos_b, pos_c], preds.iou_s[pot_b, pot_c]]))
    else:
        l_sp = zero
    l_iou = loss_iou(preds.box_fused[pos_b, pos_c], gt_boxes)
    return total_loss(l_pn, l_po, l_sp, l_iou, len(pos_c), len(pot_c), len(neg_c))
