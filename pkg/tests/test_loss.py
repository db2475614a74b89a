import math

import mpmath
import pytest
import torch

from deoe.heads import CellPredictions, PriorGrid, iou
from deoe.loss import (
    frame_loss,
    loss_iou,
    loss_pn,
    loss_po,
    loss_spatial,
    total_loss,
)
from deoe.nncore import grad_check
from deoe.sampling import PotentialSet, SampleSelection, ScreeningConfig, assign, variant_assign

D = torch.float64
GRID = PriorGrid(3, 3, 16)


def t(*v):
    return torch.tensor(v, dtype=D)


def test_spatial_examples():
    assert loss_spatial(t(1.0, 1.0)).item() == pytest.approx(0, abs=1e-15)
    assert loss_spatial(t(0.0)).item() == pytest.approx(float(-mpmath.log(mpmath.mpf("1e-16"))), abs=1e-3)
    assert loss_spatial(t(0.0)).item() == pytest.approx(36.8414, abs=1e-3)
    assert loss_spatial(torch.zeros(0, dtype=D)).item() == 0


def test_spatial_gradient():
    x = t(0.5).requires_grad_()
    loss_spatial(x).backward()
    assert x.grad.item() == pytest.approx(-2.0, rel=1e-12)
    assert grad_check(loss_spatial, t(0.5, 0.3, 0.9)) < 1e-6


def test_iou_examples():
    box = t(0.0, 0, 10, 10).reshape(1, 4)
    assert loss_iou(box, box).item() == 0
    assert loss_iou(box, t(50.0, 50, 10, 10).reshape(1, 4)).item() == 1
    assert loss_iou(box, t(5.0, 5, 10, 10).reshape(1, 4)).item() == pytest.approx(1 - 1 / 7, abs=1e-6)
    assert loss_iou(box, t(5.0, 5, 10, 10).reshape(1, 4)).item() == pytest.approx(0.857143, abs=1e-6)


def test_pn_examples():
    empty = torch.zeros(0, dtype=D)
    assert loss_pn(empty, empty, empty, t(0.5)).item() == pytest.approx(math.log(2), abs=1e-12)
    assert loss_pn(empty, t(0.5), t(0.25), empty).item() == pytest.approx(0.25 * math.log(2), abs=1e-12)
    assert loss_pn(empty, t(0.5), t(0.25), empty).item() == pytest.approx(0.173287, abs=1e-6)
    assert loss_pn(t(1 - 1e-9), empty, empty, t(1e-9)).item() < 1e-6


def test_pn_potential_weight_receives_no_gradient():
    w = t(0.3).requires_grad_()
    o = t(0.4).requires_grad_()
    loss_pn(torch.zeros(0, dtype=D), o, w, torch.zeros(0, dtype=D)).backward()
    assert w.grad is None
    assert o.grad.item() < 0


def test_po_examples():
    empty = torch.zeros(0, dtype=D)
    assert loss_po(t(1.0), t(1.0), empty, empty).item() == pytest.approx(0, abs=1e-6)
    bern = float(-(0.7 * mpmath.log(0.7) + 0.3 * mpmath.log(0.3)))
    assert loss_po(t(0.7), t(0.7), empty, empty).item() == pytest.approx(bern, abs=1e-12)
    assert loss_po(empty, empty, t(0.7), t(0.7)).item() == pytest.approx(0.610864, abs=1e-5)


def test_po_gradient_vanishes_at_target():
    target = t(0.7)
    o = t(0.7).requires_grad_()
    loss_po(o, target, torch.zeros(0, dtype=D), torch.zeros(0, dtype=D)).backward()
    assert abs(o.grad.item()) < 1e-8
    h = 1e-6
    f = lambda x: loss_po(t(x), target, torch.zeros(0, dtype=D), torch.zeros(0, dtype=D)).item()
    assert abs((f(0.7 + h) - f(0.7 - h)) / (2 * h)) < 1e-8


def test_total_is_plain_sum():
    z = t(0.0)
    assert total_loss(z, z, z, z).total.item() == 0
    assert total_loss(t(1.0), t(2.0), t(3.0), t(4.0)).total.item() == 10


def _preds(seed, b=1):
    g = torch.Generator().manual_seed(seed)
    n = GRID.num_cells
    prior = GRID.prior_boxes(D)
    box_a = prior + torch.rand(b, n, 4, generator=g, dtype=D) * 3
    box_b = prior + torch.rand(b, n, 4, generator=g, dtype=D) * 3
    o_pn = torch.rand(b, n, generator=g, dtype=D) * 0.9 + 0.05
    o_po = torch.rand(b, n, generator=g, dtype=D) * 0.9 + 0.05
    return [box_a, box_b, o_pn, o_po]


def _assemble(box_a, box_b, o_pn, o_po):
    fused = (box_a + box_b) / 2
    iou_s = iou(box_a, box_b)
    return CellPredictions(box_a, box_b, fused, o_pn, o_po, o_pn * o_po, iou_s, iou_s)


GT = t(4.0, 4.0, 18.0, 16.0, 30.0, 28.0, 14.0, 15.0).reshape(2, 4)


def _selection(preds, n=3):
    cfg = ScreeningConfig(potential_count=n)
    return variant_assign("deoe", GT, preds.obj_fused[0], preds.iou_s[0], preds.iou_t[0], GRID, cfg)


def test_full_frame_gradient_check():
    # a single potential makes the renormalized weight exactly 1, so the
    # stop-gradient on it does not separate autograd from finite differences
    tensors = _preds(1)
    sel = _selection(_assemble(*tensors), n=1)
    assert len(sel.assignment.positives) and len(sel.potentials) == 1
    shapes = [x.shape for x in tensors]
    flat = torch.cat([x.reshape(-1) for x in tensors])

    def fn(v):
        parts, i = [], 0
        for s in shapes:
            parts.append(v[i:i + s.numel()].reshape(s))
            i += s.numel()
        return frame_loss(_assemble(*parts), [sel]).total

    assert grad_check(fn, flat) < 1e-4


def test_frame_loss_against_hand_assembly():
    preds = _assemble(*_preds(2))
    sel = _selection(preds)
    lb = frame_loss(preds, [sel])
    asg = sel.assignment
    pos, pot = asg.positives, sel.potentials.cells
    neg = torch.tensor([c for c in asg.negatives.tolist() if c not in pot.tolist()])

    def bce(p, y):
        return -(y * torch.log(p) + (1 - y) * torch.log(1 - p))

    o = preds.o_pn[0]
    pot_losses = bce(o[pot], 1.0)
    w = sel.potentials.weights
    w_t = w * pot_losses.sum() / (w * pot_losses).sum()
    expect_pn = bce(o[pos], 1.0).mean() + (w_t * pot_losses).mean() + bce(o[neg], 0.0).mean()
    assert lb.l_pn.item() == pytest.approx(expect_pn.item(), rel=1e-12)
    op = preds.o_po[0]
    expect_po = bce(op[pos], asg.iou_g[pos]).mean() + bce(op[pot], preds.iou_s[0, pot]).mean()
    assert lb.l_po.item() == pytest.approx(expect_po.item(), rel=1e-12)
    expect_sp = -torch.log(torch.cat([preds.iou_s[0, pos], preds.iou_s[0, pot]]) + 1e-16).mean()
    assert lb.l_sp.item() == pytest.approx(expect_sp.item(), rel=1e-12)
    assert lb.total.item() == pytest.approx((lb.l_pn + lb.l_po + lb.l_sp + lb.l_iou).item(), rel=1e-15)
    assert (lb.n_pos, lb.n_pot, lb.n_neg) == (len(pos), len(pot), len(neg))


def test_negatives_do_not_touch_positive_only_branch():
    box_a, box_b, o_pn, o_po = _preds(3)
    preds = _assemble(box_a, box_b, o_pn, o_po)
    sel = _selection(preds)
    base = frame_loss(preds, [sel]).l_po
    neg = [c for c in sel.assignment.negatives.tolist() if c not in sel.potentials.cells.tolist()]
    o_po2 = o_po.clone()
    o_po2[0, neg] = 1e-3
    o_pn2 = o_pn.clone()
    o_pn2[0, neg] = 0.999
    assert torch.equal(frame_loss(_assemble(box_a, box_b, o_pn2, o_po2), [sel]).l_po, base)


def test_gradient_directions():
    box_a, box_b, o_pn, o_po = _preds(4)
    preds = _assemble(box_a, box_b, o_pn, o_po)
    sel = _selection(preds)
    neg = [c for c in sel.assignment.negatives.tolist() if c not in sel.potentials.cells.tolist()][0]
    o2 = o_pn.clone()
    o2[0, neg] += 0.01
    assert frame_loss(_assemble(box_a, box_b, o2, o_po), [sel]).l_pn > frame_loss(preds, [sel]).l_pn


def test_reduces_to_baseline_without_potentials():
    preds = _assemble(*_preds(5))
    asg = assign(GRID, GT)
    sel = SampleSelection(asg, GT, PotentialSet.empty())
    lb = frame_loss(preds, [sel], use_spatial=False, use_positive_only=False)
    pos, neg = asg.positives, asg.negatives
    o = preds.o_pn[0]
    baseline = (-torch.log(o[pos]).mean() - torch.log(1 - o[neg]).mean()
                + (1 - iou(preds.box_fused[0, pos], GT[asg.matched[pos]])).mean())
    assert (lb.l_pn + lb.l_iou).item() == pytest.approx(baseline.item(), rel=1e-12)
    assert lb.l_sp.item() == 0 and lb.l_po.item() == 0


def test_batch_pools_samples():
    preds = _assemble(*_preds(6, b=2))
    sels = [variant_assign("ca", GT, None, None, None, GRID, ScreeningConfig()),
            variant_assign("ca", GT[:1], None, None, None, GRID, ScreeningConfig())]
    lb = frame_loss(preds, sels)
    assert lb.n_pos == len(sels[0].assignment.positives) + len(sels[1].assignment.positives)
