"""Finite-difference checks of every loss term on a two-cell detector at 64-bit precision.

With one potential per frame the renormalized weight is exactly 1, so treating it
as a constant (as the loss does) agrees with central differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .loss import LossBreakdown, frame_loss
from .model import Detector, DetectorConfig
from .nncore import grad_check
from .sampling import ScreeningConfig, variant_assign

TOLERANCE = 1e-4
TERMS = ("l_sp", "l_iou", "l_pn", "l_po", "total")

TINY = DetectorConfig(height=16, width=32, T=1, channels=(2, 2), strides=(4, 4), head_width=2, dropout=0.1)


@dataclass
class GradResult:
    name: str
    error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _tiny_model(seed: int) -> Detector:
    model = Detector(TINY, seed=seed).double()
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        # move away from the near-identity init so every term has a generic gradient
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.2)
    model.eval()
    return model


def _rollout(model: Detector, frames: torch.Tensor, gt: torch.Tensor, selections) -> LossBreakdown:
    state = model.initial_state()
    total = None
    for li in range(frames.shape[0]):
        preds, state = model(frames[li], state)
        lb = frame_loss(preds, [selections[li]])
        total = lb if total is None else total + lb
    return total


def _case(seed: int, potential_count: int):
    gen = torch.Generator().manual_seed(100 + seed)
    model = _tiny_model(seed)
    frames = torch.poisson(torch.full((2, 1, 2, 16, 32), 1.5, dtype=torch.float64), generator=gen)
    gt = torch.tensor([[1.0, 1.5, 14.0, 13.0]], dtype=torch.float64)  # covers cell 0, misses cell 1
    cfg = ScreeningConfig(potential_count=potential_count)
    selections = []
    with torch.no_grad():
        state = model.initial_state()
        for li in range(frames.shape[0]):
            preds, state = model(frames[li], state)
            selections.append(variant_assign("deoe", gt, preds.obj_fused[0], preds.iou_s[0], preds.iou_t[0],
                                              model.grid, cfg))
    return model, frames, gt, selections


def _terms(lb: LossBreakdown) -> torch.Tensor:
    return torch.stack([getattr(lb, t) for t in TERMS])


def _multi_grad_check(fn, params: list[torch.Tensor], step: float, floor: float = 1e-6) -> torch.Tensor:
    """Like model_grad_check, for a vector of scalar losses sharing one forward pass per probe."""
    out = fn()
    analytic = []
    for i in range(len(out)):
        grads = torch.autograd.grad(out[i], params, retain_graph=True, allow_unused=True)
        analytic.append(torch.cat([(torch.zeros_like(p) if g is None else g).reshape(-1)
                                   for g, p in zip(grads, params)]))
    analytic = torch.stack(analytic)
    numeric = torch.empty_like(analytic)
    col = 0
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + step
                fp = fn()
                flat[j] = orig - step
                fm = fn()
                flat[j] = orig
                numeric[:, col] = (fp - fm) / (2 * step)
                col += 1
    denom = torch.clamp(torch.maximum(analytic.abs(), numeric.abs()), min=floor)
    return ((analytic - numeric).abs() / denom).max(dim=1).values


def run_gradient_suite(seed: int = 0, step: float = 1e-4) -> list[GradResult]:
    """Max relative error per loss term, over every parameter of the tiny model.

    Two frame layouts: a positive plus a negative (N = 0), and a positive plus a
    potential (N = 1), which is the only one where the positive-only term has a
    potential sample.
    """
    results = []
    for count in (0, 1):
        model, frames, gt, sels = _case(seed, count)
        errors = _multi_grad_check(lambda: _terms(_rollout(model, frames, gt, sels)), list(model.parameters()), step)
        results += [GradResult(f"{term}[N={count}]", float(e)) for term, e in zip(TERMS, errors)]
    return results


def run_primitive_suite() -> list[GradResult]:
    """Central differences for the building blocks on random 64-bit points."""
    from .heads import iou
    from .nncore import bce, sigmoid

    gen = torch.Generator().manual_seed(7)
    d = torch.float64
    box_b = torch.tensor([3.0, 2.0, 9.0, 7.0], dtype=d)
    cases = {
        "sigmoid": (lambda x: sigmoid(x).pow(2).sum(), torch.randn(6, generator=gen, dtype=d)),
        "bce": (lambda x: bce(sigmoid(x), 0.3).sum(), torch.randn(6, generator=gen, dtype=d)),
        "iou": (lambda x: iou(x, box_b), torch.tensor([2.0, 1.0, 8.0, 9.0], dtype=d)),
        "log_iou": (lambda x: -torch.log(iou(x, box_b) + 1e-16), torch.tensor([4.0, 3.0, 6.0, 5.0], dtype=d)),
    }
    return [GradResult(name, grad_check(fn, x)) for name, (fn, x) in cases.items()]
