import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from deoe.heads import PriorGrid
from deoe.sampling import (
    IGNORE,
    NEGATIVE,
    POSITIVE,
    Assignment,
    ScreeningConfig,
    VariantMode,
    assign,
    potential_weight,
    renormalize_weights,
    score_potential,
    screen_potentials,
    variant_assign,
)

GRID = PriorGrid(4, 4, 16)
CFG = ScreeningConfig(potential_count=5)


def scalar_iou(a, b):
    ox = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    oy = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    inter = ox * oy
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def brute_assign(grid, gt, pos=0.5, neg=0.4):
    """Cell-by-cell thresholds, then one forced best cell per unmatched GT."""
    priors = grid.prior_boxes(torch.float64).tolist()
    n = len(priors)
    status, matched, iou_g = [NEGATIVE] * n, [-1] * n, [0.0] * n
    table = [[scalar_iou(p, g) for g in gt] for p in priors]
    for c in range(n):
        if not gt:
            continue
        best = max(table[c])
        g = table[c].index(best)
        if best >= pos:
            status[c], matched[c], iou_g[c] = POSITIVE, g, best
        elif best >= neg:
            status[c] = IGNORE
    forced = set()
    for g in range(len(gt)):
        if g in matched:
            continue
        col = [table[c][g] for c in range(n)]
        c = col.index(max(col))
        if c in forced:
            continue
        forced.add(c)
        status[c], matched[c], iou_g[c] = POSITIVE, g, col[c]
    return status, matched, iou_g


def test_assign_empty_gt():
    asg = assign(GRID, torch.zeros(0, 4))
    assert torch.all(asg.status == NEGATIVE)


def test_gt_equal_to_prior():
    asg = assign(GRID, torch.tensor([[16.0, 32.0, 16.0, 16.0]]))
    cell = 2 * 4 + 1
    assert asg.status[cell] == POSITIVE
    assert asg.iou_g[cell] == 1
    assert asg.matched[cell] == 0
    assert len(asg.positives) == 1


def test_small_gt_is_forced_positive():
    asg = assign(GRID, torch.tensor([[20.0, 20.0, 3.0, 3.0]]))
    assert asg.positives.tolist() == [5]
    assert 0 < asg.iou_g[5] < 0.4


gt_box = st.tuples(st.floats(0, 56), st.floats(0, 56), st.floats(2, 40), st.floats(2, 40))


@settings(max_examples=80, deadline=None)
@given(st.lists(gt_box, max_size=5))
def test_assign_matches_brute_force(boxes):
    asg = assign(GRID, torch.tensor(boxes, dtype=torch.float64).reshape(-1, 4))
    status, matched, iou_g = brute_assign(GRID, [list(b) for b in boxes])
    assert asg.status.tolist() == status
    assert asg.matched.tolist() == matched
    assert asg.iou_g.tolist() == pytest.approx(iou_g, abs=1e-12)
    assert len(set(matched) - {-1}) <= len(boxes)
    if len(boxes) == 1:
        assert len(asg.positives) >= 1


def test_score_examples():
    assert score_potential(1, 1, 1) == 1
    assert score_potential(0, 0.7, 0.3) == 0
    assert score_potential(0.4, 0, 1) == 0
    assert abs(score_potential(0.8, 0.5, 0.72) - 0.48) <= 1e-9


unit = st.floats(0, 1)


@settings(max_examples=200)
@given(unit, unit, unit, st.floats(0, 0.5))
def test_score_bounds_and_monotone(o, s, t, d):
    v = score_potential(o, s, t)
    assert 0 <= v <= 1
    assert score_potential(min(1, o + d), s, t) >= v
    assert score_potential(o, min(1, s + d), t) >= v
    assert score_potential(o, s, min(1, t + d)) >= v


def test_weight_examples():
    assert potential_weight(1, 1) == 1
    assert potential_weight(0, 0.6) == 0
    assert potential_weight(0.25, 0.25) == 0.25


@settings(max_examples=200)
@given(unit, unit)
def test_weight_below_one(o, s):
    w = potential_weight(o, s)
    assert 0 <= w <= 1
    if o * s < 1:
        assert w < 1


def test_renormalize_examples():
    w = torch.tensor([1.0, 1.0, 1.0])
    assert torch.equal(renormalize_weights(torch.tensor([0.3, 1.0, 2.0]), w), w)
    assert renormalize_weights(torch.tensor([1.0, 1.0]), torch.tensor([0.5, 0.5])).tolist() == [1.0, 1.0]
    zero = torch.zeros(3)
    assert torch.equal(renormalize_weights(torch.ones(3), zero), zero)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.floats(0.01, 1), st.floats(0.01, 20)), min_size=1, max_size=40))
def test_renormalize_identity(pairs):
    w = torch.tensor([p[0] for p in pairs], dtype=torch.float64)
    loss = torch.tensor([p[1] for p in pairs], dtype=torch.float64)
    wt = renormalize_weights(loss, w)
    assert math.isclose(float((wt * loss).sum()), float(loss.sum()), rel_tol=1e-9)
    assert torch.allclose(wt / wt[0], w / w[0])


def _preds(seed, n=GRID.num_cells):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, generator=g), torch.rand(n, generator=g), torch.rand(n, generator=g)


def test_zero_count_gives_empty_set():
    obj, s, t = _preds(0)
    pots = screen_potentials(obj, s, t, assign(GRID, torch.zeros(0, 4)), ScreeningConfig(potential_count=0))
    assert len(pots) == 0


def test_equal_scores_take_lowest_indices():
    asg = assign(GRID, torch.tensor([[16.0, 16.0, 16.0, 16.0]]))
    half = torch.full((GRID.num_cells,), 0.5)
    pots = screen_potentials(half, half, half, asg, CFG)
    assert pots.cells.tolist() == [c for c in range(GRID.num_cells) if asg.status[c] == NEGATIVE][:5]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.lists(gt_box, max_size=3), st.integers(0, 16))
def test_screening_matches_full_sort(seed, boxes, n):
    obj, s, t = _preds(seed)
    asg = assign(GRID, torch.tensor(boxes, dtype=torch.float64).reshape(-1, 4))
    pots = screen_potentials(obj, s, t, asg, ScreeningConfig(potential_count=n))
    neg = [c for c in range(GRID.num_cells) if asg.status[c] == NEGATIVE]
    scored = [(float(obj[c]) * math.sqrt(float(s[c]) * float(t[c])), c) for c in neg]
    expected = [c for _, c in sorted(scored, key=lambda sc: (-sc[0], sc[1]))[:n]]
    assert pots.cells.tolist() == expected
    assert len(pots) <= n
    assert torch.all(pots.scores[:-1] >= pots.scores[1:])
    assert torch.all((pots.weights >= 0) & (pots.weights <= 1))
    assert not set(pots.cells.tolist()) & set(asg.positives.tolist())


def test_raising_a_cell_never_lowers_its_rank():
    obj, s, t = _preds(3)
    asg = assign(GRID, torch.zeros(0, 4))
    full = ScreeningConfig(potential_count=GRID.num_cells)
    before = screen_potentials(obj, s, t, asg, full).cells.tolist().index(7)
    obj2 = obj.clone()
    obj2[7] = min(1.0, float(obj[7]) + 0.3)
    after = screen_potentials(obj2, s, t, asg, full).cells.tolist().index(7)
    assert after <= before


def test_variant_parse():
    assert VariantMode.parse("CA_P") is VariantMode.CA_P
    with pytest.raises(ValueError):
        VariantMode.parse("yolo")


def test_ca_variants_have_no_potentials():
    obj, s, t = _preds(1)
    gt = torch.tensor([[0.0, 0.0, 16.0, 16.0]])
    for mode in ("ca", "ca_o"):
        sel = variant_assign(mode, gt, obj, s, t, GRID, CFG)
        assert len(sel.potentials) == 0
    assert variant_assign("ca_o", gt, obj, s, t, GRID, CFG).positive_target_iou
    assert not variant_assign("ca", gt, obj, s, t, GRID, CFG).positive_target_iou


def test_oracle_uses_unannotated_boxes():
    obj, s, t = _preds(1)
    known = torch.tensor([[0.0, 0.0, 16.0, 16.0]])
    unknown = torch.tensor([[33.0, 33.0, 16.0, 16.0]])  # IoU with the cell-10 prior is 0.9^2/(2-0.9^2) > 0.5
    full = torch.cat([known, unknown])
    with pytest.raises(ValueError):
        variant_assign("oracle", known, obj, s, t, GRID, CFG)
    sel = variant_assign("oracle", known, obj, s, t, GRID, CFG, full_gt=full)
    assert sel.assignment.status[10] == POSITIVE
    assert sel.assignment.matched[10] == 1
    assert variant_assign("ca", known, obj, s, t, GRID, CFG).assignment.status[10] == NEGATIVE


def test_ca_p_ranks_by_objectness_and_differs_from_deoe():
    obj = torch.linspace(0.9, 0.1, GRID.num_cells)
    s = torch.linspace(0.05, 1.0, GRID.num_cells)
    t = torch.ones(GRID.num_cells)
    empty = torch.zeros(0, 4)
    ca_p = variant_assign("ca_p", empty, obj, s, t, GRID, CFG)
    deoe = variant_assign("deoe", empty, obj, s, t, GRID, CFG)
    assert ca_p.potentials.cells.tolist() == [0, 1, 2, 3, 4]
    assert torch.all(ca_p.potentials.weights == 1)
    oracle = sorted(range(GRID.num_cells), key=lambda c: (-float(obj[c] * torch.sqrt(s[c] * t[c])), c))[:5]
    assert deoe.potentials.cells.tolist() == oracle
    assert deoe.potentials.cells.tolist() != ca_p.potentials.cells.tolist()


def test_screening_can_be_disabled():
    obj, s, t = _preds(2)
    sel = variant_assign("deoe", torch.zeros(0, 4), obj, s, t, GRID, CFG, screening=False)
    assert len(sel.potentials) == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 2**16 - 1))
def test_eligibility_mask_restricts_the_candidates(seed, bits):
    obj, s, t = _preds(seed)
    eligible = torch.tensor([bool(bits >> c & 1) for c in range(GRID.num_cells)])
    asg = assign(GRID, torch.zeros(0, 4))
    pots = screen_potentials(obj, s, t, asg, CFG, eligible)
    scored = [(float(obj[c]) * math.sqrt(float(s[c]) * float(t[c])), c) for c in range(GRID.num_cells) if eligible[c]]
    assert pots.cells.tolist() == [c for _, c in sorted(scored, key=lambda sc: (-sc[0], sc[1]))[:5]]
    every = screen_potentials(obj, s, t, asg, CFG, torch.ones(GRID.num_cells, dtype=torch.bool))
    assert torch.equal(every.cells, screen_potentials(obj, s, t, asg, CFG).cells)


def test_config_validation():
    with pytest.raises(ValueError):
        ScreeningConfig(potential_count=-1)
    with pytest.raises(ValueError):
        ScreeningConfig(pos_iou=0.4, neg_iou=0.5)
    assert isinstance(assign(GRID, torch.zeros(0, 4)), Assignment)
