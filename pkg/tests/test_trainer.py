import csv

import numpy as np
import pytest
import torch

from deoe import nncore
from deoe.heads import PriorGrid
from deoe.trainer import (
    NonFiniteLoss,
    SequenceBatch,
    TrainConfig,
    build,
    coerce,
    event_support,
    learning_rate,
    load_dataset,
    load_model,
    make_config,
    read_config,
    run_training,
    sample_batch,
    train_step,
    write_config,
)

SMALL = dict(height=64, width=64, T=2, channels=(4, 8), strides=(4, 2), head_width=8, batch_size=2,
             sequence_length=3, scenes=2, scene_duration=150_000, lr=2e-3)


def small(**kw) -> TrainConfig:
    return TrainConfig(**{**SMALL, **kw})


def rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def params(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def same_params(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def test_config_file_round_trip(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nvariant = ca_p   # inline\npotential_count = 15\nchannels = 8, 16\n"
                    "dual_regressor = auto\ndownsample = yes\n")
    values = read_config(path)
    assert values == {"variant": "ca_p", "potential_count": 15, "channels": (8, 16), "dual_regressor": None,
                      "downsample": True}
    cfg = make_config(path, seed="7", potential_count=3)
    assert (cfg.seed, cfg.potential_count, cfg.variant) == (7, 3, "ca_p")
    write_config(cfg, tmp_path / "out.cfg")
    assert make_config(tmp_path / "out.cfg") == cfg


def test_config_errors(tmp_path):
    with pytest.raises(KeyError):
        coerce("learning_rate", "1")
    with pytest.raises(ValueError):
        coerce("downsample", "maybe")
    with pytest.raises(ValueError):
        TrainConfig(sequence_length=0)
    with pytest.raises(ValueError):
        TrainConfig(variant="nope")
    bad = tmp_path / "bad.cfg"
    bad.write_text("variant deoe\n")
    with pytest.raises(ValueError, match="line 1"):
        read_config(bad)


def test_variant_heads():
    assert TrainConfig(variant="deoe").heads == (True, True)
    assert TrainConfig(variant="deoe", dual_regressor=False).heads == (False, True)
    for v in ("ca", "ca_o", "ca_p", "oracle"):
        assert TrainConfig(variant=v).heads == (False, False)


def test_learning_rate_schedule():
    cfg = TrainConfig(iterations=100, lr=1e-3, min_lr=1e-5, warmup_fraction=0.05)
    assert learning_rate(cfg, 0) == pytest.approx(2e-4)
    assert learning_rate(cfg, 4) == pytest.approx(1e-3)
    assert learning_rate(cfg, 5) == pytest.approx(1e-3)
    assert learning_rate(cfg, 100) == pytest.approx(1e-5)
    lrs = [learning_rate(cfg, i) for i in range(5, 101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_batches_are_keyed_on_iteration():
    cfg = small()
    data = load_dataset(cfg)
    a, b = sample_batch(data, cfg, 3), sample_batch(data, cfg, 3)
    assert torch.equal(a.frames, b.frames)
    assert a.frames.shape == (3, 2, 4, 64, 64)
    assert not torch.equal(a.frames, sample_batch(data, cfg, 4).frames)


def test_frozen_parameters_repeat_the_loss():
    cfg = small(lr=0.0, min_lr=0.0)
    data = load_dataset(cfg)
    model, opt = build(cfg)
    batch = sample_batch(data, cfg, 0)
    before = params(model)
    l1 = train_step(model, opt, batch, cfg, 0)
    l2 = train_step(model, opt, batch, cfg, 0)
    assert torch.equal(l1.total, l2.total)
    assert same_params(before, params(model))


def test_overfit_single_scene(tmp_path):
    cfg = small(scenes=1, iterations=200, lr=3e-3, variant="deoe", potential_count=3)
    run_training(cfg, tmp_path)
    log = rows(tmp_path / "loss.csv")
    assert len(log) == 200
    total = [float(r["total"]) for r in log]
    assert total[-1] < total[0]
    assert np.mean(total[-20:]) < 0.7 * np.mean(total[:20])


def test_zero_iterations_keeps_initialization(tmp_path):
    cfg = small(iterations=0)
    final, _ = run_training(cfg, tmp_path)
    model, _, header = load_model(final)
    init, _ = build(cfg)
    assert header["iteration"] == 0
    assert same_params(params(model), params(init))
    assert len(rows(tmp_path / "loss.csv")) == 0


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg = small(iterations=6, checkpoint_every=3)
    full, _ = run_training(cfg, tmp_path / "a")
    part = tmp_path / "b"
    run_training(small(iterations=6, checkpoint_every=3), part)
    resumed, _ = run_training(cfg, part, resume=part / "iter000003.ckpt")
    h1, p1, a1 = nncore.read_checkpoint(full)
    h2, p2, a2 = nncore.read_checkpoint(resumed)
    assert all(np.array_equal(p1[k], p2[k]) for k in p1)
    assert all(np.array_equal(a1[k][1], a2[k][1]) and np.array_equal(a1[k][2], a2[k][2]) for k in a1)
    assert (tmp_path / "a" / "loss.csv").read_text() == (part / "loss.csv").read_text()
    with pytest.raises(ValueError, match="different config"):
        run_training(small(iterations=6, lr=1.0), part, resume=part / "iter000003.ckpt")


def test_same_seed_is_bit_identical_and_seeds_differ(tmp_path):
    a, _ = run_training(small(iterations=3), tmp_path / "a")
    b, _ = run_training(small(iterations=3), tmp_path / "b")
    c, _ = run_training(small(iterations=3, seed=1), tmp_path / "c")
    assert a.read_bytes()[:8] == b"DEOECKPT"
    _, pa, _ = nncore.read_checkpoint(a)
    _, pb, _ = nncore.read_checkpoint(b)
    _, pc, _ = nncore.read_checkpoint(c)
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)
    assert not all(np.array_equal(pa[k], pc[k]) for k in pa)


def test_potentials_are_the_only_difference_at_the_first_step(tmp_path):
    without, _ = run_training(small(iterations=4, potential_count=0), tmp_path / "n0")
    with_, _ = run_training(small(iterations=4, potential_count=5), tmp_path / "n5")
    r0, r5 = rows(tmp_path / "n0" / "loss.csv"), rows(tmp_path / "n5" / "loss.csv")
    # same init and data: positives see identical predictions on step 1
    assert r0[0]["l_iou"] == r5[0]["l_iou"] and r0[0]["n_pos"] == r5[0]["n_pos"]
    assert int(r0[0]["n_pot"]) == 0 and int(r5[0]["n_pot"]) > 0
    assert r0[0]["l_pn"] != r5[0]["l_pn"]
    assert r0[1]["l_iou"] != r5[1]["l_iou"]


def _first_step_with_unannotated(cfg, data):
    for it in range(cfg.iterations):
        b = sample_batch(data, cfg, it)
        if any(len(f) > len(k) for kf, ff in zip(b.known_gt, b.full_gt) for k, f in zip(kf, ff)):
            return it
    return None


def test_oracle_departs_from_baseline_exactly_at_unannotated_objects(tmp_path):
    # rectangles only: every object is annotated and the oracle has nothing extra
    kw = dict(iterations=3, discs=0, triangles=0)
    run_training(small(variant="ca", **kw), tmp_path / "ca")
    run_training(small(variant="oracle", **kw), tmp_path / "or")
    assert (tmp_path / "ca" / "loss.csv").read_text() == (tmp_path / "or" / "loss.csv").read_text()

    cfg = small(variant="ca", iterations=8, rectangles=2, discs=1, triangles=0, scenes=3)
    first = _first_step_with_unannotated(cfg, load_dataset(cfg))
    assert first is not None
    run_training(cfg, tmp_path / "ca2")
    run_training(small(variant="oracle", iterations=8, rectangles=2, discs=1, triangles=0, scenes=3), tmp_path / "or2")
    a, b = rows(tmp_path / "ca2" / "loss.csv"), rows(tmp_path / "or2" / "loss.csv")
    assert a[:first] == b[:first]
    assert int(b[first]["n_pos"]) > int(a[first]["n_pos"])


def test_non_finite_loss_dumps_batch(tmp_path):
    cfg = small()
    model, opt = build(cfg)
    batch = sample_batch(load_dataset(cfg), cfg, 0)
    frames = batch.frames.clone()
    frames[0, 0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLoss, match="dumped"):
        train_step(model, opt, SequenceBatch(frames, batch.known_gt, batch.full_gt), cfg, 0, dump_dir=tmp_path)
    assert list(tmp_path.glob("nonfinite_iter0.npz"))


GRID8 = PriorGrid(2, 2, 8)


def test_event_support_counts_events_inside_each_prior():
    frames = torch.zeros(2, 4, 16, 16)
    frames[0, 1, 0, 0] = 3  # cell (0, 0) of an 8-pixel grid
    frames[0, 3, 9, 15] = 1  # cell (1, 1)
    frames[1, 0, 8, 8] = 5  # cell (1, 1)
    assert event_support(frames, GRID8, 0) is None
    assert event_support(frames, GRID8, 1).tolist() == [[True, False, False, True], [False, False, False, True]]
    assert event_support(frames, GRID8, 4).tolist() == [[False, False, False, False], [False, False, False, True]]
    # a 2x2 grid of 8-pixel priors over a 12x12 frame: the last row and column are partial
    assert event_support(frames[..., :12, :12], GRID8, 1).tolist() == [[True, False, False, False],
                                                                     [False, False, False, True]]


def test_screening_warmup_delays_potentials(tmp_path):
    run_training(small(iterations=3, screening_start=2), tmp_path)
    log = rows(tmp_path / "loss.csv")
    assert [int(r["n_pot"]) > 0 for r in log] == [False, False, True]
    with pytest.raises(ValueError):
        small(screening_start=-1)


def test_eval_forward_is_deterministic(tmp_path):
    final, _ = run_training(small(iterations=2), tmp_path)
    model, cfg, _ = load_model(final)
    assert not model.training
    x = sample_batch(load_dataset(cfg), cfg, 0).frames[0]
    a, _ = model(x, model.initial_state())
    b, _ = model(x, model.initial_state())
    assert torch.equal(a.obj_fused, b.obj_fused) and torch.equal(a.box_fused, b.box_fused)
