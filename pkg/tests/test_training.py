import json
import math

import numpy as np
import pytest
from conftest import build
from hypothesis import given, settings
from hypothesis import strategies as st

from lgn.checkpoint import read_checkpoint
from lgn.errors import ConfigError, IngestionError, NoProposalError, OptimizerError
from lgn.grad import Parameter, Tape, Tensor, grad_check, ops
from lgn.moments import MomentSpan, iou_field, valid_mask
from lgn.training import (
    Adam,
    LabelConfig,
    TrainConfig,
    adam_step,
    label_field,
    masked_bce,
    resume,
    soft_label,
    train,
)

LABEL_CONFIGS = [(0.0, 0.5), (0.1, 0.9), (0.3, 0.7)]


def three_branch(o, t_min, t_max):
    if o <= t_min:
        return 0.0
    if o >= t_max:
        return 1.0
    return (o - t_min) / (t_max - t_min)


# ---------------------------------------------------------------- labels


def test_label_config_invariants():
    for bad in [(0.5, 0.5), (0.6, 0.2), (-0.1, 0.5), (0.0, 1.5)]:
        with pytest.raises(ConfigError):
            LabelConfig(*bad)


def test_soft_label_examples():
    cfg = LabelConfig(0.0, 0.5)
    assert soft_label(0.25, cfg) == 0.5
    assert soft_label(0.7, cfg) == 1.0
    assert soft_label(0.0, cfg) == 0.0


@pytest.mark.parametrize("t_min,t_max", LABEL_CONFIGS)
def test_soft_label_matches_oracle_on_grid(t_min, t_max):
    cfg = LabelConfig(t_min, t_max)
    grid = [i / 100 for i in range(101)]
    for o in grid:
        assert soft_label(o, cfg) == three_branch(o, t_min, t_max)
    field = np.array(grid).reshape(1, 101)
    labels = label_field(field, np.ones_like(field, dtype=bool), cfg)
    assert labels[0].tolist() == [three_branch(o, t_min, t_max) for o in grid]


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.sampled_from(LABEL_CONFIGS))
def test_soft_label_monotone_and_clamped(a, b, tt):
    cfg = LabelConfig(*tt)
    lo, hi = sorted((a, b))
    assert soft_label(lo, cfg) <= soft_label(hi, cfg)
    for o in (lo, hi):
        y = soft_label(o, cfg)
        assert 0.0 <= y <= 1.0
        if o <= cfg.t_min or o >= cfg.t_max:
            assert y in (0.0, 1.0)


def test_label_field_hand_example():
    cfg = LabelConfig(0.0, 0.5)
    field = iou_field(4, MomentSpan(2.0, 6.0), 8.0)
    labels = label_field(field, valid_mask(4), cfg)
    # cell (1,2) covers [2,6] exactly; (0,0) covers [0,2], disjoint; (1,1) covers [2,4], IoU 0.5
    assert labels[1, 2] == 1.0
    assert labels[0, 0] == 0.0
    assert labels[1, 1] == 1.0
    # (0,1) covers [0,4]: IoU 2/6, middle branch
    assert labels[0, 1] == pytest.approx((1 / 3) / 0.5, abs=1e-15)
    assert np.all(labels[~valid_mask(4)] == 0)
    assert np.all(label_field(np.zeros((4, 4)), valid_mask(4), cfg) == 0)


# ---------------------------------------------------------------- loss


def test_bce_at_half_is_ln2():
    rng = np.random.default_rng(0)
    valid = valid_mask(6)
    loss = masked_bce(np.full((6, 6), 0.5), rng.random((6, 6)), valid).item()
    assert abs(loss - math.log(2)) <= 1e-12


def test_bce_single_cell_hand_value():
    valid = np.zeros((3, 3), dtype=bool)
    valid[1, 2] = True
    p = np.full((3, 3), 0.3)
    p[1, 2] = 0.8
    y = np.zeros((3, 3))
    y[1, 2] = 1.0
    assert abs(masked_bce(p, y, valid).item() - (-math.log(0.8))) <= 1e-15
    assert -math.log(0.8) == pytest.approx(0.2231, abs=1e-4)


def test_bce_perfect_prediction_beats_uniform():
    valid = valid_mask(5)
    y = (np.random.default_rng(1).random((5, 5)) > 0.5).astype(float) * valid
    clamp = 1.0 / (1.0 + math.exp(-30.0))
    p = np.where(y == 1, clamp, 1.0 - clamp)
    assert masked_bce(p, y, valid).item() < masked_bce(np.full((5, 5), 0.5), y, valid).item()


def test_bce_empty_mask():
    with pytest.raises(NoProposalError):
        masked_bce(np.full((2, 2), 0.5), np.zeros((2, 2)), np.zeros((2, 2), dtype=bool))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_bce_ignores_invalid_cells(seed):
    rng = np.random.default_rng(seed)
    valid = valid_mask(5)
    p, y = rng.uniform(0.01, 0.99, (2, 5, 5)), rng.random((2, 5, 5))
    base = masked_bce(p, y, valid).item()
    p2, y2 = p.copy(), y.copy()
    p2[:, ~valid] = rng.uniform(0.01, 0.99, (2, int((~valid).sum())))
    y2[:, ~valid] = rng.random((2, int((~valid).sum())))
    assert masked_bce(p2, y2, valid).item() == base


def test_bce_is_a_batch_mean():
    rng = np.random.default_rng(2)
    valid = valid_mask(4)
    p, y = rng.uniform(0.1, 0.9, (3, 4, 4)), rng.random((3, 4, 4))
    per = [masked_bce(p[i], y[i], valid).item() for i in range(3)]
    assert masked_bce(p, y, valid).item() == pytest.approx(np.mean(per), abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_bce_gradient(seed):
    rng = np.random.default_rng(seed)
    valid = valid_mask(5)
    p = Tensor(rng.uniform(0.05, 0.95, (2, 5, 5)))
    y = rng.random((2, 5, 5))
    assert grad_check(lambda p: masked_bce(p, y, valid), p, eps=1e-6) <= 1e-4


# ---------------------------------------------------------------- Adam


def _with_grad(name, data, grad):
    p = Parameter(name, np.asarray(data, dtype=float))
    p.grad = np.asarray(grad, dtype=float)
    return p


def test_adam_zero_gradient_leaves_params():
    p = _with_grad("w", [1.0, -2.0], [0.0, 0.0])
    opt = Adam()
    adam_step([p], opt)
    assert p.data.tolist() == [1.0, -2.0]
    assert opt.step_count == 1


def test_adam_first_step_hand_value():
    p = _with_grad("w", [0.0], [1.0])
    opt = Adam(lr=0.1)
    opt.step([p])
    # m_hat = v_hat = 1, so the step is lr * 1 / (1 + eps)
    assert p.data[0] == pytest.approx(-0.1, abs=1e-8)


def test_adam_descends_a_quadratic():
    p = Parameter("w", np.array([2.0, -3.0]))
    opt = Adam(lr=0.1)
    losses = []
    for _ in range(3):
        with Tape() as tape:
            loss = ops.sum(ops.hadamard(p, p))
        tape.backward(loss)
        losses.append(loss.item())
        opt.step([p])
        p.grad = None
    assert losses[2] < losses[1] < losses[0]


def test_adam_missing_grad_names_parameter():
    p = Parameter("loc.conv3.W", np.zeros(2))
    with pytest.raises(OptimizerError, match="loc.conv3.W"):
        Adam().step([p])


def test_adam_skips_frozen_parameters():
    frozen = Parameter("table", np.ones(3), requires_grad=False)
    live = _with_grad("w", [1.0], [0.5])
    Adam().step([frozen, live])
    assert frozen.data.tolist() == [1.0, 1.0, 1.0]


def test_adam_state_round_trip():
    p = _with_grad("w", [1.0, 2.0], [0.3, -0.1])
    opt = Adam(lr=0.01)
    opt.step([p])
    clone = Adam.from_state(opt.state_dict())
    q = Parameter("w", p.data.copy())
    for o, t in ((opt, p), (clone, q)):
        t.grad = np.array([0.2, 0.2])
        o.step([t])
    assert np.array_equal(p.data, q.data)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 2, "momentum": 0.9})
    cfg = TrainConfig.from_dict({"epochs": 2, "labels": {"t_min": 0.1, "t_max": 0.9}})
    assert cfg.labels == LabelConfig(0.1, 0.9)


# ---------------------------------------------------------------- loop


def test_train_smoke(tiny_dataset, tmp_path):
    model, samples = build(tiny_dataset)
    samples = samples[:4]
    ckpt, log = tmp_path / "m.ckpt", tmp_path / "log.jsonl"
    res = train(samples, model, TrainConfig(epochs=1, batch_size=2), out=ckpt, log_path=log)
    assert len(res.log) == 1
    rows = [json.loads(line) for line in log.read_text().splitlines()]
    assert len(rows) == 1 and set(rows[0]) == {"epoch", "mean_loss", "wall_ms"}
    assert rows[0]["epoch"] == 1 and rows[0]["mean_loss"] == res.log[0]["mean_loss"]
    header, _ = read_checkpoint(ckpt)
    assert header["train_state"]["epoch"] == 1


def test_train_reduces_loss(tiny_dataset):
    model, samples = build(tiny_dataset, drop_probability=0.0)
    res = train(samples, model, TrainConfig(epochs=30, batch_size=4, lr=3e-3))
    losses = [r["mean_loss"] for r in res.log]
    assert losses[-1] < losses[0]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_train_empty_and_mismatched(tiny_dataset):
    model, samples = build(tiny_dataset)
    with pytest.raises(IngestionError):
        train([], model, TrainConfig(epochs=1))
    other, _ = build(tiny_dataset, N=4)
    with pytest.raises(IngestionError, match=samples[0].query_id):
        train(samples, other, TrainConfig(epochs=1))


def test_checkpoint_cadence(tiny_dataset, tmp_path):
    model, samples = build(tiny_dataset)
    train(samples[:4], model, TrainConfig(epochs=3, batch_size=2, checkpoint_every=2), out=tmp_path / "m.ckpt")
    assert (tmp_path / "m.epoch2.ckpt").exists() and (tmp_path / "m.ckpt").exists()
    assert not (tmp_path / "m.epoch3.ckpt").exists()


def test_resume_reproduces_next_epoch_bit_exactly(tiny_dataset, tmp_path):
    cfg = TrainConfig(epochs=3, batch_size=3, checkpoint_every=1, seed=5)
    model, samples = build(tiny_dataset, seed=5)
    full = train(samples, model, cfg, out=tmp_path / "a.ckpt")

    _, samples2 = build(tiny_dataset, seed=5)
    resumed = resume(tmp_path / "a.epoch1.ckpt", samples2, cfg, out=tmp_path / "b.ckpt")
    assert [r["epoch"] for r in resumed.log] == [2, 3]
    assert [r["mean_loss"] for r in resumed.log] == [r["mean_loss"] for r in full.log[1:]]
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_two_runs_give_identical_checkpoints(tiny_dataset, tmp_path):
    for name in ("x", "y"):
        model, samples = build(tiny_dataset, seed=2)
        train(samples, model, TrainConfig(epochs=2, batch_size=4, seed=2), out=tmp_path / f"{name}.ckpt")
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()


def test_pad_embedding_row_stays_zero_through_training(tiny_dataset):
    model, samples = build(tiny_dataset)
    train(samples, model, TrainConfig(epochs=2, batch_size=4))
    assert np.all(model.text.embedding.data[0] == 0)
