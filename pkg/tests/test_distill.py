import math

import numpy as np
import pytest

from conftest import tiny_config
from d2f import diffusion
from d2f.data import SequenceDataset
from d2f.diffusion import BlockPartition, MaskedSequence
from d2f.distill import (
    TrainConfig,
    build_distill_batch,
    d2f_batch_loss_and_grad,
    d2f_loss,
    distill_run,
    distill_step,
    student_loss_and_grads,
    teacher_logits_for,
)
from d2f.model import init_params
from d2f.numerics import OptimizerState, grad_check, log_softmax_rows, softmax_rows

MASK, EOS = 15, 14


def _dataset(n=40, seed=0):
    rng = np.random.default_rng(seed)
    prompts = [rng.integers(0, 10, size=int(rng.integers(2, 5))) for _ in range(n)]
    answers = [np.concatenate([p[::-1], [EOS]]) for p in prompts]
    return SequenceDataset(prompts, answers, EOS)


def test_d2f_loss_hand_value():
    # prompt of 1, two blocks of 2; masked answer positions 1 and 4
    t = np.array([[0.5, 0.5], [0.5, 0.5], [0.8, 0.2], [0.5, 0.5], [0.1, 0.9]])
    s = np.log(np.array([[0.5, 0.5], [0.9, 0.1], [0.5, 0.5], [0.5, 0.5], [0.3, 0.7]]))
    mask = np.array([True, True, False, False, True])  # position 0 is prompt and must be ignored
    ms = MaskedSequence(np.zeros(5, dtype=int), mask, np.zeros(5, dtype=int), prompt_len=1)
    part = BlockPartition(prompt_len=1, block_size=2, answer_len=4)
    kl1 = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
    kl4 = 0.1 * math.log(0.1 / 0.3) + 0.9 * math.log(0.9 / 0.7)
    assert d2f_loss(s, t, ms, part) == pytest.approx((kl1 + kl4) / 2, abs=1e-12)
    rev1 = 0.9 * math.log(0.9 / 0.5) + 0.1 * math.log(0.1 / 0.5)
    rev4 = 0.3 * math.log(0.3 / 0.1) + 0.7 * math.log(0.7 / 0.9)
    assert d2f_loss(s, t, ms, part, "student_teacher") == pytest.approx((rev1 + rev4) / 2, abs=1e-12)


def test_d2f_loss_empty_mask_counts_event():
    before = diffusion.EMPTY_MASK_EVENTS["d2f_loss"]
    ms = MaskedSequence(np.zeros(3, dtype=int), np.zeros(3, dtype=bool), np.zeros(3, dtype=int), 1)
    assert d2f_loss(np.zeros((3, 2)), np.full((3, 2), 0.5), ms, BlockPartition(1, 2, 2)) == 0.0
    assert diffusion.EMPTY_MASK_EVENTS["d2f_loss"] == before + 1


@pytest.mark.parametrize("direction", ["teacher_student", "student_teacher"])
def test_batch_loss_matches_single_and_gradient(direction):
    rng = np.random.default_rng(1)
    s_logits = rng.normal(size=(2, 6, 5))
    t_logits = rng.normal(size=(2, 6, 5))
    pos = np.zeros((2, 6), dtype=bool)
    pos[0, [2, 3]] = True
    pos[1, [1, 4, 5]] = True
    loss, grad, per = d2f_batch_loss_and_grad(s_logits, t_logits, pos, direction)
    total = 0.0
    for i in range(2):
        ms = MaskedSequence(np.zeros(6, dtype=int), pos[i], np.zeros(6, dtype=int), 1)
        part = BlockPartition(1, 2, 5)
        total += d2f_loss(log_softmax_rows(s_logits[i]), softmax_rows(t_logits[i]), ms, part, direction) * pos[i].sum()
    assert loss == pytest.approx(total / pos.sum(), abs=1e-12)
    assert per.sum() / pos.sum() == pytest.approx(loss, abs=1e-12)

    def fn(p):
        v, g, _ = d2f_batch_loss_and_grad(p["z"], t_logits, pos, direction)
        return v, {"z": g}

    assert grad_check(fn, {"z": s_logits.copy()}, samples_per_param=40) < 1e-6


def test_build_batch_masks_answers_only():
    cfg = TrainConfig(block_size=2, seq_len=12, batch_size=8, seed=0)
    batch = build_distill_batch(_dataset(), cfg, np.random.default_rng(0), MASK)
    for i, pl in enumerate(batch.prompt_lens):
        assert not batch.mask_positions[i, :pl].any()
        assert batch.schedules[i].is_monotone
        assert len(batch.schedules[i]) == batch.partitions[i].num_blocks
    assert np.all(batch.tokens[batch.mask_positions] == MASK)
    assert np.all(batch.loss_positions <= batch.mask_positions)


def test_build_batch_can_skip_eos_fill():
    cfg = TrainConfig(block_size=2, seq_len=12, batch_size=16, seed=0, train_on_eos_fill=False, t_min=0.9, t_max=1.0)
    batch = build_distill_batch(_dataset(), cfg, np.random.default_rng(0), MASK)
    assert batch.loss_positions.sum() < batch.mask_positions.sum()


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(t_min=0.7, t_max=0.3)
    with pytest.raises(ValueError):
        TrainConfig(schedule_mode="shuffled")
    with pytest.raises(ValueError):
        TrainConfig(kl_direction="both")


def test_student_gradient_through_model():
    cfg64 = tiny_config("float64", max_seq_len=12)
    teacher = init_params(cfg64, seed=0)
    student = init_params(cfg64, seed=1, role="student")
    batch = build_distill_batch(_dataset(), TrainConfig(block_size=3, seq_len=12, batch_size=2), np.random.default_rng(2), MASK)
    t_logits = teacher_logits_for(teacher, batch)

    def fn(arrays):
        loss, grads, _ = student_loss_and_grads(student, t_logits, batch, "teacher_student")
        return loss, grads

    assert grad_check(fn, student.arrays, samples_per_param=3) < 1e-4


def test_step_updates_student_only():
    teacher = init_params(tiny_config("float32", max_seq_len=12), seed=0)
    frozen = teacher.copy()
    student = teacher.copy("student")
    cfg = TrainConfig(block_size=2, seq_len=12, batch_size=4, learning_rate=1e-3)
    batch = build_distill_batch(_dataset(), cfg, np.random.default_rng(0), MASK)
    state = OptimizerState.for_params(student.arrays, learning_rate=1e-3)
    student, loss = distill_step(teacher, student, batch, state)
    assert loss > 0 and teacher.max_abs_diff(frozen) == 0.0 and student.max_abs_diff(frozen) > 0


def test_step_reports_offending_examples(monkeypatch):
    import d2f.distill as distill_mod

    teacher = init_params(tiny_config("float32", max_seq_len=12), seed=0)
    student = teacher.copy("student")
    batch = build_distill_batch(_dataset(), TrainConfig(block_size=2, seq_len=12, batch_size=3), np.random.default_rng(0), MASK)
    monkeypatch.setattr(
        distill_mod, "student_loss_and_grads", lambda *a: (float("nan"), {}, np.array([0.1, np.nan, 0.2]))
    )
    with pytest.raises(FloatingPointError, match=r"\[1\]"):
        distill_step(teacher, student, batch, OptimizerState.for_params(student.arrays))


def test_zero_steps_gives_teacher_copy():
    teacher = init_params(tiny_config("float32", max_seq_len=12), seed=0)
    res = distill_run(teacher, TrainConfig(block_size=2, seq_len=12, steps=0), _dataset())
    assert res.student.role == "student" and res.student.max_abs_diff(teacher) == 0.0


def test_distill_run_reproducible_and_logged(tmp_path):
    teacher = init_params(tiny_config("float32", max_seq_len=12), seed=0)
    cfg = TrainConfig(block_size=2, seq_len=12, steps=4, batch_size=4, learning_rate=1e-3, seed=3)
    a = distill_run(teacher, cfg, _dataset(), log_path=tmp_path / "a.ndjson")
    b = distill_run(teacher, cfg, _dataset())
    assert a.student.max_abs_diff(b.student) == 0.0
    assert [r["loss"] for r in a.loss_log] == [r["loss"] for r in b.loss_log]
    assert len((tmp_path / "a.ndjson").read_text().splitlines()) == 4


def test_seq_len_must_fit_teacher():
    teacher = init_params(tiny_config("float32", max_seq_len=12), seed=0)
    with pytest.raises(ValueError):
        distill_run(teacher, TrainConfig(block_size=2, seq_len=40, steps=1), _dataset())
