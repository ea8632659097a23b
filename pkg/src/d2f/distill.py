"""Asymmetric distillation: a bidirectional teacher supervises a block-causal student.

The teacher sees every noisy block at once; the student sees the prompt and
blocks up to its own. The loss is the KL between their predictions at the
masked positions, averaged over all masked positions in the batch.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from . import diffusion
from .data import SequenceDataset, after_first_eos, pack
from .diffusion import BlockPartition, MaskedSequence, NoiseSchedule
from .model import ModelParams, backward, batch_masks, forward_batch
from .numerics import OptimizerState, adamw_step, kl_rows, log_softmax_rows, softmax_rows

log = logging.getLogger(__name__)

KLDirection = Literal["teacher_student", "student_teacher"]


@dataclass
class TrainConfig:
    block_size: int = 16
    seq_len: int = 512
    t_min: float = 0.3
    t_max: float = 0.7
    learning_rate: float = 1e-5
    weight_decay: float = 0.0
    steps: int = 1000
    batch_size: int = 16
    schedule_mode: Literal["monotone", "random"] = "monotone"
    kl_direction: KLDirection = "teacher_student"
    train_on_eos_fill: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.t_min < self.t_max <= 1.0:
            raise ValueError("need 0 <= t_min < t_max <= 1")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.schedule_mode not in ("monotone", "random"):
            raise ValueError(f"unknown schedule_mode {self.schedule_mode!r}")
        if self.kl_direction not in ("teacher_student", "student_teacher"):
            raise ValueError(f"unknown kl_direction {self.kl_direction!r}")


@dataclass
class DistillBatch:
    tokens: np.ndarray  # (B, T) noisy inputs shared by teacher and student
    mask_positions: np.ndarray  # (B, T) bool, positions replaced by the mask symbol
    loss_positions: np.ndarray  # (B, T) bool, masked positions that carry loss
    clean: np.ndarray
    prompt_lens: np.ndarray
    partitions: list[BlockPartition]
    schedules: list[NoiseSchedule]
    block_size: int

    def example(self, i: int) -> MaskedSequence:
        return MaskedSequence(self.tokens[i], self.mask_positions[i], self.clean[i], int(self.prompt_lens[i]))


def build_distill_batch(
    dataset: SequenceDataset, config: TrainConfig, rng: np.random.Generator, mask_token_id: int, idx=None
) -> DistillBatch:
    """Sample examples, give each its own schedule, and corrupt block by block."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if idx is None:
        idx = rng.integers(0, len(dataset), size=config.batch_size)
    clean, prompt_lens = pack(dataset, idx, config.seq_len)
    sampler = (
        diffusion.sample_monotone_schedule if config.schedule_mode == "monotone" else diffusion.sample_random_schedule
    )
    tokens = np.empty_like(clean)
    masked = np.zeros(clean.shape, dtype=bool)
    partitions, schedules = [], []
    for i in range(clean.shape[0]):
        part = BlockPartition(int(prompt_lens[i]), config.block_size, config.seq_len - int(prompt_lens[i]))
        sched = sampler(part.num_blocks, config.t_min, config.t_max, rng)
        ms = diffusion.corrupt_blocks(clean[i], part, sched, rng, mask_token_id)
        tokens[i], masked[i] = ms.tokens, ms.mask_positions
        partitions.append(part)
        schedules.append(sched)
    loss_positions = masked.copy()
    if not config.train_on_eos_fill:
        loss_positions &= ~after_first_eos(clean, prompt_lens, dataset.eos_token_id)
    return DistillBatch(tokens, masked, loss_positions, clean, prompt_lens, partitions, schedules, config.block_size)


def d2f_loss(
    student_log_probs: np.ndarray,
    teacher_probs: np.ndarray,
    masked: MaskedSequence,
    partition: BlockPartition,
    direction: KLDirection = "teacher_student",
) -> float:
    """Block-wise KL summed over masked positions, divided by the masked count.

    Single-sequence form: ``student_log_probs`` and ``teacher_probs`` are
    (T, V). Positions outside every answer block never contribute.
    """
    total, count = 0.0, 0
    for sl in partition.block_slices():
        m = masked.mask_positions[sl]
        if not m.any():
            continue
        s = student_log_probs[sl][m]
        p = teacher_probs[sl][m]
        if direction == "teacher_student":
            total += float(kl_rows(p, s).sum())
        else:
            total += float(kl_rows(np.exp(s), np.log(np.maximum(p, 1e-300))).sum())
        count += int(m.sum())
    if count == 0:
        diffusion.EMPTY_MASK_EVENTS["d2f_loss"] += 1
        return 0.0
    return total / count


def d2f_batch_loss_and_grad(
    student_logits: np.ndarray,
    teacher_logits: np.ndarray,
    loss_positions: np.ndarray,
    direction: KLDirection = "teacher_student",
):
    """Batch loss and its gradient with respect to the student logits only."""
    grad = np.zeros_like(student_logits)
    count = int(loss_positions.sum())
    if count == 0:
        diffusion.EMPTY_MASK_EVENTS["d2f_loss"] += 1
        return 0.0, grad, np.zeros(student_logits.shape[0])
    s_logp = log_softmax_rows(student_logits[loss_positions])
    t_logp = log_softmax_rows(teacher_logits[loss_positions])
    if direction == "teacher_student":
        p = np.exp(t_logp)
        per_pos = kl_rows(p, s_logp)
        g = np.exp(s_logp) - p
    else:
        q = np.exp(s_logp)
        diff = s_logp - t_logp
        per_pos = (q * diff).sum(axis=-1)
        g = q * (diff - per_pos[:, None])
    grad[loss_positions] = g / count
    rows = np.nonzero(loss_positions)[0]
    per_example = np.bincount(rows, weights=per_pos, minlength=student_logits.shape[0])
    return float(per_pos.sum() / count), grad, per_example


def teacher_logits_for(teacher: ModelParams, batch: DistillBatch) -> np.ndarray:
    masks = batch_masks("bidirectional", batch.prompt_lens, batch.tokens.shape[1], batch.block_size)
    logits, _ = forward_batch(teacher, batch.tokens, masks)
    return logits


def student_loss_and_grads(student: ModelParams, teacher_logits: np.ndarray, batch: DistillBatch, direction: KLDirection):
    masks = batch_masks("block_causal", batch.prompt_lens, batch.tokens.shape[1], batch.block_size)
    logits, tape = forward_batch(student, batch.tokens, masks, keep_tape=True)
    loss, dlogits, per_example = d2f_batch_loss_and_grad(logits, teacher_logits, batch.loss_positions, direction)
    return loss, backward(student, tape, dlogits), per_example


def distill_step(
    teacher: ModelParams,
    student: ModelParams,
    batch: DistillBatch,
    optimizer_state: OptimizerState,
    direction: KLDirection = "teacher_student",
) -> tuple[ModelParams, float]:
    """One student update; the teacher is read-only and gets no gradient."""
    teacher_logits = teacher_logits_for(teacher, batch)
    loss, grads, per_example = student_loss_and_grads(student, teacher_logits, batch, direction)
    if not np.isfinite(loss):
        bad = np.nonzero(~np.isfinite(per_example))[0].tolist()
        raise FloatingPointError(f"non-finite distillation loss; offending examples {bad}")
    adamw_step(student.arrays, grads, optimizer_state)
    return student, loss


@dataclass
class DistillResult:
    student: ModelParams
    loss_log: list[dict] = field(default_factory=list)


def distill_run(
    teacher: ModelParams,
    config: TrainConfig,
    dataset: SequenceDataset,
    log_path: str | Path | None = None,
    log_every: int = 1,
) -> DistillResult:
    """Initialise the student as a copy of the teacher and distill for ``config.steps``."""
    if config.seq_len > teacher.config.max_seq_len:
        raise ValueError("seq_len exceeds the teacher's max_seq_len")
    student = teacher.copy(role="student")
    state = OptimizerState.for_params(
        student.arrays, learning_rate=config.learning_rate, weight_decay=config.weight_decay
    )
    rng = np.random.default_rng(config.seed)
    records = []
    fh = open(log_path, "w") if log_path is not None else None
    try:
        for step in range(config.steps):
            t0 = time.perf_counter()
            batch = build_distill_batch(dataset, config, rng, teacher.config.mask_token_id)
            student, loss = distill_step(teacher, student, batch, state, config.kl_direction)
            rec = {"step": step, "loss": loss, "wall_ms": (time.perf_counter() - t0) * 1e3}
            records.append(rec)
            if fh is not None and step % log_every == 0:
                fh.write(json.dumps(rec) + "\n")
            if step % 500 == 0:
                log.info("distill step %d loss %.5f", step, loss)
    finally:
        if fh is not None:
            fh.close()
    return DistillResult(student, records)
