"""Forward masking process, per-block noise schedules, and the teacher objective."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SequenceDataset, after_first_eos, pack
from .numerics import OptimizerState, adamw_step, log_softmax_rows, softmax_rows

log = logging.getLogger(__name__)

# Incremented whenever a loss is evaluated on an empty mask set.
EMPTY_MASK_EVENTS = {"teacher_loss": 0, "d2f_loss": 0}


@dataclass
class MaskedSequence:
    tokens: np.ndarray
    mask_positions: np.ndarray  # boolean, same shape as tokens
    origin: np.ndarray
    prompt_len: int = 0

    def __post_init__(self) -> None:
        if self.tokens.shape != self.mask_positions.shape or self.tokens.shape != self.origin.shape:
            raise ValueError("tokens, mask_positions and origin must share a shape")


@dataclass(frozen=True)
class NoiseSchedule:
    levels: tuple[float, ...]
    t_min: float
    t_max: float

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def is_monotone(self) -> bool:
        return all(a < b for a, b in zip(self.levels, self.levels[1:]))


@dataclass(frozen=True)
class BlockPartition:
    prompt_len: int
    block_size: int
    answer_len: int

    def __post_init__(self) -> None:
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.prompt_len < 0 or self.answer_len < 0:
            raise ValueError("lengths must be non-negative")

    @property
    def num_blocks(self) -> int:
        return math.ceil(self.answer_len / self.block_size)

    def block_slices(self) -> list[slice]:
        """Absolute position ranges of each answer block; the last may be short."""
        out = []
        for i in range(self.num_blocks):
            start = self.prompt_len + i * self.block_size
            stop = min(start + self.block_size, self.prompt_len + self.answer_len)
            out.append(slice(start, stop))
        return out


def corrupt(clean, t: float, rng: np.random.Generator, mask_token_id: int, prompt_len: int = 0) -> MaskedSequence:
    """Mask each answer position independently with probability ``t``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    clean = np.asarray(clean)
    draws = rng.random(clean.shape)
    masked = draws < t
    masked[..., :prompt_len] = False
    tokens = np.where(masked, mask_token_id, clean)
    return MaskedSequence(tokens, masked, clean.copy(), prompt_len)


def _check_bounds(n: int, t_min: float, t_max: float) -> None:
    if n < 1:
        raise ValueError("schedule needs at least one block")
    if not 0.0 <= t_min < t_max <= 1.0:
        raise ValueError(f"need 0 <= t_min < t_max <= 1, got [{t_min}, {t_max}]")


def sample_monotone_schedule(n: int, t_min: float, t_max: float, rng: np.random.Generator) -> NoiseSchedule:
    """Sorted iid uniforms on [t_min, t_max]; draws with ties are redrawn."""
    _check_bounds(n, t_min, t_max)
    while True:
        levels = np.sort(rng.uniform(t_min, t_max, size=n))
        if n == 1 or np.all(np.diff(levels) > 0):
            return NoiseSchedule(tuple(float(x) for x in levels), t_min, t_max)


def sample_random_schedule(n: int, t_min: float, t_max: float, rng: np.random.Generator) -> NoiseSchedule:
    """Independent uniform level per block, no ordering (ablation baseline)."""
    _check_bounds(n, t_min, t_max)
    levels = rng.uniform(t_min, t_max, size=n)
    return NoiseSchedule(tuple(float(x) for x in levels), t_min, t_max)


def corrupt_blocks(
    clean, partition: BlockPartition, schedule: NoiseSchedule, rng: np.random.Generator, mask_token_id: int
) -> MaskedSequence:
    if len(schedule) != partition.num_blocks:
        raise ValueError(f"schedule has {len(schedule)} levels for {partition.num_blocks} blocks")
    clean = np.asarray(clean)
    draws = rng.random(clean.shape)
    rate = np.zeros(clean.shape)
    for sl, level in zip(partition.block_slices(), schedule.levels):
        rate[sl] = level
    masked = draws < rate
    tokens = np.where(masked, mask_token_id, clean)
    return MaskedSequence(tokens, masked, clean.copy(), partition.prompt_len)


def teacher_loss(teacher_logits, masked: MaskedSequence, t: float, weighted: bool = True) -> float:
    """Masked cross-entropy against the clean tokens, scaled by 1/t when weighted."""
    value, _ = teacher_loss_and_grad(teacher_logits, masked, t, weighted)
    return value


def teacher_loss_and_grad(teacher_logits, masked: MaskedSequence, t: float, weighted: bool = True):
    """Loss for one sequence and its gradient with respect to the logits."""
    logits = np.asarray(teacher_logits)
    if weighted and t <= 0:
        raise ValueError("t must be > 0 when 1/t weighting is enabled")
    m = masked.mask_positions
    count = int(m.sum())
    grad = np.zeros_like(logits)
    if count == 0:
        EMPTY_MASK_EVENTS["teacher_loss"] += 1
        return 0.0, grad
    weight = (1.0 / t if weighted else 1.0) / count
    sel = logits[m]
    targets = masked.origin[m]
    logp = log_softmax_rows(sel)
    value = -np.take_along_axis(logp, targets[:, None], axis=1).sum() * weight
    g = softmax_rows(sel)
    g[np.arange(count), targets] -= 1.0
    grad[m] = g * weight
    return float(value), grad


def teacher_batch_loss_and_grad(logits: np.ndarray, batch: MaskedSequence, levels: np.ndarray, weighted: bool):
    """Mean of per-sequence teacher losses over a (B, T) batch."""
    b = logits.shape[0]
    total = 0.0
    grad = np.zeros_like(logits)
    for i in range(b):
        row = MaskedSequence(batch.tokens[i], batch.mask_positions[i], batch.origin[i])
        v, g = teacher_loss_and_grad(logits[i], row, float(levels[i]), weighted)
        total += v
        grad[i] = g
    return total / b, grad / b


@dataclass
class TeacherTrainConfig:
    seq_len: int = 128
    steps: int = 10_000
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    t_floor: float = 1e-3
    loss_weighting: bool = False
    train_on_eos_fill: bool = True
    seed: int = 0


@dataclass
class TeacherTrainResult:
    params: object
    loss_log: list[dict] = field(default_factory=list)


def sample_teacher_batch(dataset: SequenceDataset, config: TeacherTrainConfig, rng: np.random.Generator, mask_token_id: int):
    """One whole-sequence noise level per example, t ~ U(t_floor, 1)."""
    idx = rng.integers(0, len(dataset), size=config.batch_size)
    clean, prompt_lens = pack(dataset, idx, config.seq_len)
    levels = rng.uniform(config.t_floor, 1.0, size=len(idx))
    masked = rng.random(clean.shape) < levels[:, None]
    masked &= np.arange(config.seq_len)[None, :] >= prompt_lens[:, None]
    if not config.train_on_eos_fill:
        loss_mask = masked & ~after_first_eos(clean, prompt_lens, dataset.eos_token_id)
    else:
        loss_mask = masked
    tokens = np.where(masked, mask_token_id, clean)
    return MaskedSequence(tokens, loss_mask, clean), prompt_lens, levels


def train_teacher(params, dataset: SequenceDataset, config: TeacherTrainConfig, log_path: str | Path | None = None):
    """Masked-diffusion training of a bidirectional model; updates ``params`` in place."""
    from .model import backward, batch_masks, forward_batch

    if len(dataset) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    state = OptimizerState.for_params(params.arrays, learning_rate=config.learning_rate, weight_decay=config.weight_decay)
    records = []
    fh = open(log_path, "w") if log_path is not None else None
    try:
        for step in range(config.steps):
            t0 = time.perf_counter()
            batch, prompt_lens, levels = sample_teacher_batch(dataset, config, rng, params.config.mask_token_id)
            masks = batch_masks("bidirectional", prompt_lens, config.seq_len, 1)
            logits, tape = forward_batch(params, batch.tokens, masks, keep_tape=True)
            loss, dlogits = teacher_batch_loss_and_grad(logits, batch, levels, config.loss_weighting)
            if not np.isfinite(loss):
                raise FloatingPointError(f"teacher loss diverged at step {step}: {loss}")
            adamw_step(params.arrays, backward(params, tape, dlogits), state)
            rec = {"step": step, "loss": loss, "wall_ms": (time.perf_counter() - t0) * 1e3}
            records.append(rec)
            if fh is not None:
                fh.write(json.dumps(rec) + "\n")
            if step % 500 == 0:
                log.info("teacher step %d loss %.5f", step, loss)
    finally:
        if fh is not None:
            fh.close()
    return TeacherTrainResult(params, records)
