"""Inference engines: vanilla iterative unmasking, cache-only block decoding,
and the pipelined parallel decoder with dual-state blocks.

Anything exposing ``config`` (a ``ModelConfig``) and
``forward(tokens, spec, cache=None) -> (logits, fresh_kv)`` can be decoded,
which is how the scripted-confidence oracle in the tests plugs in.

KV commits are lazy but exact: a block's states are cached from the first
forward pass in which the block was already complete, so every cached key
and value was computed from final tokens and final context.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .model import AttentionMaskSpec, KVCache, commit_blocks
from .numerics import softmax_rows

BlockState = Literal["semi_activated", "fully_activated", "complete"]


@dataclass
class DecodeConfig:
    block_size: int = 8
    max_len: int = 64
    tau_add: float = 0.1
    tau_act: float = 0.95
    tau_conf: float = 0.9
    sampling: Literal["greedy", "temperature"] = "greedy"
    temperature: float = 1.0
    seed: int = 0
    use_cache: bool = True
    vanilla_steps: int | None = None  # None means one token per step
    record_trace: bool = False

    def __post_init__(self) -> None:
        for name in ("tau_add", "tau_act", "tau_conf"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.tau_add > self.tau_act:
            raise ValueError("tau_add must not exceed tau_act")
        if self.block_size < 1 or self.max_len < 1:
            raise ValueError("block_size and max_len must be >= 1")
        if self.sampling not in ("greedy", "temperature"):
            raise ValueError(f"unknown sampling mode {self.sampling!r}")
        if self.sampling == "temperature" and self.temperature <= 0:
            raise ValueError("temperature must be > 0")


@dataclass
class Metrics:
    tokens_per_second: float = 0.0
    forward_passes: int = 0
    tokens_per_forward: float = 0.0
    mean_latency_ms: float = 0.0
    mean_gen_length: float = 0.0
    exact_match: float = 0.0
    steps: int = 0
    decoded_tokens: int = 0
    wall_seconds: float = 0.0
    examples: int = 1

    @classmethod
    def aggregate(cls, per_example: list["Metrics"], exact: list[bool] | None = None) -> "Metrics":
        if not per_example:
            return cls(examples=0)
        fp = sum(m.forward_passes for m in per_example)
        tok = sum(m.decoded_tokens for m in per_example)
        wall = sum(m.wall_seconds for m in per_example)
        n = len(per_example)
        return cls(
            tokens_per_second=tok / wall if wall > 0 else 0.0,
            forward_passes=fp,
            tokens_per_forward=tok / fp if fp else 0.0,
            mean_latency_ms=1e3 * wall / n,
            mean_gen_length=tok / n,
            exact_match=float(np.mean(exact)) if exact is not None else 0.0,
            steps=sum(m.steps for m in per_example),
            decoded_tokens=tok,
            wall_seconds=wall,
            examples=n,
        )


def _exceeds(ratio: float, tau: float) -> bool:
    # a complete block always passes, otherwise tau = 1 would deadlock the pipeline
    return ratio > tau or ratio >= 1.0


@dataclass
class BlockRuntime:
    index: int
    start: int  # offset within the answer region
    tokens: np.ndarray
    decoded: np.ndarray  # bool per position
    state: BlockState = "semi_activated"

    @property
    def length(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def completion_ratio(self) -> float:
        return float(self.decoded.sum()) / self.length

    @property
    def complete(self) -> bool:
        return bool(self.decoded.all())


@dataclass
class PipelineState:
    prompt: np.ndarray
    blocks: list[BlockRuntime]
    cache: KVCache | None
    eos_seen: bool = False
    step_count: int = 0
    forward_count: int = 0
    committed_blocks: int = 0
    prompt_committed: bool = False
    trace: list[dict] = field(default_factory=list)
    max_len: int = 0

    @property
    def answer_len(self) -> int:
        return sum(b.length for b in self.blocks)

    def answer_tokens(self) -> np.ndarray:
        if not self.blocks:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([b.tokens for b in self.blocks])

    @property
    def finished(self) -> bool:
        return all(b.complete for b in self.blocks) and (self.eos_seen or self.answer_len >= self.max_len)


def select_positions(confidences, undecoded, state: BlockState, tau_conf: float) -> np.ndarray:
    """Indices to decode this step within one block.

    Semi-activated blocks take every undecoded position whose confidence
    exceeds ``tau_conf``. Fully-activated blocks do the same but fall back to
    the single most confident undecoded position (lowest index on ties).
    """
    conf = np.asarray(confidences, dtype=float)
    undecoded = np.asarray(undecoded, dtype=bool)
    if not undecoded.any():
        return np.zeros(0, dtype=np.int64)
    chosen = np.nonzero(undecoded & (conf > tau_conf))[0]
    if chosen.size == 0 and state == "fully_activated":
        masked_conf = np.where(undecoded, conf, -np.inf)
        chosen = np.array([int(np.argmax(masked_conf))])
    return chosen


def _propose(
    logits: np.ndarray, config: DecodeConfig, rng: np.random.Generator, mask_token_id: int
) -> tuple[np.ndarray, np.ndarray]:
    """Candidate token and its confidence for every row of ``logits``.

    The mask symbol is never a candidate; probabilities are renormalised
    over the remaining vocabulary.
    """
    logits = logits.astype(np.float64)
    logits[:, mask_token_id] = -1e30
    probs = softmax_rows(logits)
    if config.sampling == "greedy":
        tok = probs.argmax(axis=-1)
    else:
        tempered = softmax_rows(logits / config.temperature)
        cdf = np.cumsum(tempered, axis=-1)
        u = rng.random((logits.shape[0], 1))
        tok = np.minimum((cdf < u * cdf[:, -1:]).sum(axis=-1), logits.shape[-1] - 1)
    return tok, probs[np.arange(len(tok)), tok]


def new_pipeline(model, prompt, config: DecodeConfig) -> PipelineState:
    prompt = np.asarray(prompt, dtype=np.int64)
    cache = KVCache.empty(model.config) if config.use_cache else None
    state = PipelineState(prompt=prompt, blocks=[], cache=cache, max_len=config.max_len)
    state.blocks.append(_fresh_block(model, 0, 0, min(config.block_size, config.max_len)))
    state.blocks[0].state = "fully_activated"  # no predecessor to wait for
    return state


def _fresh_block(model, index: int, start: int, length: int) -> BlockRuntime:
    return BlockRuntime(
        index=index,
        start=start,
        tokens=np.full(length, model.config.mask_token_id, dtype=np.int64),
        decoded=np.zeros(length, dtype=bool),
    )


def pipeline_step(state: PipelineState, model, config: DecodeConfig, rng: np.random.Generator | None = None) -> PipelineState:
    """One iteration of the pipelined decoder.

    Order: maybe append a block, one forward pass over the uncommitted
    suffix, per-block selection and decoding, promotion of blocks whose
    predecessor passed ``tau_act``, then KV commit of blocks that were
    already complete when this step's forward pass ran.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    cfg = model.config
    plen = len(state.prompt)

    # (1) append
    appended = False
    last = state.blocks[-1]
    if not state.eos_seen and state.answer_len < config.max_len and _exceeds(last.completion_ratio, config.tau_add):
        length = min(config.block_size, config.max_len - state.answer_len)
        blk = _fresh_block(model, len(state.blocks), state.answer_len, length)
        if _exceeds(last.completion_ratio, config.tau_act):
            blk.state = "fully_activated"
        state.blocks.append(blk)
        appended = True

    # blocks already complete before decoding: their states from this pass are final
    complete_before = [b.complete for b in state.blocks]

    # (2) forward
    spec = AttentionMaskSpec("block_causal", plen, config.block_size)
    first = state.committed_blocks
    if state.cache is not None:
        lead = [] if state.prompt_committed else [state.prompt]
        suffix = np.concatenate(lead + [b.tokens for b in state.blocks[first:]])
        logits, fresh = model.forward(suffix, spec, state.cache)
        # row of answer offset x is x + shift
        shift = sum(len(x) for x in lead) - state.blocks[first].start
    else:
        full = np.concatenate([state.prompt] + [b.tokens for b in state.blocks])
        logits, fresh = model.forward(full, spec, None)
        shift = plen
    state.forward_count += 1

    # (3) select and decode
    newly: dict[int, list[int]] = {}
    for b in state.blocks[first:]:
        if b.complete:
            continue
        lo = b.start + shift
        tok, conf = _propose(logits[lo : lo + b.length], config, rng, cfg.mask_token_id)
        pick = select_positions(conf, ~b.decoded, b.state, config.tau_conf)
        if pick.size:
            b.tokens[pick] = tok[pick]
            b.decoded[pick] = True
            if np.any(tok[pick] == cfg.eos_token_id):
                state.eos_seen = True
        newly[b.index] = pick.tolist()

    progressed = sum(len(v) for v in newly.values())
    if progressed == 0 and any(not b.complete for b in state.blocks):
        raise RuntimeError(f"pipeline made no progress at step {state.step_count}")

    # (4) promotion and completion
    for i, b in enumerate(state.blocks):
        if b.complete:
            b.state = "complete"
        elif b.state == "semi_activated" and i > 0 and _exceeds(state.blocks[i - 1].completion_ratio, config.tau_act):
            b.state = "fully_activated"

    # (5) commit the prompt and the longest prefix of blocks complete before this pass
    commit_upto = first
    while commit_upto < len(state.blocks) and complete_before[commit_upto]:
        commit_upto += 1
    if state.cache is not None:
        count = 0 if state.prompt_committed else plen
        count += sum(b.length for b in state.blocks[first:commit_upto])
        if count:
            state.cache = commit_blocks(state.cache, fresh, count, suffix, cfg.mask_token_id)
    state.prompt_committed = True
    state.committed_blocks = commit_upto

    if config.record_trace:
        for b in state.blocks:
            state.trace.append(
                {
                    "step": state.step_count,
                    "block_index": b.index,
                    "state": b.state,
                    "decoded_positions": newly.get(b.index, []),
                    "appended": appended and b.index == len(state.blocks) - 1,
                    "committed_blocks": state.committed_blocks,
                }
            )
    state.step_count += 1
    return state


def truncate_at_eos(tokens: np.ndarray, eos_token_id: int) -> np.ndarray:
    hits = np.nonzero(tokens == eos_token_id)[0]
    return tokens[: hits[0]] if hits.size else tokens


@dataclass
class DecodeResult:
    tokens: np.ndarray
    metrics: Metrics
    raw: np.ndarray
    trace: list[dict] = field(default_factory=list)

    def trace_lines(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.trace)


def _check_model_for(model, prompt, config: DecodeConfig) -> None:
    if len(prompt) + config.max_len > model.config.max_seq_len:
        raise ValueError("prompt plus max_len exceeds the model's max_seq_len")


def d2f_decode(model, prompt, config: DecodeConfig) -> DecodeResult:
    """Pipelined parallel decoding until every block is complete and EOS or max_len is reached."""
    _check_model_for(model, prompt, config)
    rng = np.random.default_rng(config.seed)
    t0 = time.perf_counter()
    state = new_pipeline(model, prompt, config)
    while not state.finished:
        pipeline_step(state, model, config, rng)
    wall = time.perf_counter() - t0
    raw = state.answer_tokens()
    out = truncate_at_eos(raw, model.config.eos_token_id)
    m = Metrics(
        forward_passes=state.forward_count,
        steps=state.step_count,
        decoded_tokens=len(out),
        wall_seconds=wall,
    )
    m = _fill_rates(m)
    return DecodeResult(out, m, raw, state.trace)


def block_sequential_decode(model, prompt, config: DecodeConfig) -> DecodeResult:
    """Cache-only baseline: one block at a time, each fully activated from birth."""
    serial = DecodeConfig(**{**config.__dict__, "tau_add": 1.0, "tau_act": 1.0})
    return d2f_decode(model, prompt, serial)


def vanilla_decode(model, prompt, config: DecodeConfig) -> DecodeResult:
    """Bidirectional iterative unmasking over a fixed ``max_len`` answer, no cache.

    Each step commits the ``max_len / steps`` most confident masked positions.
    """
    _check_model_for(model, prompt, config)
    steps = config.vanilla_steps or config.max_len
    if config.max_len % steps:
        raise ValueError(f"steps {steps} must divide max_len {config.max_len}")
    per_step = config.max_len // steps
    cfg = model.config
    rng = np.random.default_rng(config.seed)
    prompt = np.asarray(prompt, dtype=np.int64)
    plen = len(prompt)
    seq = np.concatenate([prompt, np.full(config.max_len, cfg.mask_token_id, dtype=np.int64)])
    spec = AttentionMaskSpec("bidirectional")
    t0 = time.perf_counter()
    trace = []
    for step in range(steps):
        logits, _ = model.forward(seq, spec, None)
        answer_logits = logits[plen:]
        tok, conf = _propose(answer_logits, config, rng, cfg.mask_token_id)
        masked = seq[plen:] == cfg.mask_token_id
        conf = np.where(masked, conf, -np.inf)
        # stable sort keeps the lowest index first among equal confidences
        order = np.argsort(-conf, kind="stable")[:per_step]
        seq[plen + order] = tok[order]
        if config.record_trace:
            trace.append({"step": step, "decoded_positions": sorted(int(i) for i in order)})
    wall = time.perf_counter() - t0
    raw = seq[plen:].copy()
    out = truncate_at_eos(raw, cfg.eos_token_id)
    m = _fill_rates(Metrics(forward_passes=steps, steps=steps, decoded_tokens=len(out), wall_seconds=wall))
    return DecodeResult(out, m, raw, trace)


def _fill_rates(m: Metrics) -> Metrics:
    m.tokens_per_forward = m.decoded_tokens / m.forward_passes if m.forward_passes else 0.0
    m.tokens_per_second = m.decoded_tokens / m.wall_seconds if m.wall_seconds > 0 else 0.0
    m.mean_latency_ms = 1e3 * m.wall_seconds
    m.mean_gen_length = float(m.decoded_tokens)
    return m
