"""A scripted-confidence stand-in for a trained model.

Each answer position has a target token and an optional prerequisite
position. A position is predicted with confidence ``high`` once its
prerequisite is visible (decoded) in the input, and with a low confidence
otherwise. This gives the decoders a deterministic, hand-traceable mix of
easy and blocked positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import AttentionMaskSpec, KVCache, ModelConfig


@dataclass
class ScriptedOracle:
    prompt_len: int
    targets: list[int]  # answer tokens, EOS included
    prereq: list[int | None]  # answer offset that must be decoded first
    high: float = 0.99
    low: float = 0.5
    config: ModelConfig = ModelConfig(vocab_size=8, dim=4, layers=1, heads=1, max_seq_len=128,
                                      mask_token_id=7, eos_token_id=6)
    calls: int = 0

    def __post_init__(self) -> None:
        if len(self.targets) != len(self.prereq):
            raise ValueError("targets and prereq differ in length")
        for i, p in enumerate(self.prereq):
            if p is not None and not 0 <= p < i:
                raise ValueError(f"prerequisite of position {i} must be an earlier position, got {p}")

    def confidence(self, answer: np.ndarray, pos: int) -> float:
        dep = self.prereq[pos]
        ready = dep is None or (dep < len(answer) and answer[dep] != self.config.mask_token_id)
        # slightly decreasing low confidence makes argmax ties resolve to the lowest index anyway
        return self.high if ready else self.low - 1e-3 * pos

    def forward(self, tokens, spec: AttentionMaskSpec, cache: KVCache | None = None):
        self.calls += 1
        tokens = np.asarray(tokens, dtype=np.int64)
        offset = 0 if cache is None else cache.committed_len
        full = tokens if cache is None else np.concatenate([cache.tokens, tokens])
        answer = full[self.prompt_len :]
        v = self.config.vocab_size
        logits = np.zeros((len(tokens), v))
        for row in range(len(tokens)):
            pos = offset + row - self.prompt_len
            if 0 <= pos < len(self.targets):
                c = self.confidence(answer, pos)
                probs = np.full(v, (1.0 - c) / (v - 2))
                probs[self.config.mask_token_id] = 0.0
                probs[self.targets[pos]] = c
                logits[row] = np.log(np.maximum(probs, 1e-300))
        cfg = self.config
        fresh = [(np.zeros((cfg.heads, len(tokens), cfg.head_dim)),) * 2 for _ in range(cfg.layers)]
        return logits, fresh
