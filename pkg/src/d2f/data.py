"""Prompt/answer containers and fixed-length batch packing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SequenceDataset:
    """Prompts and EOS-terminated answers as lists of int arrays."""

    prompts: list[np.ndarray]
    answers: list[np.ndarray]
    eos_token_id: int

    def __post_init__(self) -> None:
        if len(self.prompts) != len(self.answers):
            raise ValueError("prompts and answers differ in length")

    def __len__(self) -> int:
        return len(self.prompts)

    def subset(self, idx) -> "SequenceDataset":
        return SequenceDataset([self.prompts[i] for i in idx], [self.answers[i] for i in idx], self.eos_token_id)


def pack(dataset: SequenceDataset, idx, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Pack examples into a (B, seq_len) array: prompt, answer, then EOS fill.

    Answers longer than the space left after the prompt are truncated.
    Returns the tokens and the per-example prompt lengths.
    """
    idx = list(idx)
    out = np.full((len(idx), seq_len), dataset.eos_token_id, dtype=np.int64)
    prompt_lens = np.zeros(len(idx), dtype=np.int64)
    for row, i in enumerate(idx):
        p, a = dataset.prompts[i], dataset.answers[i]
        if len(p) >= seq_len:
            raise ValueError(f"prompt of length {len(p)} does not fit seq_len {seq_len}")
        out[row, : len(p)] = p
        room = seq_len - len(p)
        out[row, len(p) : len(p) + min(room, len(a))] = a[:room]
        prompt_lens[row] = len(p)
    return out, prompt_lens


def answer_region(prompt_lens: np.ndarray, seq_len: int) -> np.ndarray:
    """Boolean (B, seq_len) marking positions at or after each prompt."""
    return np.arange(seq_len)[None, :] >= np.asarray(prompt_lens)[:, None]


def after_first_eos(tokens: np.ndarray, prompt_lens: np.ndarray, eos_token_id: int) -> np.ndarray:
    """Boolean (B, T) marking EOS-fill positions strictly after the first answer EOS."""
    region = answer_region(prompt_lens, tokens.shape[1])
    is_eos = (tokens == eos_token_id) & region
    seen = np.cumsum(is_eos, axis=1)
    return region & ((seen > 1) | ((seen == 1) & ~is_eos))


def _ragged(rows: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(r) for r in rows], dtype=np.int64)
    flat = np.concatenate(rows).astype(np.int64) if rows else np.zeros(0, dtype=np.int64)
    return flat, np.concatenate([[0], np.cumsum(lengths)])


def save_splits(path, train: SequenceDataset, heldout: SequenceDataset) -> None:
    """Both splits in one ``.npz`` as flat token arrays plus offsets."""
    arrays = {"eos_token_id": np.array(train.eos_token_id)}
    for name, ds in (("train", train), ("heldout", heldout)):
        for part, rows in (("prompts", ds.prompts), ("answers", ds.answers)):
            flat, offsets = _ragged(rows)
            arrays[f"{name}_{part}"] = flat
            arrays[f"{name}_{part}_offsets"] = offsets
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_splits(path) -> tuple[SequenceDataset, SequenceDataset]:
    with np.load(path, allow_pickle=False) as data:
        eos = int(data["eos_token_id"])
        out = []
        for name in ("train", "heldout"):
            parts = []
            for part in ("prompts", "answers"):
                flat, off = data[f"{name}_{part}"], data[f"{name}_{part}_offsets"]
                parts.append([flat[off[i] : off[i + 1]].copy() for i in range(len(off) - 1)])
            out.append(SequenceDataset(parts[0], parts[1], eos))
    return out[0], out[1]
