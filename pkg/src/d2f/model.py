"""Tiny pre-norm transformer with bidirectional or block-causal attention.

The same weights serve as the bidirectional teacher and, after copying, as
the block-causal student. Forward and backward passes are written out by
hand in numpy; ``numerics.grad_check`` is what keeps them honest.
"""

from __future__ import annotations

import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .numerics import Params

CHECKPOINT_VERSION = 1

_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    dim: int = 128
    layers: int = 4
    heads: int = 4
    max_seq_len: int = 256
    mask_token_id: int = 63
    eos_token_id: int = 62
    mlp_ratio: int = 4
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.mask_token_id == self.eos_token_id:
            raise ValueError("mask_token_id and eos_token_id must differ")
        for name in ("mask_token_id", "eos_token_id"):
            if not 0 <= getattr(self, name) < self.vocab_size:
                raise ValueError(f"{name} must be < vocab_size")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)


@dataclass(frozen=True)
class AttentionMaskSpec:
    kind: Literal["bidirectional", "block_causal"] = "bidirectional"
    prompt_len: int = 0
    block_size: int = 1

    def __post_init__(self) -> None:
        if self.kind not in ("bidirectional", "block_causal"):
            raise ValueError(f"unknown attention kind {self.kind!r}")
        if self.kind == "block_causal" and (self.block_size < 1 or self.prompt_len < 0):
            raise ValueError("block_causal needs block_size >= 1 and prompt_len >= 0")


def build_attention_mask(spec: AttentionMaskSpec, seq_len: int, max_seq_len: int | None = None) -> np.ndarray:
    """Boolean (seq_len, seq_len) matrix; entry (i, j) says whether i may attend to j.

    Under ``block_causal`` the prompt attends only to itself, answer positions
    see the whole prompt, and answer blocks see every block up to their own.
    A ragged final block is simply a shorter block.
    """
    if max_seq_len is not None and seq_len > max_seq_len:
        raise ValueError(f"seq_len {seq_len} exceeds max_seq_len {max_seq_len}")
    if spec.kind == "bidirectional":
        return np.ones((seq_len, seq_len), dtype=bool)
    if seq_len < spec.prompt_len:
        raise ValueError("seq_len shorter than prompt")
    block = block_index(np.arange(seq_len), spec.prompt_len, spec.block_size)
    # prompt positions get block -1, so "j's block <= i's block" covers every case
    return block[None, :] <= block[:, None]


def block_index(positions: np.ndarray, prompt_len: int, block_size: int) -> np.ndarray:
    """Answer block of each absolute position; prompt positions map to -1."""
    positions = np.asarray(positions)
    return np.where(positions < prompt_len, -1, (positions - prompt_len) // block_size)


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: Params
    role: Literal["teacher", "student"] = "teacher"

    def copy(self, role: str | None = None) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()}, role or self.role)

    def forward(self, tokens, spec: AttentionMaskSpec, cache: "KVCache | None" = None):
        return forward(self, tokens, spec, cache)

    def max_abs_diff(self, other: "ModelParams") -> float:
        return max(float(np.max(np.abs(self.arrays[k] - other.arrays[k]))) for k in self.arrays)


def init_params(config: ModelConfig, seed: int = 0, role: str = "teacher") -> ModelParams:
    rng = np.random.default_rng(seed)
    d, h, v = config.dim, config.dim * config.mlp_ratio, config.vocab_size
    dt = config.np_dtype
    std = 0.02
    proj_std = std / math.sqrt(2 * config.layers)

    def normal(shape, s=std):
        return rng.normal(0.0, s, size=shape).astype(dt)

    arrays: Params = {
        "tok_emb": normal((v, d)),
        "pos_emb": normal((config.max_seq_len, d)),
    }
    for i in range(config.layers):
        p = f"layers.{i}."
        arrays[p + "norm1"] = np.ones(d, dtype=dt)
        arrays[p + "wq"] = normal((d, d))
        arrays[p + "wk"] = normal((d, d))
        arrays[p + "wv"] = normal((d, d))
        arrays[p + "wo"] = normal((d, d), proj_std)
        arrays[p + "norm2"] = np.ones(d, dtype=dt)
        arrays[p + "w1"] = normal((d, h))
        arrays[p + "b1"] = np.zeros(h, dtype=dt)
        arrays[p + "w2"] = normal((h, d), proj_std)
        arrays[p + "b2"] = np.zeros(d, dtype=dt)
    arrays["norm_f"] = np.ones(d, dtype=dt)
    arrays["head"] = normal((d, v))
    return ModelParams(config, arrays, role)


# ---------------------------------------------------------------------------
# KV cache
# ---------------------------------------------------------------------------


@dataclass
class KVCache:
    """Committed per-layer keys/values, each of shape (heads, committed_len, head_dim)."""

    keys: list[np.ndarray]
    values: list[np.ndarray]
    tokens: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @classmethod
    def empty(cls, config: ModelConfig) -> "KVCache":
        shape = (config.heads, 0, config.head_dim)
        dt = config.np_dtype
        return cls(
            [np.zeros(shape, dtype=dt) for _ in range(config.layers)],
            [np.zeros(shape, dtype=dt) for _ in range(config.layers)],
        )

    @property
    def committed_len(self) -> int:
        return int(self.tokens.shape[0])


def commit_blocks(cache: KVCache, new_key_values, count_tokens: int, tokens, mask_token_id: int) -> KVCache:
    """Append the first ``count_tokens`` fresh states to the cache.

    ``new_key_values`` is the per-layer ``(k, v)`` list returned by a cached
    forward and ``tokens`` are the token ids those states were computed from.
    """
    if count_tokens == 0:
        return cache
    tokens = np.asarray(tokens)[:count_tokens]
    if tokens.shape[0] < count_tokens:
        raise ValueError("not enough fresh states to commit")
    if np.any(tokens == mask_token_id):
        raise ValueError("cannot commit positions that are still masked")
    keys = [np.concatenate([ck, k[:, :count_tokens]], axis=1) for ck, (k, _) in zip(cache.keys, new_key_values)]
    values = [np.concatenate([cv, v[:, :count_tokens]], axis=1) for cv, (_, v) in zip(cache.values, new_key_values)]
    return KVCache(keys, values, np.concatenate([cache.tokens, tokens]))


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _rmsnorm(x, gain, eps=1e-6):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    xhat = x * r
    return xhat * gain, (xhat, r)


def _rmsnorm_back(dy, gain, saved):
    xhat, r = saved
    dgain = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * gain
    dx = r * (dxhat - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
    return dx, dgain


def _gelu(u):
    inner = _GELU_C * u * (1.0 + 0.044715 * u * u)
    th = np.tanh(inner)
    return 0.5 * u * (1.0 + th), th


def _gelu_back(du_out, u, th):
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return du_out * (0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * dinner)


def _split_heads(x, heads):
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _run(params: ModelParams, tokens: np.ndarray, mask: np.ndarray, past=None, pos_offset: int = 0, keep_tape: bool = False):
    """Core forward over a (B, T) batch.

    ``mask`` is boolean (B or 1, T, past_len + T). ``past`` is an optional
    per-layer list of (k, v) arrays shaped (heads, past_len, head_dim),
    shared across the batch.
    """
    cfg = params.config
    w = params.arrays
    b, t = tokens.shape
    if pos_offset + t > cfg.max_seq_len:
        raise ValueError(f"sequence length {pos_offset + t} exceeds max_seq_len {cfg.max_seq_len}")
    scale = 1.0 / math.sqrt(cfg.head_dim)
    mask = mask[:, None, :, :]  # broadcast over heads
    x = w["tok_emb"][tokens] + w["pos_emb"][pos_offset : pos_offset + t][None]
    tape = {"tokens": tokens, "mask": mask, "layers": []} if keep_tape else None
    fresh = []
    for i in range(cfg.layers):
        p = f"layers.{i}."
        h, n1 = _rmsnorm(x, w[p + "norm1"])
        q = _split_heads(h @ w[p + "wq"], cfg.heads)
        k = _split_heads(h @ w[p + "wk"], cfg.heads)
        v = _split_heads(h @ w[p + "wv"], cfg.heads)
        fresh.append((k[0], v[0]) if b == 1 else (k, v))
        if past is not None:
            pk, pv = past[i]
            k_all = np.concatenate([np.broadcast_to(pk, (b,) + pk.shape), k], axis=2)
            v_all = np.concatenate([np.broadcast_to(pv, (b,) + pv.shape), v], axis=2)
        else:
            k_all, v_all = k, v
        s = (q @ k_all.transpose(0, 1, 3, 2)) * scale
        s = np.where(mask, s, -np.inf)
        s -= s.max(axis=-1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(axis=-1, keepdims=True)
        o = _merge_heads(a @ v_all)
        x_mid = x + o @ w[p + "wo"]
        h2, n2 = _rmsnorm(x_mid, w[p + "norm2"])
        u = h2 @ w[p + "w1"] + w[p + "b1"]
        g, th = _gelu(u)
        x_out = x_mid + g @ w[p + "w2"] + w[p + "b2"]
        if keep_tape:
            tape["layers"].append(dict(h=h, n1=n1, q=q, k=k, v=v, a=a, o=o, h2=h2, n2=n2, u=u, g=g, th=th))
        x = x_out
    hf, nf = _rmsnorm(x, w["norm_f"])
    logits = hf @ w["head"]
    if keep_tape:
        tape["hf"] = hf
        tape["nf"] = nf
    return logits, fresh, tape


def _backward(params: ModelParams, tape, dlogits: np.ndarray) -> Params:
    """Gradients of sum(dlogits * logits) with respect to every parameter."""
    cfg = params.config
    w = params.arrays
    d = cfg.dim
    scale = 1.0 / math.sqrt(cfg.head_dim)
    grads: Params = {}
    grads["head"] = tape["hf"].reshape(-1, d).T @ dlogits.reshape(-1, cfg.vocab_size)
    dx, grads["norm_f"] = _rmsnorm_back(dlogits @ w["head"].T, w["norm_f"], tape["nf"])
    for i in reversed(range(cfg.layers)):
        p = f"layers.{i}."
        c = tape["layers"][i]
        # feed-forward branch
        grads[p + "w2"] = c["g"].reshape(-1, c["g"].shape[-1]).T @ dx.reshape(-1, d)
        grads[p + "b2"] = dx.reshape(-1, d).sum(axis=0)
        du = _gelu_back(dx @ w[p + "w2"].T, c["u"], c["th"])
        grads[p + "w1"] = c["h2"].reshape(-1, d).T @ du.reshape(-1, du.shape[-1])
        grads[p + "b1"] = du.reshape(-1, du.shape[-1]).sum(axis=0)
        dh2, grads[p + "norm2"] = _rmsnorm_back(du @ w[p + "w1"].T, w[p + "norm2"], c["n2"])
        dx = dx + dh2
        # attention branch
        grads[p + "wo"] = c["o"].reshape(-1, d).T @ dx.reshape(-1, d)
        do = _split_heads(dx @ w[p + "wo"].T, cfg.heads)
        a = c["a"]
        da = do @ c["v"].transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ do
        ds = a * (da - np.sum(da * a, axis=-1, keepdims=True)) * scale
        dq = ds @ c["k"]
        dk = ds.transpose(0, 1, 3, 2) @ c["q"]
        h2d = c["h"].reshape(-1, d)
        dq_m, dk_m, dv_m = (_merge_heads(z).reshape(-1, d) for z in (dq, dk, dv))
        grads[p + "wq"] = h2d.T @ dq_m
        grads[p + "wk"] = h2d.T @ dk_m
        grads[p + "wv"] = h2d.T @ dv_m
        dh = (dq_m @ w[p + "wq"].T + dk_m @ w[p + "wk"].T + dv_m @ w[p + "wv"].T).reshape(dx.shape)
        dh1, grads[p + "norm1"] = _rmsnorm_back(dh, w[p + "norm1"], c["n1"])
        dx = dx + dh1
    tok_grad = np.zeros_like(w["tok_emb"])
    np.add.at(tok_grad, tape["tokens"].reshape(-1), dx.reshape(-1, d))
    grads["tok_emb"] = tok_grad
    pos_grad = np.zeros_like(w["pos_emb"])
    pos_grad[: dx.shape[1]] = dx.sum(axis=0)
    grads["pos_emb"] = pos_grad
    return grads


def batch_masks(spec_kind: str, prompt_lens, seq_len: int, block_size: int) -> np.ndarray:
    """Stack per-example attention masks (prompt lengths may differ)."""
    return np.stack(
        [build_attention_mask(AttentionMaskSpec(spec_kind, int(pl), block_size), seq_len) for pl in prompt_lens]
    )


def forward_batch(params: ModelParams, tokens: np.ndarray, masks: np.ndarray, keep_tape: bool = False):
    """Training-time forward over a (B, T) batch with per-example boolean masks (B, T, T)."""
    tokens = np.asarray(tokens)
    if tokens.shape[1] > params.config.max_seq_len:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {params.config.max_seq_len}")
    logits, _, tape = _run(params, tokens, masks, keep_tape=keep_tape)
    return logits, tape


def backward(params: ModelParams, tape, dlogits: np.ndarray) -> Params:
    return _backward(params, tape, dlogits)


def forward(params: ModelParams, tokens, spec: AttentionMaskSpec, cache: KVCache | None = None):
    """Logits for every supplied position plus fresh (k, v) states per layer.

    Without a cache ``tokens`` is the whole sequence. With a cache, ``tokens``
    is the uncommitted suffix starting at ``cache.committed_len``; the cached
    prefix supplies keys and values, and the mask must be block-causal so the
    cached states are exact.
    """
    cfg = params.config
    tokens = np.asarray(tokens, dtype=np.int64)
    offset = 0 if cache is None else cache.committed_len
    total = offset + tokens.shape[0]
    if total > cfg.max_seq_len:
        raise ValueError(f"sequence length {total} exceeds max_seq_len {cfg.max_seq_len}")
    if cache is not None and spec.kind != "block_causal":
        raise ValueError("a KV cache is only exact under block_causal attention")
    mask = build_attention_mask(spec, total)[offset:]
    past = None if cache is None or offset == 0 else list(zip(cache.keys, cache.values))
    logits, fresh, _ = _run(params, tokens[None], mask[None], past=past, pos_offset=offset)
    return logits[0], fresh


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(params.config), "role": params.role}
    entries = {"__meta__": np.array(json.dumps(meta, sort_keys=True)), **params.arrays}
    # fixed entry timestamps keep identical weights byte-identical on disk
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(entries):
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asarray(entries[name]), allow_pickle=False)
    return path


def load_checkpoint(path: str | Path, expect_config: ModelConfig | None = None, expect_role: str | None = None) -> ModelParams:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        config = ModelConfig(**meta["config"])
        if expect_config is not None and config != expect_config:
            raise ValueError(f"checkpoint config {config} does not match expected {expect_config}")
        if expect_role is not None and meta["role"] != expect_role:
            raise ValueError(f"checkpoint role {meta['role']!r}, expected {expect_role!r}")
        arrays = {k: data[k].copy() for k in data.files if k != "__meta__"}
    ref = init_params(config)
    for name, arr in ref.arrays.items():
        if name not in arrays or arrays[name].shape != arr.shape:
            raise ValueError(f"checkpoint parameter {name!r} missing or misshapen")
    return ModelParams(config, arrays, meta["role"])
