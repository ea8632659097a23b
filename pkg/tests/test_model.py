import json
import zipfile

import numpy as np
import pytest

from conftest import random_tokens, tiny_config
from d2f.model import (
    AttentionMaskSpec,
    KVCache,
    ModelConfig,
    backward,
    batch_masks,
    build_attention_mask,
    commit_blocks,
    forward,
    forward_batch,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from d2f.numerics import grad_check


def test_block_causal_mask_by_hand():
    # prompt of 2, answer blocks of 2: rows attend to columns marked 1
    want = np.array(
        [
            [1, 1, 0, 0, 0, 0],
            [1, 1, 0, 0, 0, 0],
            [1, 1, 1, 1, 0, 0],
            [1, 1, 1, 1, 0, 0],
            [1, 1, 1, 1, 1, 1],
            [1, 1, 1, 1, 1, 1],
        ],
        dtype=bool,
    )
    got = build_attention_mask(AttentionMaskSpec("block_causal", 2, 2), 6)
    np.testing.assert_array_equal(got, want)


def test_ragged_last_block_and_bidirectional():
    m = build_attention_mask(AttentionMaskSpec("block_causal", 1, 3), 6)
    assert m[5, 4] and m[4, 5] and not m[3, 4]
    assert build_attention_mask(AttentionMaskSpec("bidirectional"), 4).all()


def test_mask_rejects_overlong_sequence():
    with pytest.raises(ValueError):
        build_attention_mask(AttentionMaskSpec("bidirectional"), 10, max_seq_len=8)
    with pytest.raises(ValueError):
        AttentionMaskSpec("sideways")


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(dim=30, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(mask_token_id=5, eos_token_id=5)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=8, mask_token_id=9, eos_token_id=1)


def test_init_is_seeded_and_student_copy_is_exact(tiny64):
    again = init_params(tiny64.config, seed=0)
    assert tiny64.max_abs_diff(again) == 0.0
    other = init_params(tiny64.config, seed=1)
    assert tiny64.max_abs_diff(other) > 0
    student = tiny64.copy(role="student")
    assert student.role == "student" and tiny64.max_abs_diff(student) == 0.0
    student.arrays["head"][0, 0] += 1.0
    assert tiny64.arrays["head"][0, 0] != student.arrays["head"][0, 0]


def test_later_block_perturbation_leaves_earlier_logits(tiny64):
    rng = np.random.default_rng(0)
    spec = AttentionMaskSpec("block_causal", 4, 4)
    x = random_tokens(rng, 16)
    base, _ = forward(tiny64, x, spec)
    y = x.copy()
    y[12:] = random_tokens(rng, 4)  # block 2 of the answer
    pert, _ = forward(tiny64, y, spec)
    assert np.max(np.abs(base[:12] - pert[:12])) == 0.0
    assert np.max(np.abs(base[12:] - pert[12:])) > 0


def test_cached_suffix_matches_full_recompute(tiny32):
    rng = np.random.default_rng(1)
    spec = AttentionMaskSpec("block_causal", 3, 4)
    x = random_tokens(rng, 19)
    full, _ = forward(tiny32, x, spec)
    cache = KVCache.empty(tiny32.config)
    _, fresh = forward(tiny32, x[:7], spec, cache)
    cache = commit_blocks(cache, fresh, 7, x[:7], tiny32.config.mask_token_id)
    assert cache.committed_len == 7
    suffix, _ = forward(tiny32, x[7:], spec, cache)
    assert np.max(np.abs(suffix - full[7:])) <= 1e-5


def test_cache_requires_block_causal(tiny32):
    with pytest.raises(ValueError):
        forward(tiny32, [1, 2], AttentionMaskSpec("bidirectional"), KVCache.empty(tiny32.config))


def test_commit_rejects_masked_positions(tiny32):
    cfg = tiny32.config
    toks = np.array([1, cfg.mask_token_id])
    _, fresh = forward(tiny32, toks, AttentionMaskSpec("block_causal", 0, 2), KVCache.empty(cfg))
    with pytest.raises(ValueError):
        commit_blocks(KVCache.empty(cfg), fresh, 2, toks, cfg.mask_token_id)


def test_batch_forward_matches_single(tiny64):
    rng = np.random.default_rng(2)
    toks = rng.integers(0, 14, size=(3, 10))
    pls = np.array([2, 3, 4])
    masks = batch_masks("block_causal", pls, 10, 3)
    logits, _ = forward_batch(tiny64, toks, masks)
    for i in range(3):
        one, _ = forward(tiny64, toks[i], AttentionMaskSpec("block_causal", int(pls[i]), 3))
        np.testing.assert_allclose(logits[i], one, atol=1e-12)


def test_backward_passes_gradient_check(tiny64):
    rng = np.random.default_rng(3)
    toks = rng.integers(0, 16, size=(2, 9))
    masks = batch_masks("block_causal", [2, 3], 9, 3)
    weights = rng.normal(size=(2, 9, 16))

    def loss(arrays):
        logits, tape = forward_batch(tiny64, toks, masks, keep_tape=True)
        return float((weights * logits).sum()), backward(tiny64, tape, weights)

    assert grad_check(loss, tiny64.arrays, samples_per_param=4) < 1e-4


def test_overlong_input_rejected(tiny64):
    with pytest.raises(ValueError):
        forward(tiny64, np.zeros(33, dtype=int), AttentionMaskSpec("bidirectional"))


def test_checkpoint_roundtrip(tmp_path, tiny32):
    path = save_checkpoint(tiny32.copy("student"), tmp_path / "s.npz")
    back = load_checkpoint(path, expect_config=tiny32.config, expect_role="student")
    assert back.max_abs_diff(tiny32) == 0.0 and back.role == "student"


def test_checkpoint_bytes_are_reproducible(tmp_path, tiny32):
    a = save_checkpoint(tiny32, tmp_path / "a.npz").read_bytes()
    b = save_checkpoint(tiny32, tmp_path / "b.npz").read_bytes()
    assert a == b


def test_checkpoint_rejects_mismatch(tmp_path, tiny32):
    path = save_checkpoint(tiny32, tmp_path / "t.npz")
    with pytest.raises(ValueError, match="config"):
        load_checkpoint(path, expect_config=tiny_config("float32", dim=64))
    with pytest.raises(ValueError, match="role"):
        load_checkpoint(path, expect_role="student")


def test_checkpoint_rejects_unknown_version(tmp_path, tiny32):
    path = save_checkpoint(tiny32, tmp_path / "t.npz")
    with zipfile.ZipFile(path) as zf:
        entries = {n: zf.read(n) for n in zf.namelist()}
    meta_path = tmp_path / "meta.npy"
    meta_path.write_bytes(entries["__meta__.npy"])
    meta = json.loads(str(np.load(meta_path)))
    meta["version"] = 99
    np.save(meta_path, np.array(json.dumps(meta)))
    entries["__meta__.npy"] = meta_path.read_bytes()
    with zipfile.ZipFile(path, "w") as zf:
        for n, data in entries.items():
            zf.writestr(n, data)
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)
