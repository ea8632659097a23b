"""Forward corruption and per-block noise schedules.

Run: python demos/01_masking_and_schedules.py
"""

# %%
import numpy as np

from d2f.diffusion import BlockPartition, corrupt, corrupt_blocks, sample_monotone_schedule, sample_random_schedule

rng = np.random.default_rng(0)
MASK = 99

# %% [markdown]
# Each answer token is replaced by the mask symbol independently with
# probability t. The prompt is never touched.

# %%
clean = np.arange(24) % 10
for t in (0.0, 0.25, 0.75, 1.0):
    noisy = corrupt(clean, t, rng, MASK, prompt_len=4)
    row = " ".join("_" if m else str(x) for x, m in zip(noisy.tokens, noisy.mask_positions))
    print(f"t={t:<4}  {row}")

# %%
big = np.zeros(100_000, dtype=np.int64)
for t in (0.1, 0.5, 0.9):
    print(f"t={t}: masked fraction {corrupt(big, t, rng, MASK).mask_positions.mean():.4f}")

# %% [markdown]
# For distillation the answer is split into blocks and every block gets
# its own level. Monotone schedules make later blocks noisier than earlier
# ones, which is the situation the decoder meets at inference time.

# %%
part = BlockPartition(prompt_len=4, block_size=5, answer_len=20)
mono = sample_monotone_schedule(part.num_blocks, 0.3, 0.7, rng)
rand = sample_random_schedule(part.num_blocks, 0.3, 0.7, rng)
print("monotone levels", np.round(mono.levels, 3), "sorted:", mono.is_monotone)
print("random levels  ", np.round(rand.levels, 3), "sorted:", rand.is_monotone)

noisy = corrupt_blocks(clean, part, mono, rng, MASK)
for sl, t in zip(part.block_slices(), mono.levels):
    seg = noisy.tokens[sl]
    print(f"block t={t:.2f}  " + " ".join("_" if x == MASK else str(x) for x in seg))

# %% [markdown]
# With two blocks the first level is the smaller of two uniforms, so its
# mean sits one third of the way into the interval.

# %%
firsts = [sample_monotone_schedule(2, 0.3, 0.7, rng).levels[0] for _ in range(20_000)]
print(f"mean t1 {np.mean(firsts):.4f}  (expected {0.3 + 0.4 / 3:.4f})")
