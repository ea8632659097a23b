"""Train a small bidirectional teacher on the reverse task.

Run: python demos/02_train_teacher.py   (about half a minute on one core)
"""

# %%
import numpy as np

from d2f.decode import DecodeConfig, vanilla_decode
from d2f.diffusion import TeacherTrainConfig, train_teacher
from d2f.harness.tasks import TaskSpec, gen_dataset, special_ids
from d2f.model import ModelConfig, init_params

task = TaskSpec(kind="reverse", vocab_size=16, alphabet_size=10, min_len=4, max_len=6, train_size=4000, heldout_size=50)
train, held = gen_dataset(task)
eos, mask = special_ids(task.vocab_size)
print("example prompt", train.prompts[0], "answer", train.answers[0])

# %%
cfg = ModelConfig(vocab_size=16, dim=32, layers=2, heads=4, max_seq_len=16, mask_token_id=mask, eos_token_id=eos)
teacher = init_params(cfg, seed=0, role="teacher")
result = train_teacher(teacher, train, TeacherTrainConfig(seq_len=16, steps=3000, batch_size=32, learning_rate=3e-3))
losses = np.array([r["loss"] for r in result.loss_log])
for lo in range(0, len(losses), 500):
    print(f"steps {lo:4d}-{lo + 499:4d}  mean loss {losses[lo:lo + 500].mean():.3f}")

# %% [markdown]
# The teacher sees the whole sequence at once, so the natural decoder
# unmasks one position per step over the full answer window.

# %%
dc = DecodeConfig(max_len=8)
hits = 0
for p, a in zip(held.prompts, held.answers):
    out = vanilla_decode(teacher, p, dc)
    hits += np.array_equal(out.tokens, a[:-1])
print(f"held-out exact match {hits}/{len(held)}")
