"""Distill a block-causal student from a bidirectional teacher.

The teacher sees every noisy block; the student sees only the prompt and
blocks up to its own, and is pulled toward the teacher's predictions at
the masked positions. Run: python demos/03_distill_student.py
"""

# %%
import numpy as np

from d2f.decode import DecodeConfig, d2f_decode, vanilla_decode
from d2f.diffusion import TeacherTrainConfig, train_teacher
from d2f.distill import TrainConfig, distill_run
from d2f.harness.tasks import TaskSpec, gen_dataset, special_ids
from d2f.model import ModelConfig, init_params

task = TaskSpec(kind="copy", vocab_size=16, alphabet_size=10, min_len=6, max_len=6, train_size=4000, heldout_size=50)
train, held = gen_dataset(task)
eos, mask = special_ids(16)
cfg = ModelConfig(vocab_size=16, dim=32, layers=2, heads=4, max_seq_len=16, mask_token_id=mask, eos_token_id=eos)
teacher = init_params(cfg, seed=0)
train_teacher(teacher, train, TeacherTrainConfig(seq_len=16, steps=500, batch_size=32, learning_rate=3e-3))

# %% [markdown]
# The student starts as an exact copy of the teacher, so the KL starts
# small; training teaches it to predict well without seeing later blocks.

# %%
result = distill_run(teacher, TrainConfig(block_size=2, seq_len=16, steps=200, batch_size=16, learning_rate=1e-3), train)
kl = np.array([r["loss"] for r in result.loss_log])
print(f"KL first 20 steps {kl[:20].mean():.2e}, last 20 steps {kl[-20:].mean():.2e}")


# %%
def score(model, fn, dc):
    hits, passes = 0, 0
    for p, a in zip(held.prompts, held.answers):
        out = fn(model, p, dc)
        hits += np.array_equal(out.tokens, a[:-1])
        passes += out.metrics.forward_passes
    return hits / len(held), passes / len(held)


print("teacher, vanilla  exact %.2f  passes/example %.1f" % score(teacher, vanilla_decode, DecodeConfig(max_len=8)))
dc = DecodeConfig(block_size=2, max_len=8, tau_add=0.1, tau_act=0.95, tau_conf=0.9)
print("student, d2f      exact %.2f  passes/example %.1f" % score(result.student, d2f_decode, dc))
