"""A miniature version of the full benchmark: data, teacher, student, the
three decoders and the threshold grid, all written to one run directory.

Equivalent CLI:
    d2f gen-data --config CFG ; d2f train-teacher ... ; d2f distill ... ; d2f eval ... ; d2f sweep ...

Run: python demos/05_benchmark_and_sweep.py [output_dir]   (about half a minute)
"""

# %%
import sys

from d2f.harness import runs
from d2f.harness.config import load_config
from d2f.harness.report import emit_report

out = sys.argv[1] if len(sys.argv) > 1 else "runs/demo"
cfg = load_config(None, [
    f'output_dir="{out}"', "seed=0",
    "task.num_digits=6", "task.train_size=5000", "task.heldout_size=100",
    "model.dim=48", "model.layers=2", "model.heads=4",
    "teacher.seq_len=15", "teacher.steps=1500", "teacher.batch_size=32",
    "distill.block_size=2", "distill.seq_len=15", "distill.steps=200", "distill.batch_size=16",
    "distill.learning_rate=1e-4",
    "decode.block_size=2", "decode.max_len=8", "eval.examples=100",
])

# %%
runs.run_gen_data(cfg)
runs.run_train_teacher(cfg)
runs.run_distill(cfg)
arms = runs.run_arms(cfg)
path = emit_report([a.row() for a in arms], "csv", cfg.path("metrics.csv"), baseline="vanilla")
for a in arms:
    m = a.metrics
    print(f"{a.arm:>10}  exact {m.exact_match:.2f}  passes {m.forward_passes:5d}  tokens/pass {m.tokens_per_forward:.2f}")
print("wrote", path)

# %% [markdown]
# The grid pairs every activation level with three append thresholds plus
# the single-state setting tau_add = tau_act.

# %%
grid = runs.run_sweep(cfg)
for a in grid:
    m = a.metrics
    print(f"{a.arm:>16}  exact {m.exact_match:.2f}  passes {m.forward_passes:5d}")
emit_report([a.row() for a in grid], "csv", cfg.path("sweep.csv"))
