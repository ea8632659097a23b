"""Watch the pipelined decoder on a scripted model.

The scripted model is confident about a position only once a chosen
earlier position has been decoded, so blocks stall and overlap in a
controlled way. Each row below is one forward pass; each column group is
one block of six answer positions.

Legend: ``.`` still masked, digit = decoded, ``*`` decoded this step.
Block states: S semi-activated, F fully-activated, C complete.
Run: python demos/04_pipeline_trace.py
"""

# %%
from d2f.decode import DecodeConfig, new_pipeline, pipeline_step
from d2f.scripted import ScriptedOracle

N = None
prereq = [N, N, 1, 2, N, 4, N, N, 7, N, 9, 10, N, N, 13, 14, N, N]
oracle = ScriptedOracle(prompt_len=3, targets=[i % 6 for i in range(16)] + [6, 6], prereq=prereq)
STATE = {"semi_activated": "S", "fully_activated": "F", "complete": "C"}


def show(cfg, title):
    print(f"\n{title}")
    state = new_pipeline(oracle, [1, 2, 3], cfg)
    while not state.finished:
        before = [b.decoded.copy() for b in state.blocks]
        pipeline_step(state, oracle, cfg)
        cells = []
        for i, b in enumerate(state.blocks):
            old = before[i] if i < len(before) else b.decoded & False
            chars = "".join("*" if d and not o else (str(t) if d else ".") for t, d, o in zip(b.tokens, b.decoded, old))
            cells.append(f"{STATE[b.state]}[{chars}]")
        print(f"pass {state.forward_count:2d}  commit {state.committed_blocks}  " + " ".join(cells))
    print(f"forward passes: {state.forward_count}")


show(DecodeConfig(block_size=6, max_len=18, tau_add=1 / 3, tau_act=5 / 6, tau_conf=0.9), "pipelined (tau_add=1/3, tau_act=5/6)")
show(DecodeConfig(block_size=6, max_len=18, tau_add=1.0, tau_act=1.0, tau_conf=0.9), "one block at a time (tau_add=tau_act=1)")
