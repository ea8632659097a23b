"""End-to-end runs: data, teacher, student, evaluation arms and the threshold sweep.

Every run writes under ``config.output_dir``:

    config.json            resolved configuration
    data.npz               train / held-out splits
    teacher.npz            teacher checkpoint, teacher_loss.ndjson its loss log
    student-<mode>.npz     distilled student per schedule mode, plus its loss log
    arms.json              raw per-arm metrics from eval / sweep
    outputs/<arm>.ndjson   decoded answers per held-out example
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..data import SequenceDataset, load_splits, save_splits
from ..decode import DecodeConfig, Metrics, block_sequential_decode, d2f_decode, vanilla_decode
from ..diffusion import train_teacher
from ..distill import distill_run
from ..model import ModelParams, init_params, load_checkpoint, save_checkpoint
from .config import RunConfig, save_config
from .tasks import gen_dataset

log = logging.getLogger(__name__)

DECODERS = {"vanilla": vanilla_decode, "cache_only": block_sequential_decode, "d2f": d2f_decode}
REQUIRED_ROLE = {"vanilla": "teacher", "cache_only": "student", "d2f": "student"}


def _prepare(config: RunConfig) -> RunConfig:
    cfg = config.resolved()
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    save_config(cfg, out / "config.json")
    return cfg


def student_path(config: RunConfig, schedule_mode: str | None = None) -> Path:
    return config.path(f"student-{schedule_mode or config.distill.schedule_mode}.npz")


def run_gen_data(config: RunConfig) -> tuple[SequenceDataset, SequenceDataset]:
    cfg = _prepare(config)
    train, held = gen_dataset(cfg.task)
    save_splits(cfg.path("data.npz"), train, held)
    return train, held


def _splits(cfg: RunConfig) -> tuple[SequenceDataset, SequenceDataset]:
    path = cfg.path("data.npz")
    if path.exists():
        return load_splits(path)
    return run_gen_data(cfg)


def run_train_teacher(config: RunConfig) -> Path:
    """Train a bidirectional teacher from scratch and write its checkpoint."""
    cfg = _prepare(config)
    train, _ = _splits(cfg)
    params = init_params(cfg.model_config(), seed=cfg.init_seed, role="teacher")
    train_teacher(params, train, cfg.teacher, log_path=cfg.path("teacher_loss.ndjson"))
    return save_checkpoint(params, cfg.path("teacher.npz"))


def load_teacher(cfg: RunConfig) -> ModelParams:
    path = cfg.path("teacher.npz")
    if not path.exists():
        raise FileNotFoundError(f"no teacher checkpoint at {path}; run train-teacher first")
    return load_checkpoint(path, expect_config=cfg.model_config(), expect_role="teacher")


def run_distill(config: RunConfig, schedule_mode: str | None = None) -> Path:
    """Distill a block-causal student from the run's teacher."""
    cfg = _prepare(config)
    if schedule_mode is not None:
        cfg = dataclasses.replace(cfg, distill=dataclasses.replace(cfg.distill, schedule_mode=schedule_mode))
    mode = cfg.distill.schedule_mode
    teacher = load_teacher(cfg)
    train, _ = _splits(cfg)
    result = distill_run(teacher, cfg.distill, train, log_path=cfg.path(f"distill-{mode}_loss.ndjson"))
    return save_checkpoint(result.student, student_path(cfg, mode))


@dataclass
class ArmResult:
    arm: str
    decoder: str
    checkpoint: str
    decode: DecodeConfig
    metrics: Metrics
    outputs: list[list[int]] = field(default_factory=list)

    def row(self) -> dict:
        d = self.decode
        vanilla = self.decoder == "vanilla"
        serial = self.decoder == "cache_only"  # runs with tau_add = tau_act = 1
        return {
            "arm": self.arm,
            "decoder": self.decoder,
            "checkpoint": self.checkpoint,
            "block_size": None if vanilla else d.block_size,
            "max_len": d.max_len,
            "vanilla_steps": (d.vanilla_steps or d.max_len) if vanilla else None,
            "tau_add": None if vanilla else (1.0 if serial else d.tau_add),
            "tau_act": None if vanilla else (1.0 if serial else d.tau_act),
            "tau_conf": None if vanilla else d.tau_conf,
            "examples": self.metrics.examples,
            "exact_match": self.metrics.exact_match,
            "forward_passes": self.metrics.forward_passes,
            "tokens_per_forward": self.metrics.tokens_per_forward,
            "tokens_per_second": self.metrics.tokens_per_second,
            "mean_latency_ms": self.metrics.mean_latency_ms,
            "mean_gen_length": self.metrics.mean_gen_length,
        }


def evaluate(
    model: ModelParams,
    decoder: str,
    dataset: SequenceDataset,
    decode_config: DecodeConfig,
    arm: str | None = None,
    checkpoint: str = "",
    trace_dir: Path | None = None,
    trace_examples: int = 0,
) -> ArmResult:
    """Decode every example of ``dataset`` and aggregate the metrics."""
    if decoder not in DECODERS:
        raise ValueError(f"unknown decoder {decoder!r}; choose from {sorted(DECODERS)}")
    if model.role != REQUIRED_ROLE[decoder]:
        raise ValueError(f"decoder {decoder!r} needs a {REQUIRED_ROLE[decoder]} checkpoint, got {model.role!r}")
    longest = max((len(a) for a in dataset.answers), default=0)
    if decode_config.max_len < longest - 1:
        raise ValueError(f"max_len {decode_config.max_len} cannot hold answers of length {longest - 1}")
    fn = DECODERS[decoder]
    tracing = trace_dir is not None and trace_examples > 0
    per, exact, outputs = [], [], []
    for i, (prompt, answer) in enumerate(zip(dataset.prompts, dataset.answers)):
        cfg = dataclasses.replace(decode_config, record_trace=tracing and i < trace_examples)
        res = fn(model, prompt, cfg)
        per.append(res.metrics)
        exact.append(bool(np.array_equal(res.tokens, answer[answer != dataset.eos_token_id])))
        outputs.append([int(t) for t in res.tokens])
        if cfg.record_trace:
            trace_dir.mkdir(parents=True, exist_ok=True)
            (trace_dir / f"{arm or decoder}-{i:04d}.ndjson").write_text(res.trace_lines())
    return ArmResult(arm or decoder, decoder, checkpoint, decode_config, Metrics.aggregate(per, exact), outputs)


def run_eval(checkpoint: str | Path, decoder: str, config: RunConfig, arm: str | None = None) -> Metrics:
    """Load a checkpoint and score it on the held-out split."""
    cfg = config.resolved()
    model = load_checkpoint(checkpoint, expect_config=cfg.model_config())
    _, held = _splits(cfg)
    held = held.subset(range(min(cfg.eval.examples, len(held))))
    return evaluate(model, decoder, held, cfg.decode, arm=arm, checkpoint=str(checkpoint)).metrics


def run_arms(config: RunConfig, decoders=("vanilla", "cache_only", "d2f")) -> list[ArmResult]:
    """Score the baselines and the pipelined decoder on one held-out split."""
    cfg = _prepare(config)
    _, held = _splits(cfg)
    held = held.subset(range(min(cfg.eval.examples, len(held))))
    results = []
    for name in decoders:
        path = cfg.path("teacher.npz") if REQUIRED_ROLE[name] == "teacher" else student_path(cfg)
        model = load_checkpoint(path, expect_config=cfg.model_config(), expect_role=REQUIRED_ROLE[name])
        results.append(
            evaluate(model, name, held, cfg.decode, arm=name, checkpoint=path.name,
                     trace_dir=cfg.path("traces"), trace_examples=cfg.eval.trace_examples)
        )
    _write_arms(cfg, results, "arms.json")
    return results


def sweep_grid(levels, adds) -> list[tuple[float, float, float]]:
    """(tau_add, tau_act, tau_conf) triples: each level paired with every add value and itself."""
    grid = []
    for level in levels:
        for add in list(adds) + [level]:
            grid.append((float(add), float(level), float(level)))
    return grid


def run_sweep(config: RunConfig) -> list[ArmResult]:
    """The threshold grid over the student; the last arm per level is single-state."""
    cfg = _prepare(config)
    _, held = _splits(cfg)
    held = held.subset(range(min(cfg.eval.examples, len(held))))
    path = student_path(cfg)
    model = load_checkpoint(path, expect_config=cfg.model_config(), expect_role="student")
    results = []
    for add, act, conf in sweep_grid(cfg.eval.sweep_tau_levels, cfg.eval.sweep_tau_add):
        dc = dataclasses.replace(cfg.decode, tau_add=add, tau_act=act, tau_conf=conf)
        arm = f"act{act:g}_add{add:g}"
        results.append(evaluate(model, "d2f", held, dc, arm=arm, checkpoint=path.name))
    _write_arms(cfg, results, "sweep_arms.json")
    return results


def _write_arms(cfg: RunConfig, results: list[ArmResult], name: str) -> None:
    cfg.path(name).write_text(json.dumps([r.row() for r in results], indent=2) + "\n")
    outdir = cfg.path("outputs")
    outdir.mkdir(exist_ok=True)
    for r in results:
        (outdir / f"{r.arm}.ndjson").write_text("".join(json.dumps(o) + "\n" for o in r.outputs))
