"""Run configuration: one nested JSON document, dotted-key overrides, one seed.

Sections mirror the library dataclasses (``task``, ``model``, ``teacher``,
``distill``, ``decode``) plus an ``eval`` section for split sizes and a few
top-level fields. Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ..decode import DecodeConfig
from ..diffusion import TeacherTrainConfig
from ..distill import TrainConfig
from ..model import ModelConfig
from .tasks import TaskSpec, special_ids


@dataclass
class ModelSettings:
    """Architecture knobs; vocabulary and special ids come from the task."""

    dim: int = 128
    layers: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    dtype: str = "float32"


@dataclass
class EvalSettings:
    examples: int = 500  # held-out prompts scored per arm; capped by the split size
    sweep_tau_levels: tuple[float, ...] = (0.85, 0.9, 0.95)
    sweep_tau_add: tuple[float, ...] = (0.1, 0.5, 0.7)
    baseline_arm: str = "vanilla"
    trace_examples: int = 0  # decode traces written for this many leading examples per arm


@dataclass
class RunConfig:
    task: TaskSpec = field(default_factory=lambda: TaskSpec(kind="addition"))
    model: ModelSettings = field(default_factory=ModelSettings)
    teacher: TeacherTrainConfig = field(default_factory=TeacherTrainConfig)
    distill: TrainConfig = field(default_factory=lambda: TrainConfig(block_size=8, seq_len=128, steps=5000))
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    output_dir: str = "runs/default"
    report_format: str = "csv"
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.report_format not in ("csv", "json"):
            raise ValueError(f"report_format must be csv or json, got {self.report_format!r}")

    def model_config(self) -> ModelConfig:
        eos, mask = special_ids(self.task.vocab_size)
        m = self.model
        return ModelConfig(
            vocab_size=self.task.vocab_size,
            dim=m.dim,
            layers=m.layers,
            heads=m.heads,
            max_seq_len=max(self.teacher.seq_len, self.distill.seq_len, self.task.max_prompt_len + self.decode.max_len),
            mask_token_id=mask,
            eos_token_id=eos,
            mlp_ratio=m.mlp_ratio,
            dtype=m.dtype,
        )

    def resolved(self) -> "RunConfig":
        """Copy with every component seed derived from ``seed`` (if set)."""
        if self.seed is None:
            return self
        streams = np.random.SeedSequence(self.seed).spawn(4)
        task_s, teacher_s, distill_s, decode_s = (int(s.generate_state(1)[0]) for s in streams)
        return dataclasses.replace(
            self,
            task=dataclasses.replace(self.task, seed=task_s),
            teacher=dataclasses.replace(self.teacher, seed=teacher_s),
            distill=dataclasses.replace(self.distill, seed=distill_s),
            decode=dataclasses.replace(self.decode, seed=decode_s),
        )

    @property
    def init_seed(self) -> int:
        return self.teacher.seed

    def path(self, name: str) -> Path:
        return Path(self.output_dir) / name

    def to_dict(self) -> dict[str, Any]:
        return _to_plain(dataclasses.asdict(self))


_SECTIONS = {
    "task": TaskSpec,
    "model": ModelSettings,
    "teacher": TeacherTrainConfig,
    "distill": TrainConfig,
    "decode": DecodeConfig,
    "eval": EvalSettings,
}


def _to_plain(x):
    if isinstance(x, dict):
        return {k: _to_plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_to_plain(v) for v in x]
    return x


def _coerce(cls, values: dict[str, Any]):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ValueError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    out = {}
    for k, v in values.items():
        if isinstance(v, list):
            v = tuple(v)
        out[k] = v
    return out


def from_dict(data: dict[str, Any]) -> RunConfig:
    base = RunConfig()
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ValueError(f"section {key!r} must be a mapping")
            current = dataclasses.asdict(getattr(base, key))
            current.update(_coerce(_SECTIONS[key], value))
            kwargs[key] = _SECTIONS[key](**current)
        elif key in ("output_dir", "report_format", "seed"):
            kwargs[key] = value
        else:
            raise ValueError(f"unknown top-level key {key!r}")
    return dataclasses.replace(base, **kwargs)


def load_config(path: str | Path | None, overrides: list[str] = ()) -> RunConfig:
    data = json.loads(Path(path).read_text()) if path else {}
    for item in overrides:
        apply_override(data, item)
    return from_dict(data)


def apply_override(data: dict[str, Any], item: str) -> None:
    """Apply ``section.key=value``; the value is parsed as JSON when possible."""
    if "=" not in item:
        raise ValueError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ValueError(f"override {item!r} descends into a non-section")
    node[parts[-1]] = value


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
