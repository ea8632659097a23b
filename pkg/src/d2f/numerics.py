"""Dense probability primitives, AdamW, and a finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

Params = dict[str, np.ndarray]


def _require_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains non-finite values")


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    logits = np.asarray(logits)
    _require_finite(logits, "logits")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits)
    _require_finite(logits, "logits")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def kl_rows(target_probs: np.ndarray, predicted_log_probs: np.ndarray) -> np.ndarray:
    """Per-row KL(target || predicted).

    Entries where the target probability is exactly zero contribute nothing
    (0 * log 0 = 0), so one-hot targets never produce NaN.
    """
    p = np.asarray(target_probs)
    logq = np.asarray(predicted_log_probs)
    if p.shape != logq.shape:
        raise ValueError(f"shape mismatch: target {p.shape} vs predicted {logq.shape}")
    pos = p > 0
    logp = np.log(np.where(pos, p, 1.0))
    return np.where(pos, p * (logp - logq), 0.0).sum(axis=-1)


def cross_entropy_rows(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-row -log softmax(logits)[target]."""
    logp = log_softmax_rows(logits)
    return -np.take_along_axis(logp, np.asarray(targets)[..., None], axis=-1)[..., 0]


@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: Params = field(default_factory=dict)
    second_moment: Params = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        b1, b2 = self.betas
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], **kwargs) -> "OptimizerState":
        state = cls(**kwargs)
        for name, p in params.items():
            state.first_moment[name] = np.zeros_like(p)
            state.second_moment[name] = np.zeros_like(p)
        return state


def adamw_step(params: Params, grads: Mapping[str, np.ndarray], state: OptimizerState) -> tuple[Params, OptimizerState]:
    """One AdamW update, applied in place and returned.

    Weight decay is decoupled: parameters shrink by ``lr * weight_decay``
    before the Adam step and the moments never see the decay term.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")

    state.step_count += 1
    lr, wd, eps = state.learning_rate, state.weight_decay, state.epsilon
    b1, b2 = state.betas
    bc1 = 1.0 - b1**state.step_count
    bc2 = 1.0 - b2**state.step_count
    for name, g in grads.items():
        p = params[name]
        m = state.first_moment.setdefault(name, np.zeros_like(p))
        v = state.second_moment.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if wd:
            p *= 1.0 - lr * wd
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


def grad_check(
    loss_fn: Callable[[Params], tuple[float, Params]],
    params: Params,
    perturbation: float = 1e-5,
    samples_per_param: int = 8,
    seed: int = 0,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``loss_fn(params)`` must return ``(loss, grads)`` and be deterministic.
    A few coordinates are sampled from every parameter array; the error at a
    coordinate is ``|a - fd| / max(|a|, |fd|, 1e-8)``.
    """
    rng = np.random.default_rng(seed)
    _, grads = loss_fn(params)
    worst = 0.0
    for name in sorted(params):
        p = params[name]
        flat = p.reshape(-1)
        n = min(samples_per_param, flat.size)
        for idx in rng.choice(flat.size, size=n, replace=False):
            old = flat[idx]
            flat[idx] = old + perturbation
            up, _ = loss_fn(params)
            flat[idx] = old - perturbation
            down, _ = loss_fn(params)
            flat[idx] = old
            fd = (up - down) / (2.0 * perturbation)
            analytic = float(grads[name].reshape(-1)[idx]) if name in grads else 0.0
            denom = max(abs(analytic), abs(fd), 1e-8)
            worst = max(worst, abs(analytic - fd) / denom)
    return worst
