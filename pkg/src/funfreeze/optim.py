"""AdamW with decoupled weight decay, global-norm clipping and LR schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from funfreeze.errors import ConfigError


@dataclass
class LrSchedule:
    """``constant`` holds ``base_lr``; ``linear`` decays it to 0 at ``total_steps``. No warmup."""

    kind: str
    base_lr: float
    total_steps: int

    def __post_init__(self):
        if self.kind not in ("constant", "linear"):
            raise ConfigError(f"unknown lr schedule {self.kind!r}")
        if self.total_steps <= 0:
            raise ConfigError("total_steps must be positive")

    def lr_at(self, step: int) -> float:
        if self.kind == "constant":
            return self.base_lr
        return self.base_lr * max(0.0, 1.0 - step / self.total_steps)


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    max_grad_norm: float = 1.0
    # keyed by parameter name; created lazily the first time a parameter is updated
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)

    def ensure(self, name: str, like: np.ndarray) -> None:
        if name not in self.exp_avg:
            self.exp_avg[name] = np.zeros_like(like)
            self.exp_avg_sq[name] = np.zeros_like(like)
            self.steps[name] = 0


def adamw_step(
    state: OptimizerState,
    params: list[tuple[str, np.ndarray]],
    grads: dict[str, np.ndarray],
    lr: float | None = None,
) -> None:
    """Update ``params`` in place.

    Weight decay is applied first as ``p <- p - lr * wd * p``; the
    bias-corrected moment update follows. Bias correction counts the updates a
    parameter has received, so a layer unfrozen late starts from step 1.
    """
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas
    for name, p in params:
        g = grads[name]
        state.ensure(name, p)
        state.steps[name] += 1
        t = state.steps[name]
        if state.weight_decay:
            p -= lr * state.weight_decay * p
        m, v = state.exp_avg[name], state.exp_avg_sq[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float = 1.0) -> dict[str, np.ndarray]:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}
