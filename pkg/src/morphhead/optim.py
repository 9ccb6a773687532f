"""Bias-corrected Adam over the named parameter table.

Parameters live in the dictionary returned by ``fields.parameters`` (live
array references, frame latents included), gradients in a matching table
from ``fields.zero_gradients``. A step with any non-finite gradient is
skipped entirely and the incident is counted and logged — a single bad ray
batch must not poison the moment estimates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import OptimConfig

logger = logging.getLogger(__name__)


@dataclass
class OptimState:
    """Adam moment buffers plus the schedule position."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step_count: int = 0
    epoch: int = 0
    skipped_steps: int = 0
    config: OptimConfig = field(default_factory=OptimConfig)


def init_optimizer(params: dict[str, np.ndarray], cfg: OptimConfig | None = None) -> OptimState:
    cfg = cfg or OptimConfig()
    return OptimState(
        m={k: np.zeros_like(a) for k, a in params.items()},
        v={k: np.zeros_like(a) for k, a in params.items()},
        config=cfg,
    )


def current_lr(state: OptimState) -> float:
    """Learning rate for the optimizer's current epoch: decayed once the
    epoch counter passes the configured boundary."""
    cfg = state.config
    lr = cfg.learning_rate
    if state.epoch >= cfg.decay_after_epoch:
        lr *= cfg.decay_factor
    return lr


def adam_step(
    state: OptimState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]
) -> bool:
    """One in-place Adam update. Returns False (and changes nothing) when
    any gradient entry is non-finite."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            state.skipped_steps += 1
            logger.warning(
                "skipping optimizer step %d: non-finite gradient in %s",
                state.step_count + 1, name,
            )
            return False

    cfg = state.config
    lr = current_lr(state)
    state.step_count += 1
    t = state.step_count
    bias1 = 1.0 - cfg.beta1**t
    bias2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p -= lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.epsilon)
    return True


def state_to_arrays(state: OptimState) -> tuple[dict[str, np.ndarray], dict]:
    """Flatten the optimizer state for checkpointing."""
    arrays = {}
    for k, a in state.m.items():
        arrays[f"adam_m.{k}"] = a
    for k, a in state.v.items():
        arrays[f"adam_v.{k}"] = a
    meta = {
        "step_count": state.step_count,
        "epoch": state.epoch,
        "skipped_steps": state.skipped_steps,
        "config": dict(state.config.__dict__),
    }
    return arrays, meta


def state_from_arrays(arrays: dict[str, np.ndarray], meta: dict) -> OptimState:
    m = {k[len("adam_m."):]: np.array(v) for k, v in arrays.items() if k.startswith("adam_m.")}
    v = {k[len("adam_v."):]: np.array(a) for k, a in arrays.items() if k.startswith("adam_v.")}
    return OptimState(
        m=m,
        v=v,
        step_count=int(meta["step_count"]),
        epoch=int(meta["epoch"]),
        skipped_steps=int(meta.get("skipped_steps", 0)),
        config=OptimConfig(**meta["config"]),
    )
