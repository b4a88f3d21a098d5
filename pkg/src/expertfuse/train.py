"""Training loop: warmup + cosine schedule, AdamW, freeze-aware updates.

Pre-training and fine-tuning are the same loop under different freeze
policies and data. Everything is deterministic given (seed, config,
examples); the trace and checkpoint bytes reproduce exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError
from .io import format_float, seeded_rng, write_keyvalues
from .model import FusionModel
from .params import (DEFAULT_POLICY, FREEZE_POLICIES, adamw_step,
                     partition_parameters, save_checkpoint)

TRACE_HEADER = "step,loss,lr,grad_norm"


@dataclass
class TrainConfig:
    peak_lr: float = 1e-3
    warmup_steps: int = 2000
    total_steps: int = 200
    weight_decay: float = 0.05
    batch_size: int = 4
    seed: int = 0
    freeze_policy: str = DEFAULT_POLICY
    clip_norm: Optional[float] = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ConfigError(f"peak lr must be positive, got {self.peak_lr}")
        if self.total_steps < 0 or self.warmup_steps < 0:
            raise ConfigError("step counts must be non-negative")
        if self.warmup_steps > self.total_steps:
            raise ConfigError(f"warmup ({self.warmup_steps}) exceeds total "
                              f"steps ({self.total_steps})")
        if self.batch_size < 1:
            raise ConfigError("batch size must be at least 1")
        if self.freeze_policy not in FREEZE_POLICIES:
            raise ConfigError(f"unknown freeze policy {self.freeze_policy!r}")

    def manifest_fields(self) -> dict:
        return {
            "train.peak_lr": self.peak_lr,
            "train.warmup_steps": self.warmup_steps,
            "train.total_steps": self.total_steps,
            "train.weight_decay": self.weight_decay,
            "train.batch_size": self.batch_size,
            "train.seed": self.seed,
            "train.freeze_policy": self.freeze_policy,
        }

    @classmethod
    def from_manifest_fields(cls, fields: dict) -> "TrainConfig":
        def get(key, cast, default):
            raw = fields.get(f"train.{key}")
            return default if raw is None else cast(raw)

        return cls(
            peak_lr=get("peak_lr", float, 1e-3),
            warmup_steps=get("warmup_steps", int, 2000),
            total_steps=get("total_steps", int, 200),
            weight_decay=get("weight_decay", float, 0.05),
            batch_size=get("batch_size", int, 4),
            seed=get("seed", int, 0),
            freeze_policy=get("freeze_policy", str, DEFAULT_POLICY),
            clip_norm=get("clip_norm", float, None),
        )


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak, then cosine annealing to zero."""
    if step < 0 or step > cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    decay_span = max(cfg.total_steps - cfg.warmup_steps, 1)
    progress = (step - cfg.warmup_steps) / decay_span
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainExample:
    """One scene's model inputs plus its supervision sequences."""

    rgb: np.ndarray
    expert_maps: list
    sequences: list                  # TokenSequence, caption first
    qa: list = field(default_factory=list)  # (question ids, options, answer idx)
    caption_ids: Optional[np.ndarray] = None


@dataclass
class TrainResult:
    trace: list                      # (step, loss, lr, grad_norm)
    model: FusionModel


def _batch_loss(model: FusionModel, batch: Sequence[TrainExample]):
    losses = []
    for example in batch:
        z = model.encoder_forward(example.rgb, example.expert_maps)
        for seq in example.sequences:
            losses.append(model.prefix_lm_loss(z, seq))
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    return total / len(losses)


def train_loop(model: FusionModel, examples: Sequence[TrainExample],
               cfg: TrainConfig, out_dir=None) -> TrainResult:
    """Run cfg.total_steps updates; optionally write trace and checkpoint."""
    if not examples:
        raise ConfigError("training needs a non-empty example list")
    trainable, _ = partition_parameters(model.store, cfg.freeze_policy)
    store = model.store
    order_rng = seeded_rng("train-order", cfg.seed)
    queue: List[int] = []
    trace = []

    for step in range(cfg.total_steps):
        while len(queue) < cfg.batch_size:
            queue.extend(order_rng.permutation(len(examples)).tolist())
        indices = [queue.pop(0) for _ in range(cfg.batch_size)]

        store.zero_grads()
        loss = _batch_loss(model, [examples[i] for i in indices])
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise NumericError(f"non-finite loss at step {step}")
        loss.backward()

        grads = {}
        squared = 0.0
        for name in trainable:
            grad = store[name].grad
            grad = np.zeros(store[name].shape) if grad is None else grad
            grads[name] = grad
            squared += float((grad * grad).sum())
        grad_norm = math.sqrt(squared)
        if cfg.clip_norm is not None and grad_norm > cfg.clip_norm:
            scale = cfg.clip_norm / grad_norm
            grads = {name: g * scale for name, g in grads.items()}

        lr = lr_at(step, cfg)
        adamw_step(store, grads, lr, beta1=cfg.beta1, beta2=cfg.beta2,
                   eps=cfg.eps, weight_decay=cfg.weight_decay)
        trace.append((step, loss_value, lr, grad_norm))

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_trace(out_dir / "trace.csv", trace)
        fields = dict(model.config.manifest_fields())
        fields.update(cfg.manifest_fields())
        save_checkpoint(out_dir / "checkpoint", fields, store)
    return TrainResult(trace=trace, model=model)


def write_trace(path, trace):
    lines = [TRACE_HEADER]
    for step, loss, lr, grad_norm in trace:
        lines.append(f"{step},{format_float(loss)},{format_float(lr)},"
                     f"{format_float(grad_norm)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
