"""Experiment driver: paired-seed ablation plans, metrics, cost accounting.

Every plan trains its arms from identical per-name initialization on one
shared on-disk dataset per seed (expert selection, corruption, and noise
are arm-level views), so arm differences isolate the configured change.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, build_dataset, load_dataset, make_examples
from .decode import generate, rank_closed_ended
from .errors import ConfigError, NumericError
from .experts import EXPERT_ORDER, KIND_CHANNELS, is_high_level
from .io import format_float, write_keyvalues
from .model import (FFN_MULT, FusionModel, ModelConfig, grid_side,
                    model_param_specs, parameter_counts, stem_channels)
from .params import FREEZE_POLICIES, partition_parameters
from .text import CAPTION_PROMPT, DEFAULT_VOCAB, EOS
from .train import TrainConfig, TrainExample, train_loop

PLAN_KINDS = ("expert-count-sweep", "corruption-sweep", "noise-expert",
              "resampler-latents-sweep", "resampler-layers-sweep",
              "adaptor-ratio-sweep", "freeze-policy-sweep", "mode-comparison")
METRICS = ("qa-accuracy", "caption-exact-match", "final-loss")

METRICS_HEADER = "plan,arm,seed,metric,value,trainable_params"
SUMMARY_HEADER = "plan,arm,metric,mean,std,n"
TIMINGS_HEADER = "arm,seed,seconds"


@dataclass(frozen=True)
class Arm:
    label: str
    mode: str = "fused"
    expert_kinds: tuple = ()
    corrupt_kind: Optional[str] = None
    corrupt_fraction: float = 0.0
    model_overrides: tuple = ()        # ((field, value), ...)
    freeze_policy: Optional[str] = None


@dataclass
class ExperimentPlan:
    kind: str
    arms: List[Arm]
    seeds: tuple = (0, 1, 2)
    metric: str = "qa-accuracy"
    n_scenes: int = 600
    difficulty: int = 1
    image_size: int = 32
    eval_fraction: float = 0.25
    base_seed: int = 0
    model: ModelConfig = field(default_factory=lambda: ModelConfig(
        mode="rgb-only", resampler_variant="none", expert_kinds=(),
        image_size=32))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        peak_lr=3e-3, warmup_steps=30, total_steps=300, batch_size=4))

    def __post_init__(self):
        if self.kind not in PLAN_KINDS:
            raise ConfigError(f"unknown plan kind {self.kind!r}")
        if self.metric not in METRICS:
            raise ConfigError(f"unknown metric {self.metric!r}")
        if len(self.arms) < 2:
            raise ConfigError("a plan needs at least 2 arms")
        if len(self.seeds) < 1:
            raise ConfigError("a plan needs at least 1 seed")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ConfigError("eval fraction must be in (0, 1)")

    def dataset_kinds(self) -> tuple:
        kinds = []
        for arm in self.arms:
            for kind in arm.expert_kinds:
                if kind != "noise" and kind not in kinds:
                    kinds.append(kind)
        return tuple(sorted(kinds, key=lambda k: EXPERT_ORDER.index(k)))

    def arm_config(self, arm: Arm) -> ModelConfig:
        overrides = dict(arm.model_overrides)
        if arm.mode == "rgb-only":
            overrides.update(mode="rgb-only", resampler_variant="none",
                             expert_kinds=())
        else:
            overrides.setdefault("resampler_variant", "learned")
            overrides.update(mode="fused", expert_kinds=arm.expert_kinds)
        return replace(self.model, image_size=self.image_size, **overrides)


def _count_arms(labels_kinds):
    return [Arm(label=label, mode="fused" if kinds else "rgb-only",
                expert_kinds=tuple(kinds)) for label, kinds in labels_kinds]


def default_plan(kind: str, **overrides) -> ExperimentPlan:
    """Standard arm set for each supported ablation protocol."""
    if kind == "expert-count-sweep":
        arms = _count_arms([
            ("rgb", ()),
            ("+2-experts", EXPERT_ORDER[:2]),
            ("+4-experts", EXPERT_ORDER[:4]),
            ("+6-experts", EXPERT_ORDER[:6]),
        ])
    elif kind == "corruption-sweep":
        arms = [
            Arm("depth-noise-25", expert_kinds=("depth",),
                corrupt_kind="depth", corrupt_fraction=0.25),
            Arm("depth-noise-10", expert_kinds=("depth",),
                corrupt_kind="depth", corrupt_fraction=0.10),
            Arm("depth-clean", expert_kinds=("depth",)),
        ]
    elif kind == "noise-expert":
        arms = [
            Arm("rgb", mode="rgb-only"),
            Arm("+noise", expert_kinds=("noise",)),
            Arm("+depth", expert_kinds=("depth",)),
            Arm("+depth-and-noise", expert_kinds=("depth", "noise")),
        ]
    elif kind == "resampler-latents-sweep":
        arms = [Arm(f"latents-{n}", expert_kinds=EXPERT_ORDER[:2],
                    model_overrides=(("resampler_latents", n),))
                for n in (8, 16, 32)]
    elif kind == "resampler-layers-sweep":
        arms = [Arm(f"layers-{n}", expert_kinds=EXPERT_ORDER[:2],
                    model_overrides=(("resampler_layers", n),))
                for n in (1, 2, 4)]
    elif kind == "adaptor-ratio-sweep":
        arms = [Arm(f"ratio-{r}", expert_kinds=EXPERT_ORDER[:2],
                    model_overrides=(("adaptor_ratio", r),))
                for r in (1.0, 0.5, 0.25)]
    elif kind == "freeze-policy-sweep":
        arms = [Arm(policy, expert_kinds=EXPERT_ORDER[:2], freeze_policy=policy)
                for policy in ("freeze-vision-and-language", "freeze-vision-only",
                               "freeze-language-only", "all-trainable")]
    elif kind == "mode-comparison":
        arms = [Arm("fused", expert_kinds=EXPERT_ORDER[:2]),
                Arm("rgb-only", mode="rgb-only")]
    else:
        raise ConfigError(f"unknown plan kind {kind!r}")
    return ExperimentPlan(kind=kind, arms=arms, **overrides)


# -- metrics --------------------------------------------------------------


def qa_accuracy(model: FusionModel, examples: Sequence[TrainExample]) -> float:
    """Fraction of closed-ended questions answered correctly."""
    correct = total = 0
    with T.no_grad():
        for example in examples:
            if not example.qa:
                continue
            z = model.encoder_forward(example.rgb, example.expert_maps)
            for question, options, answer_index in example.qa:
                best, _ = rank_closed_ended(model, z, question, options)
                correct += int(best == answer_index)
                total += 1
    if total == 0:
        raise ConfigError("no QA pairs available for qa-accuracy")
    return correct / total


def caption_exact_match(model: FusionModel, examples, beam: int = 3,
                        vocab=DEFAULT_VOCAB) -> float:
    """Fraction of scenes whose beam-decoded caption matches exactly."""
    prompt = vocab.encode(CAPTION_PROMPT)
    hits = 0
    with T.no_grad():
        for example in examples:
            z = model.encoder_forward(example.rgb, example.expert_maps)
            result = generate(model, z, prompt, beam=beam,
                              max_len=model.config.max_seq_len - len(prompt) - 1)
            reference = np.concatenate([example.caption_ids, [EOS]])
            hits += int(np.array_equal(result.tokens, reference))
    return hits / len(examples)


def final_loss(model: FusionModel, examples) -> float:
    """Mean prefix-LM loss over every sequence in the example set."""
    total = count = 0.0
    with T.no_grad():
        for example in examples:
            z = model.encoder_forward(example.rgb, example.expert_maps)
            for seq in example.sequences:
                total += model.prefix_lm_loss(z, seq).item()
                count += 1
    return total / count


_METRIC_FNS = {
    "qa-accuracy": qa_accuracy,
    "caption-exact-match": caption_exact_match,
    "final-loss": final_loss,
}


# -- plan execution -------------------------------------------------------


@dataclass
class PlanRow:
    plan: str
    arm: str
    seed: int
    metric: str
    value: Optional[float]           # None when the arm diverged
    trainable_params: int
    seconds: float


def _split(examples):
    return examples


def run_plan(plan: ExperimentPlan, out_dir) -> List[PlanRow]:
    """Train every (arm, seed) pair and write metrics/summary/timings CSVs.

    Within a seed, all arms share one dataset on disk and one per-name
    model initialization; a diverging arm is recorded as failed and the
    plan continues.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset_kinds = plan.dataset_kinds()
    n_eval = max(1, round(plan.n_scenes * plan.eval_fraction))
    rows: List[PlanRow] = []

    for seed in plan.seeds:
        data_seed = plan.base_seed * 7919 + seed
        data_dir = out_dir / "data" / f"seed{seed}"
        if not (data_dir / "manifest.txt").exists():
            build_dataset(data_dir, n=plan.n_scenes, difficulty=plan.difficulty,
                          expert_kinds=dataset_kinds,
                          image_size=plan.image_size, seed=data_seed)
        dataset = load_dataset(data_dir)

        for arm in plan.arms:
            config = plan.arm_config(arm)
            examples = make_examples(dataset, config,
                                     corrupt_kind=arm.corrupt_kind,
                                     corrupt_fraction=arm.corrupt_fraction,
                                     view_seed=data_seed)
            train_examples = examples[:-n_eval]
            eval_examples = examples[-n_eval:]
            model = FusionModel(config, seed=seed)
            train_cfg = replace(plan.train, seed=seed,
                                freeze_policy=arm.freeze_policy
                                or plan.train.freeze_policy)
            trainable, _ = partition_parameters(model.store,
                                                train_cfg.freeze_policy)
            started = time.monotonic()
            try:
                train_loop(model, train_examples, train_cfg)
                value = _METRIC_FNS[plan.metric](model, eval_examples)
            except NumericError:
                value = None
            rows.append(PlanRow(
                plan=plan.kind, arm=arm.label, seed=seed, metric=plan.metric,
                value=value,
                trainable_params=model.store.parameter_count(trainable),
                seconds=time.monotonic() - started))

    write_plan_outputs(plan, rows, out_dir)
    return rows


def write_plan_outputs(plan: ExperimentPlan, rows: List[PlanRow], out_dir):
    out_dir = Path(out_dir)
    arm_order = {arm.label: i for i, arm in enumerate(plan.arms)}
    ordered = sorted(rows, key=lambda r: (arm_order[r.arm], r.seed))

    lines = [METRICS_HEADER]
    for row in ordered:
        value = "failed" if row.value is None else format_float(row.value)
        lines.append(f"{row.plan},{row.arm},{row.seed},{row.metric},{value},"
                     f"{row.trainable_params}")
    (out_dir / "metrics.csv").write_text("\n".join(lines) + "\n",
                                         encoding="utf-8")

    lines = [SUMMARY_HEADER]
    for arm in plan.arms:
        values = [r.value for r in ordered
                  if r.arm == arm.label and r.value is not None]
        if values:
            mean = float(np.mean(values))
            std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
            lines.append(f"{plan.kind},{arm.label},{plan.metric},"
                         f"{format_float(mean)},{format_float(std)},"
                         f"{len(values)}")
        else:
            lines.append(f"{plan.kind},{arm.label},{plan.metric},failed,"
                         f"failed,0")
    (out_dir / "summary.csv").write_text("\n".join(lines) + "\n",
                                         encoding="utf-8")

    lines = [TIMINGS_HEADER]
    for row in ordered:
        lines.append(f"{row.arm},{row.seed},{row.seconds:.3f}")
    (out_dir / "timings.csv").write_text("\n".join(lines) + "\n",
                                         encoding="utf-8")

    protocol = {
        "kind": plan.kind,
        "arms": ";".join(a.label for a in plan.arms),
        "seeds": ",".join(str(s) for s in plan.seeds),
        "metric": plan.metric,
        "n_scenes": plan.n_scenes,
        "difficulty": plan.difficulty,
        "image_size": plan.image_size,
        "eval_fraction": plan.eval_fraction,
        "train.total_steps": plan.train.total_steps,
        "train.peak_lr": plan.train.peak_lr,
        "train.warmup_steps": plan.train.warmup_steps,
        "train.batch_size": plan.train.batch_size,
    }
    write_keyvalues(out_dir / "plan.txt", protocol)


def arm_mean(rows: List[PlanRow], label: str) -> float:
    values = [r.value for r in rows if r.arm == label and r.value is not None]
    if not values:
        raise ConfigError(f"no successful runs for arm {label!r}")
    return float(np.mean(values))


# -- cost accounting -------------------------------------------------------


@dataclass
class CostEstimate:
    trainable_params: int
    total_params: int
    training_flops: float
    inference_flops: float
    image_macs: float                # per example, all modules
    text_macs_per_token: float       # per text token, all modules
    trainable_image_macs: float
    trainable_text_macs_per_token: float


def _conv_chain_macs(in_channels, width, side, strides):
    channels = stem_channels(width)
    macs = 0
    previous = in_channels
    for out_channels, stride in zip(channels, strides):
        side = -(-side // stride)
        macs += 9 * previous * out_channels * side * side
        previous = out_channels
    macs += width * width * side * side   # output projection
    return macs


def estimate_cost(config: ModelConfig, tokens_per_example: int, examples: int,
                  expert_params: int = 0) -> CostEstimate:
    """Parameter counts plus flop estimates from per-module usage.

    Each weight matrix contributes 2 * params * (tokens it processes) to a
    forward pass; training costs three forward-equivalents (the standard
    6x rule) over the trainable path only. ``expert_params`` adds the
    frozen black-box label producers to the reported total (they carry no
    flops here since labels arrive precomputed).
    """
    if tokens_per_example < 0 or examples < 0:
        raise ConfigError("token and example counts must be non-negative")
    trainable_params, total_params = parameter_counts(config)
    ew, dw = config.encoder_width, config.decoder_width
    rgb_tokens = config.rgb_tokens
    latents = config.resampler_latents if config.mode == "fused" else 0
    hidden = max(1, round(ew * config.adaptor_ratio))
    d_hidden = max(1, round(dw * config.adaptor_ratio))

    from .model import QUARTER_STRIDES, RGB_STRIDES
    image = 0.0
    trainable_image = 0.0

    stem = _conv_chain_macs(3, ew, config.image_size, RGB_STRIDES)
    image += stem
    trainable_image += stem
    for kind in config.expert_kinds:
        if is_high_level(kind):
            macs = _conv_chain_macs(KIND_CHANNELS[kind], ew,
                                    -(-config.image_size // 4), QUARTER_STRIDES)
        else:
            macs = _conv_chain_macs(KIND_CHANNELS[kind], ew,
                                    config.image_size, RGB_STRIDES)
        image += macs
        trainable_image += macs

    per_enc_layer = (4 * ew * ew + 2 * FFN_MULT * ew * ew) * rgb_tokens
    adaptor_enc = 2 * hidden * ew * rgb_tokens
    image += config.encoder_layers * (per_enc_layer + adaptor_enc)
    trainable_image += config.encoder_layers * adaptor_enc

    if config.mode == "fused" and config.resampler_variant == "learned":
        expert_tokens = rgb_tokens * len(config.expert_kinds)
        kv = expert_tokens + latents
        per_layer = (2 * ew * ew * latents        # wq, wo
                     + 2 * ew * ew * kv           # wk, wv
                     + 2 * FFN_MULT * ew * ew * latents)
        image += config.resampler_layers * per_layer
        trainable_image += config.resampler_layers * per_layer

    cross_kv = rgb_tokens + latents
    cross_image = config.decoder_layers * 2 * ew * dw * cross_kv  # wk, wv on z
    image += cross_image
    trainable_image += cross_image

    per_dec_token = (4 * dw * dw                  # self-attention
                     + 2 * dw * dw                # cross wq, wo
                     + 2 * FFN_MULT * dw * dw)    # ffn
    adaptor_dec = 2 * d_hidden * dw
    head = dw * config.vocab_size
    text = config.decoder_layers * (per_dec_token + adaptor_dec) + head
    trainable_text = (config.decoder_layers * (2 * dw * dw + adaptor_dec)
                      + head)

    inference = 2.0 * (image + text * tokens_per_example)
    training = 6.0 * (trainable_image
                      + trainable_text * tokens_per_example) * examples
    return CostEstimate(
        trainable_params=trainable_params,
        total_params=total_params + expert_params,
        training_flops=training,
        inference_flops=inference,
        image_macs=image,
        text_macs_per_token=text,
        trainable_image_macs=trainable_image,
        trainable_text_macs_per_token=trainable_text,
    )
