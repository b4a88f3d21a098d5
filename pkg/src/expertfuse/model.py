"""The fusion network: task-specific conv stems, a frozen transformer
vision encoder with adaptors, the experts resampler, and a frozen
autoregressive decoder with trainable cross-attention over the fused
feature sequence.

Two modes: "fused" conditions on RGB features plus a fixed number of
resampled expert tokens; "rgb-only" drops the expert path entirely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .experts import KIND_CHANNELS, ExpertLabelMap, is_high_level
from .io import seeded_rng
from .params import ParameterStore, ParamSpec
from .scene import INSTANCE_SLOTS
from .tensor import Tensor
from .text import BOS, DEFAULT_VOCAB, TokenSequence

RGB_STRIDES = (2, 2, 2, 2, 1)         # 16x spatial reduction
QUARTER_STRIDES = (2, 2, 1, 1, 1)     # high-level inputs arrive at 1/4 scale
FFN_MULT = 4
LN_EPS = 1e-5
NEG_INF = -1e9
INSTANCE_DIM = 64

RESAMPLER_VARIANTS = ("learned", "random-sampling", "none")
MODES = ("fused", "rgb-only")


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def grid_side(image_size: int) -> int:
    side = image_size
    for stride in RGB_STRIDES:
        side = _ceil_div(side, stride)
    return side


@dataclass(frozen=True)
class ModelConfig:
    encoder_layers: int = 2
    encoder_width: int = 64
    decoder_layers: int = 2
    decoder_width: int = 64
    heads: int = 4
    patch_stride: int = 16
    resampler_latents: int = 16
    resampler_layers: int = 2
    resampler_variant: str = "learned"
    adaptor_ratio: float = 1.0
    vocab_size: int = len(DEFAULT_VOCAB)
    max_seq_len: int = 24
    expert_kinds: tuple = ("depth", "segmentation")
    mode: str = "fused"
    image_size: int = 64

    def __post_init__(self):
        object.__setattr__(self, "expert_kinds", tuple(self.expert_kinds))
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.resampler_variant not in RESAMPLER_VARIANTS:
            raise ConfigError(f"resampler variant {self.resampler_variant!r} "
                              f"not in {RESAMPLER_VARIANTS}")
        if self.mode == "rgb-only":
            if self.resampler_variant != "none" or self.expert_kinds:
                raise ConfigError("rgb-only mode requires resampler variant "
                                  "'none' and no expert kinds")
        else:
            if self.resampler_variant == "none":
                raise ConfigError("fused mode needs a resampler variant")
            if not self.expert_kinds:
                raise ConfigError("fused mode needs at least one expert kind")
        for kind in self.expert_kinds:
            if kind not in KIND_CHANNELS:
                raise ConfigError(f"unknown expert kind {kind!r}")
        if self.encoder_width % self.heads or self.decoder_width % self.heads:
            raise ConfigError(f"widths ({self.encoder_width}, "
                              f"{self.decoder_width}) must divide by "
                              f"{self.heads} heads")
        product = 1
        for stride in RGB_STRIDES:
            product *= stride
        if self.patch_stride != product:
            raise ConfigError(f"patch stride is fixed at {product} by the "
                              f"5-conv stem, got {self.patch_stride}")
        if self.vocab_size < 3:
            raise ConfigError("vocab must hold eos, bos, and at least one word")

    @property
    def rgb_tokens(self) -> int:
        return grid_side(self.image_size) ** 2

    @property
    def cross_key_count(self) -> int:
        extra = self.resampler_latents if self.mode == "fused" else 0
        return self.rgb_tokens + extra

    def uses_instance_table(self) -> bool:
        return self.mode == "fused" and any(is_high_level(k)
                                            for k in self.expert_kinds)

    def manifest_fields(self) -> dict:
        return {
            "model.encoder_layers": self.encoder_layers,
            "model.encoder_width": self.encoder_width,
            "model.decoder_layers": self.decoder_layers,
            "model.decoder_width": self.decoder_width,
            "model.heads": self.heads,
            "model.patch_stride": self.patch_stride,
            "model.resampler_latents": self.resampler_latents,
            "model.resampler_layers": self.resampler_layers,
            "model.resampler_variant": self.resampler_variant,
            "model.adaptor_ratio": self.adaptor_ratio,
            "model.vocab_size": self.vocab_size,
            "model.max_seq_len": self.max_seq_len,
            "model.expert_kinds": ",".join(self.expert_kinds),
            "model.mode": self.mode,
            "model.image_size": self.image_size,
        }

    @classmethod
    def from_manifest_fields(cls, fields: dict) -> "ModelConfig":
        def get(key, cast, default):
            raw = fields.get(f"model.{key}")
            return default if raw is None else cast(raw)

        kinds_raw = fields.get("model.expert_kinds", "")
        kinds = tuple(k for k in kinds_raw.split(",") if k)
        return cls(
            encoder_layers=get("encoder_layers", int, 2),
            encoder_width=get("encoder_width", int, 64),
            decoder_layers=get("decoder_layers", int, 2),
            decoder_width=get("decoder_width", int, 64),
            heads=get("heads", int, 4),
            patch_stride=get("patch_stride", int, 16),
            resampler_latents=get("resampler_latents", int, 16),
            resampler_layers=get("resampler_layers", int, 2),
            resampler_variant=get("resampler_variant", str, "learned"),
            adaptor_ratio=get("adaptor_ratio", float, 1.0),
            vocab_size=get("vocab_size", int, len(DEFAULT_VOCAB)),
            max_seq_len=get("max_seq_len", int, 24),
            expert_kinds=kinds,
            mode=get("mode", str, "fused"),
            image_size=get("image_size", int, 64),
        )


def stem_channels(width: int) -> list:
    return [max(1, width // 4), max(1, width // 2), width, width, width]


def _linear_specs(prefix, n_in, n_out, group, init="linear"):
    yield ParamSpec(f"{prefix}.w", (n_in, n_out), group, init)
    yield ParamSpec(f"{prefix}.b", (n_out,), group, "zeros")


def _norm_specs(prefix, dim, group):
    yield ParamSpec(f"{prefix}.gain", (dim,), group, "ones")
    yield ParamSpec(f"{prefix}.bias", (dim,), group, "zeros")


def _attention_specs(prefix, q_width, kv_width, out_width, group):
    yield from _linear_specs(f"{prefix}.wq", q_width, out_width, group)
    yield from _linear_specs(f"{prefix}.wk", kv_width, out_width, group)
    yield from _linear_specs(f"{prefix}.wv", kv_width, out_width, group)
    yield from _linear_specs(f"{prefix}.wo", out_width, out_width, group)


def _ffn_specs(prefix, width, group):
    yield from _linear_specs(f"{prefix}.w1", width, FFN_MULT * width, group)
    yield from _linear_specs(f"{prefix}.w2", FFN_MULT * width, width, group)


def _adaptor_specs(prefix, width, ratio):
    hidden = max(1, round(width * ratio))
    yield from _linear_specs(f"{prefix}.down", width, hidden, "adaptor")
    yield ParamSpec(f"{prefix}.up.w", (hidden, width), "adaptor", "zeros")
    yield ParamSpec(f"{prefix}.up.b", (width,), "adaptor", "zeros")


def _stem_specs(kind, in_channels, width):
    channels = stem_channels(width)
    previous = in_channels
    for j, out_channels in enumerate(channels):
        yield ParamSpec(f"stem.{kind}.conv{j}.kernel",
                        (3, 3, previous, out_channels), "stem", "conv")
        yield ParamSpec(f"stem.{kind}.conv{j}.bias",
                        (out_channels,), "stem", "zeros")
        if j < len(channels) - 1:
            yield from _norm_specs(f"stem.{kind}.norm{j}", out_channels, "stem")
        previous = out_channels
    yield from _linear_specs(f"stem.{kind}.proj", width, width, "stem")


def model_param_specs(config: ModelConfig) -> Iterator[ParamSpec]:
    """Every parameter the model owns, in deterministic registry order."""
    ew, dw = config.encoder_width, config.decoder_width

    yield from _stem_specs("rgb", 3, ew)
    for kind in config.expert_kinds:
        yield from _stem_specs(kind, KIND_CHANNELS[kind], ew)

    yield ParamSpec("pos.encoder", (config.rgb_tokens, ew), "pos_embed",
                    "embedding")
    yield ParamSpec("pos.decoder", (config.max_seq_len, dw), "pos_embed",
                    "embedding")

    for i in range(config.encoder_layers):
        block = f"encoder.block{i}"
        yield from _norm_specs(f"{block}.ln1", ew, "vision_backbone")
        yield from _attention_specs(f"{block}.attn", ew, ew, ew,
                                    "vision_backbone")
        yield from _norm_specs(f"{block}.ln2", ew, "vision_backbone")
        yield from _ffn_specs(f"{block}.ffn", ew, "vision_backbone")
        yield from _adaptor_specs(f"encoder.adaptor{i}", ew,
                                  config.adaptor_ratio)
    yield from _norm_specs("encoder.final_norm", ew, "vision_backbone")

    if config.mode == "fused" and config.resampler_variant == "learned":
        yield ParamSpec("resampler.latents",
                        (config.resampler_latents, ew), "resampler", "embedding")
        for j in range(config.resampler_layers):
            block = f"resampler.block{j}"
            yield from _norm_specs(f"{block}.lnq", ew, "resampler")
            yield from _norm_specs(f"{block}.lnkv", ew, "resampler")
            yield from _attention_specs(f"{block}.attn", ew, ew, ew, "resampler")
            yield from _norm_specs(f"{block}.ln2", ew, "resampler")
            yield from _ffn_specs(f"{block}.ffn", ew, "resampler")
        yield from _norm_specs("resampler.final_norm", ew, "resampler")

    if config.uses_instance_table():
        yield ParamSpec("instance_table", (INSTANCE_SLOTS, INSTANCE_DIM),
                        "instance_table", "embedding")

    yield ParamSpec("token_embedding", (config.vocab_size, dw),
                    "token_embedding", "embedding")
    for i in range(config.decoder_layers):
        block = f"decoder.block{i}"
        yield from _norm_specs(f"{block}.ln1", dw, "language_backbone")
        yield from _attention_specs(f"{block}.self_attn", dw, dw, dw,
                                    "language_backbone")
        yield from _norm_specs(f"{block}.lnc", dw, "cross_attention")
        yield from _attention_specs(f"{block}.cross_attn", dw, ew, dw,
                                    "cross_attention")
        yield from _norm_specs(f"{block}.ln2", dw, "language_backbone")
        yield from _ffn_specs(f"{block}.ffn", dw, "language_backbone")
        yield from _adaptor_specs(f"decoder.adaptor{i}", dw,
                                  config.adaptor_ratio)
    yield from _norm_specs("decoder.final_norm", dw, "language_backbone")
    yield from _linear_specs("lm_head", dw, config.vocab_size, "lm_head")


def parameter_counts(config: ModelConfig):
    """(trainable, total) under the default policy, without allocation."""
    from .params import DEFAULT_POLICY, FREEZE_POLICIES
    frozen_groups = set(FREEZE_POLICIES[DEFAULT_POLICY])
    trainable = total = 0
    for spec in model_param_specs(config):
        count = int(np.prod(spec.shape))
        total += count
        if spec.group not in frozen_groups:
            trainable += count
    return trainable, total


class FusionModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.store = ParameterStore()
        for spec in model_param_specs(config):
            self.store.add(spec, seed)
        self.store.seal()

    def _p(self, name: str) -> Tensor:
        return self.store[name]

    # -- building blocks ----------------------------------------------

    def _linear(self, prefix: str, x: Tensor) -> Tensor:
        return T.matmul(x, self._p(f"{prefix}.w")) + self._p(f"{prefix}.b")

    def _norm(self, prefix: str, x: Tensor) -> Tensor:
        return T.layer_norm(x, self._p(f"{prefix}.gain"),
                            self._p(f"{prefix}.bias"), eps=LN_EPS)

    def _split_heads(self, x: Tensor, length: int) -> Tensor:
        head_dim = x.shape[-1] // self.config.heads
        return T.transpose(T.reshape(x, (length, self.config.heads, head_dim)),
                           (1, 0, 2))

    def _attention(self, prefix: str, queries: Tensor, keys_values: Tensor,
                   mask: Optional[np.ndarray] = None) -> Tensor:
        q_len, kv_len = queries.shape[0], keys_values.shape[0]
        q = self._split_heads(self._linear(f"{prefix}.wq", queries), q_len)
        k = self._split_heads(self._linear(f"{prefix}.wk", keys_values), kv_len)
        v = self._split_heads(self._linear(f"{prefix}.wv", keys_values), kv_len)
        scale = 1.0 / math.sqrt(q.shape[-1])
        scores = T.matmul(q * scale, T.transpose(k))
        if mask is not None:
            scores = scores + Tensor(mask)
        weights = T.softmax(scores, axis=-1)
        mixed = T.transpose(T.matmul(weights, v), (1, 0, 2))
        width = mixed.shape[1] * mixed.shape[2]
        return self._linear(f"{prefix}.wo", T.reshape(mixed, (q_len, width)))

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        return self._linear(f"{prefix}.w2",
                            T.squared_relu(self._linear(f"{prefix}.w1", x)))

    def adaptor_forward(self, prefix: str, x: Tensor) -> Tensor:
        """Residual bottleneck: x + Up(squared_relu(Down(x)))."""
        return x + self._linear(f"{prefix}.up",
                                T.squared_relu(self._linear(f"{prefix}.down", x)))

    # -- stems ----------------------------------------------------------

    def _expert_input(self, label: ExpertLabelMap) -> Tensor:
        grid = Tensor(label.grid)
        if label.instance_ids is None or not self.config.uses_instance_table():
            return grid
        ids = label.instance_ids.reshape(-1)
        valid = ids >= 0
        safe = np.where(valid, ids % INSTANCE_SLOTS, 0)
        rows = T.embedding(self._p("instance_table"), safe)
        rows = rows * Tensor(valid[:, None].astype(np.float64))
        height, width, channels = label.grid.shape
        return grid + T.reshape(rows, (height, width, channels))

    def stem_forward(self, inputs, kind: str) -> Tensor:
        """Map one input grid to (tokens, width) with positions added.

        RGB and full-resolution kinds reduce 16x; quarter-scale kinds use
        the stride schedule that lands on the same token grid.
        """
        if kind == "rgb":
            x = inputs if isinstance(inputs, Tensor) else Tensor(np.asarray(inputs))
            expected_channels = 3
            strides = RGB_STRIDES
        else:
            if not isinstance(inputs, ExpertLabelMap):
                raise ContractError(f"{kind} stem expects an ExpertLabelMap")
            if inputs.kind != kind:
                raise ConfigError(f"label kind {inputs.kind!r} does not match "
                                  f"stem kind {kind!r}")
            expected_channels = KIND_CHANNELS[kind]
            strides = QUARTER_STRIDES if is_high_level(kind) else RGB_STRIDES
            x = self._expert_input(inputs)
        if f"stem.{kind}.conv0.kernel" not in self.store:
            raise ConfigError(f"no stem registered for kind {kind!r}")
        if x.ndim != 3 or x.shape[2] != expected_channels:
            raise ConfigError(f"{kind} stem expects {expected_channels} "
                              f"channels, got shape {x.shape}")

        last = len(strides) - 1
        for j, stride in enumerate(strides):
            x = T.conv2d(x, self._p(f"stem.{kind}.conv{j}.kernel"), stride=stride)
            x = x + self._p(f"stem.{kind}.conv{j}.bias")
            if j < last:
                x = self._norm(f"stem.{kind}.norm{j}", x)
                x = T.squared_relu(x)
        tokens = T.reshape(x, (x.shape[0] * x.shape[1], x.shape[2]))
        tokens = self._linear(f"stem.{kind}.proj", tokens)
        positions = self._p("pos.encoder")[: tokens.shape[0]]
        return tokens + positions

    # -- encoder ---------------------------------------------------------

    def _encoder_blocks(self, x: Tensor) -> Tensor:
        for i in range(self.config.encoder_layers):
            block = f"encoder.block{i}"
            normed = self._norm(f"{block}.ln1", x)
            x = x + self._attention(f"{block}.attn", normed, normed)
            x = x + self._ffn(f"{block}.ffn", self._norm(f"{block}.ln2", x))
            x = self.adaptor_forward(f"encoder.adaptor{i}", x)
        return self._norm("encoder.final_norm", x)

    def resampler_forward(self, token_grids: Sequence[Tensor]) -> Tensor:
        """Compress a variable expert-token set to exactly `latents` tokens."""
        variant = self.config.resampler_variant
        if variant == "none":
            raise ContractError("no resampler in rgb-only mode")
        grids = list(token_grids)
        if not grids:
            raise ContractError("resampler needs at least one expert token "
                                "grid (use rgb-only mode instead)")
        tokens = T.concat(grids, axis=0) if len(grids) > 1 else grids[0]
        latent_count = self.config.resampler_latents
        if variant == "random-sampling":
            pool = tokens.shape[0]
            rng = seeded_rng("resampler-sample", self.seed, pool, latent_count)
            replace = pool < latent_count
            chosen = np.sort(rng.choice(pool, size=latent_count, replace=replace))
            return tokens[chosen]
        latents = self._p("resampler.latents")
        for j in range(self.config.resampler_layers):
            block = f"resampler.block{j}"
            keys_values = self._norm(f"{block}.lnkv",
                                     T.concat([tokens, latents], axis=0))
            queries = self._norm(f"{block}.lnq", latents)
            latents = latents + self._attention(f"{block}.attn", queries,
                                                keys_values)
            latents = latents + self._ffn(f"{block}.ffn",
                                          self._norm(f"{block}.ln2", latents))
        return self._norm("resampler.final_norm", latents)

    def encoder_forward(self, rgb: np.ndarray,
                        expert_maps: Sequence[ExpertLabelMap] = ()) -> Tensor:
        """Fused feature sequence z, (rgb tokens [+ latents], width)."""
        rgb = np.asarray(rgb)
        size = self.config.image_size
        if rgb.shape != (size, size, 3):
            raise ConfigError(f"expected rgb of shape ({size}, {size}, 3), "
                              f"got {rgb.shape}")
        kinds = tuple(m.kind for m in expert_maps)
        if kinds != self.config.expert_kinds:
            raise ConfigError(f"expert maps {kinds} do not match configured "
                              f"kinds {self.config.expert_kinds}")
        features = self._encoder_blocks(self.stem_forward(rgb, "rgb"))
        if self.config.mode == "rgb-only":
            return features
        grids = [self.stem_forward(m, m.kind) for m in expert_maps]
        return T.concat([features, self.resampler_forward(grids)], axis=0)

    # -- decoder ---------------------------------------------------------

    def decoder_forward(self, z: Tensor, ids: np.ndarray) -> Tensor:
        """Logits (T, vocab); row t sees tokens at positions <= t plus z."""
        ids = np.asarray(ids, dtype=np.int64)
        length = len(ids)
        if length == 0:
            raise ContractError("decoder needs at least one input token")
        if length > self.config.max_seq_len:
            raise ValueError(f"sequence length {length} exceeds maximum "
                             f"{self.config.max_seq_len}")
        x = T.embedding(self._p("token_embedding"), ids)
        x = x + self._p("pos.decoder")[:length]
        causal = np.triu(np.full((length, length), NEG_INF), k=1)
        for i in range(self.config.decoder_layers):
            block = f"decoder.block{i}"
            normed = self._norm(f"{block}.ln1", x)
            x = x + self._attention(f"{block}.self_attn", normed, normed,
                                    mask=causal)
            x = x + self._attention(f"{block}.cross_attn",
                                    self._norm(f"{block}.lnc", x), z)
            x = x + self._ffn(f"{block}.ffn", self._norm(f"{block}.ln2", x))
            x = self.adaptor_forward(f"decoder.adaptor{i}", x)
        x = self._norm("decoder.final_norm", x)
        return self._linear("lm_head", x)

    def prefix_lm_loss(self, z: Tensor, seq: TokenSequence) -> Tensor:
        """Mean next-token loss over the completion part of the sequence."""
        length = len(seq)
        if seq.prefix_len >= length:
            raise ContractError(f"prefix length {seq.prefix_len} leaves no "
                                f"tokens to predict (T={length})")
        inputs = np.concatenate([[BOS], seq.ids[:-1]])
        logits = self.decoder_forward(z, inputs)
        mask = np.arange(length) >= seq.prefix_len
        return T.cross_entropy(logits, seq.ids, mask)


def load_model(checkpoint_dir) -> FusionModel:
    """Rebuild a model from a checkpoint directory."""
    from .params import load_checkpoint

    fields, values, flags = load_checkpoint(checkpoint_dir)
    config = ModelConfig.from_manifest_fields(fields)
    model = FusionModel(config, seed=0)
    for name, value in values.items():
        if name not in model.store:
            raise ConfigError(f"checkpoint parameter {name!r} not in model")
        if model.store[name].shape != value.shape:
            raise ConfigError(f"checkpoint shape {value.shape} != model shape "
                              f"{model.store[name].shape} for {name}")
        model.store[name].data = value
    missing = set(model.store.names()) - set(values)
    if missing:
        raise ConfigError(f"checkpoint missing parameters: {sorted(missing)[:3]}")
    for name, frozen in flags.items():
        model.store[name].requires_grad = not frozen
    return model
