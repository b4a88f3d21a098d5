"""Named parameter registry with freeze policies and checkpoint io.

Every parameter belongs to a component group; a freeze policy maps groups
to frozen/trainable. Initial values are a pure function of (seed, name),
so two models sharing a submodule get identical values there regardless
of what else they instantiate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError
from .io import read_keyvalues, read_pten, seeded_rng, write_keyvalues, write_pten
from .tensor import Tensor

BACKBONE_GROUPS = ("vision_backbone", "language_backbone", "token_embedding")
TRAINABLE_GROUPS = ("stem", "pos_embed", "adaptor", "resampler",
                    "cross_attention", "instance_table", "lm_head")
ALL_GROUPS = BACKBONE_GROUPS + TRAINABLE_GROUPS

# policy -> backbone groups that stay frozen ("freeze-vision" is the
# fine-tuning alias of "freeze-vision-only")
FREEZE_POLICIES = {
    "freeze-vision-and-language": ("vision_backbone", "language_backbone",
                                   "token_embedding"),
    "freeze-vision-only": ("vision_backbone",),
    "freeze-vision": ("vision_backbone",),
    "freeze-language-only": ("language_backbone", "token_embedding"),
    "all-trainable": (),
}

DEFAULT_POLICY = "freeze-vision-and-language"


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple
    group: str
    init: str   # linear | embedding | zeros | ones | conv


def init_value(spec: ParamSpec, seed: int) -> np.ndarray:
    rng = seeded_rng("param", seed, spec.name)
    if spec.init == "zeros":
        return np.zeros(spec.shape)
    if spec.init == "ones":
        return np.ones(spec.shape)
    if spec.init == "linear":
        # fan-in scaling keeps activations comparable across widths
        return rng.normal(0.0, math.sqrt(1.0 / spec.shape[0]), size=spec.shape)
    if spec.init == "embedding":
        return rng.normal(0.0, math.sqrt(1.0 / spec.shape[-1]), size=spec.shape)
    if spec.init == "conv":
        fan_in = 9 * spec.shape[2]
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=spec.shape)
    raise ConfigError(f"unknown init kind {spec.init!r}")


def decay_exempt(name: str) -> bool:
    """Biases and normalization gains skip weight decay."""
    return name.endswith(".b") or name.endswith(".bias") or name.endswith(".gain")


class ParameterStore:
    def __init__(self):
        self._tensors: dict = {}
        self._groups: dict = {}
        self._sealed = False
        self.opt_state: dict = {}
        self.step_count = 0

    def add(self, spec: ParamSpec, seed: int) -> Tensor:
        if self._sealed:
            raise ContractError("parameter store is sealed")
        if spec.name in self._tensors:
            raise ContractError(f"duplicate parameter name {spec.name!r}")
        if spec.group not in ALL_GROUPS:
            raise ConfigError(f"unknown parameter group {spec.group!r}")
        tensor = Tensor(init_value(spec, seed), requires_grad=True)
        self._tensors[spec.name] = tensor
        self._groups[spec.name] = spec.group
        return tensor

    def seal(self):
        self._sealed = True

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self):
        return list(self._tensors)

    def group(self, name: str) -> str:
        return self._groups[name]

    def trainable_names(self):
        return [n for n, t in self._tensors.items() if t.requires_grad]

    def frozen_names(self):
        return [n for n, t in self._tensors.items() if not t.requires_grad]

    def zero_grads(self):
        for tensor in self._tensors.values():
            tensor.grad = None

    def parameter_count(self, names=None) -> int:
        names = self.names() if names is None else names
        return sum(self._tensors[n].size for n in names)


def partition_parameters(store: ParameterStore, policy: str):
    """Apply a freeze policy; returns (trainable names, frozen names).

    Backbone groups freeze per policy; stems, positional embeddings,
    adaptors, the resampler, cross-attention, the instance table, and the
    LM head always train. Optimizer state is created for exactly the
    trainable set.
    """
    if policy not in FREEZE_POLICIES:
        raise ConfigError(f"unknown freeze policy {policy!r}; "
                          f"expected one of {sorted(FREEZE_POLICIES)}")
    frozen_groups = set(FREEZE_POLICIES[policy])
    for name in store.names():
        tensor = store[name]
        frozen = store.group(name) in frozen_groups
        tensor.requires_grad = not frozen
        if frozen:
            store.opt_state.pop(name, None)
            tensor.grad = None
        elif name not in store.opt_state:
            store.opt_state[name] = {
                "m": np.zeros(tensor.shape),
                "v": np.zeros(tensor.shape),
            }
    return store.trainable_names(), store.frozen_names()


def adamw_step(store: ParameterStore, grads: dict, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.05):
    """One decoupled-weight-decay update over the trainable set.

    ``grads`` must hold an array for every trainable parameter and none
    for frozen ones (a gradient on a frozen parameter means the freeze
    leaked somewhere upstream).
    """
    trainable = store.trainable_names()
    missing = [n for n in trainable if n not in grads]
    if missing:
        raise ContractError(f"missing gradients for {missing[:3]}...")
    leaked = [n for n in grads if n not in store.opt_state]
    if leaked:
        raise ContractError(f"gradient supplied for frozen parameter {leaked[:3]}")
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name in trainable:
        tensor = store[name]
        grad = np.asarray(grads[name], dtype=np.float64)
        if grad.shape != tensor.shape:
            raise ContractError(f"gradient shape {grad.shape} != parameter "
                                f"shape {tensor.shape} for {name}")
        state = store.opt_state[name]
        state["m"] = beta1 * state["m"] + (1.0 - beta1) * grad
        state["v"] = beta2 * state["v"] + (1.0 - beta2) * grad * grad
        update = (state["m"] / bc1) / (np.sqrt(state["v"] / bc2) + eps)
        if weight_decay and not decay_exempt(name):
            update = update + weight_decay * tensor.data
        tensor.data = tensor.data - lr * update


def save_checkpoint(directory, config_fields: dict, store: ParameterStore):
    """Manifest plus one PTEN file per parameter, in registry order."""
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    manifest = dict(config_fields)
    for name in store.names():
        flag = "frozen" if not store[name].requires_grad else "trainable"
        manifest[f"param.{name}"] = flag
        write_pten(directory / "params" / f"{name}.pten", store[name].data)
    write_keyvalues(directory / "manifest.txt", manifest)


def load_checkpoint(directory):
    """Returns (config fields, name -> array, name -> frozen flag)."""
    directory = Path(directory)
    manifest = read_keyvalues(directory / "manifest.txt")
    config_fields = {}
    flags = {}
    values = {}
    for key, value in manifest.items():
        if key.startswith("param."):
            name = key[len("param."):]
            flags[name] = value == "frozen"
            values[name] = read_pten(directory / "params" / f"{name}.pten")
        else:
            config_fields[key] = value
    return config_fields, values, flags
