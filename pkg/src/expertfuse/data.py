"""Dataset building and loading.

One directory per dataset: a key=value manifest plus one subdirectory per
scene holding PTEN tensors (RGB grid, expert grids with instance-id
sidecars, caption tokens, QA questions/options/answer indices). Rebuilding
with the same manifest seeds reproduces every byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import ConfigError, ContractError
from .experts import (ExpertLabelMap, ExpertPipeline, corrupt_uniform,
                      is_high_level, make_noise_expert, render_expert_label)
from .io import read_keyvalues, read_pten, seeded_rng, write_keyvalues, write_pten
from .model import ModelConfig
from .scene import generate_scene, render_rgb
from .text import CAPTION_PROMPT, DEFAULT_VOCAB, EOS, TokenSequence, build_caption_and_qa
from .train import TrainExample

OPTIONS_PER_QUESTION = 4


@dataclass
class QaItem:
    question: np.ndarray
    options: list               # OPTIONS_PER_QUESTION token arrays
    answer_index: int


@dataclass
class SceneRecord:
    index: int
    rgb: np.ndarray
    expert_maps: dict            # kind -> ExpertLabelMap
    caption: np.ndarray
    qa: list                     # QaItem


@dataclass
class Dataset:
    manifest: dict
    records: list

    @property
    def image_size(self) -> int:
        return int(self.manifest["image_size"])

    @property
    def expert_kinds(self) -> tuple:
        raw = self.manifest.get("experts", "")
        return tuple(k for k in raw.split(",") if k)


def _scene_seed(seed: int, index: int) -> int:
    return seed * 1_000_003 + index


def build_dataset(out_dir, n: int, difficulty: int, expert_kinds,
                  image_size: int = 64, seed: int = 0,
                  corrupt_kind: Optional[str] = None,
                  corrupt_fraction: float = 0.0) -> dict:
    """Render n scenes with their expert labels and supervision to disk."""
    if n < 1:
        raise ConfigError(f"dataset needs at least one scene, got n={n}")
    expert_kinds = tuple(expert_kinds)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pipeline = ExpertPipeline.create(seed=seed)

    for index in range(n):
        scene = generate_scene(_scene_seed(seed, index), difficulty,
                               height=image_size, width=image_size)
        record_dir = out_dir / f"scene_{index:05d}"
        record_dir.mkdir(exist_ok=True)
        write_pten(record_dir / "rgb.pten", render_rgb(scene))

        for kind in expert_kinds:
            label = render_expert_label(scene, kind, pipeline)
            if kind == corrupt_kind and corrupt_fraction > 0.0:
                label = corrupt_uniform(label, corrupt_fraction,
                                        seed=_scene_seed(seed, index))
            write_pten(record_dir / f"{kind}.pten", label.grid)
            if label.instance_ids is not None:
                write_pten(record_dir / f"{kind}_ids.pten",
                           label.instance_ids.astype(np.float64))

        caption, qa = build_caption_and_qa(scene)
        write_pten(record_dir / "caption.pten", caption.astype(np.float64))
        for j, (question, answer, distractors) in enumerate(qa):
            rng = seeded_rng("qa-shuffle", seed, index, j)
            options = [answer] + distractors
            order = rng.permutation(len(options))
            shuffled = [options[k] for k in order]
            answer_index = int(np.argwhere(order == 0)[0, 0])
            width = max(len(o) for o in shuffled)
            padded = np.full((OPTIONS_PER_QUESTION, width), -1.0)
            for k, option in enumerate(shuffled):
                padded[k, : len(option)] = option
            write_pten(record_dir / f"qa_{j:02d}_question.pten",
                       question.astype(np.float64))
            write_pten(record_dir / f"qa_{j:02d}_options.pten", padded)
            write_pten(record_dir / f"qa_{j:02d}_answer.pten",
                       np.array([answer_index], dtype=np.float64))

    manifest = {
        "n": n,
        "seed": seed,
        "difficulty": difficulty,
        "image_size": image_size,
        "experts": ",".join(expert_kinds),
        "corrupt_kind": corrupt_kind or "",
        "corrupt_fraction": corrupt_fraction,
    }
    write_keyvalues(out_dir / "manifest.txt", manifest)
    return manifest


def _load_options(path) -> list:
    padded = read_pten(path)
    options = []
    for row in padded:
        options.append(row[row >= 0].astype(np.int64))
    return options


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = read_keyvalues(directory / "manifest.txt")
    kinds = tuple(k for k in manifest.get("experts", "").split(",") if k)
    records = []
    for index in range(int(manifest["n"])):
        record_dir = directory / f"scene_{index:05d}"
        maps = {}
        for kind in kinds:
            grid = read_pten(record_dir / f"{kind}.pten")
            ids_path = record_dir / f"{kind}_ids.pten"
            ids = (read_pten(ids_path).astype(np.int64)
                   if ids_path.exists() else None)
            maps[kind] = ExpertLabelMap(kind, grid, instance_ids=ids)
        qa = []
        for j in range(100):
            q_path = record_dir / f"qa_{j:02d}_question.pten"
            if not q_path.exists():
                break
            qa.append(QaItem(
                question=read_pten(q_path).astype(np.int64),
                options=_load_options(record_dir / f"qa_{j:02d}_options.pten"),
                answer_index=int(read_pten(record_dir / f"qa_{j:02d}_answer.pten")[0]),
            ))
        records.append(SceneRecord(
            index=index,
            rgb=read_pten(record_dir / "rgb.pten"),
            expert_maps=maps,
            caption=read_pten(record_dir / "caption.pten").astype(np.int64),
            qa=qa,
        ))
    return Dataset(manifest=manifest, records=records)


def make_examples(dataset: Dataset, config: ModelConfig,
                  corrupt_kind: Optional[str] = None,
                  corrupt_fraction: float = 0.0,
                  view_seed: int = 0,
                  vocab=DEFAULT_VOCAB) -> List[TrainExample]:
    """Assemble model-ready examples for one arm's view of a dataset.

    The view selects the configured expert kinds, applies corruption at
    load time, and synthesizes noise-expert maps on the fly, so arms of a
    plan can share one on-disk dataset byte for byte.
    """
    prompt = vocab.encode(CAPTION_PROMPT)
    examples = []
    for record in dataset.records:
        maps = []
        for kind in config.expert_kinds:
            if kind == "noise":
                size = record.rgb.shape[0]
                maps.append(make_noise_expert(size, size, 1,
                                              seed=_scene_seed(view_seed,
                                                               record.index)))
                continue
            if kind not in record.expert_maps:
                raise ConfigError(f"dataset lacks expert kind {kind!r}")
            label = record.expert_maps[kind]
            if kind == corrupt_kind and corrupt_fraction > 0.0:
                label = corrupt_uniform(label, corrupt_fraction,
                                        seed=_scene_seed(view_seed, record.index))
            maps.append(label)

        sequences = [TokenSequence(
            np.concatenate([prompt, record.caption, [EOS]]),
            prefix_len=len(prompt))]
        for item in record.qa:
            answer = item.options[item.answer_index]
            sequences.append(TokenSequence(
                np.concatenate([item.question, answer, [EOS]]),
                prefix_len=len(item.question)))
        examples.append(TrainExample(
            rgb=record.rgb,
            expert_maps=maps,
            sequences=sequences,
            qa=[(item.question, item.options, item.answer_index)
                for item in record.qa],
            caption_ids=record.caption,
        ))
    return examples
