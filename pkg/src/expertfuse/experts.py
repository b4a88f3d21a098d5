"""Stand-in task experts: scene-grounded label maps plus post-processing.

Low-level kinds (depth, normal, edge) are full-resolution grids
re-normalized to [-1, 1]. High-level kinds (segmentation,
object-detection, ocr-detection) are quarter-resolution id maps tiled
with semantic embeddings and compressed to 64 channels with PCA; the
per-pixel instance ids ride along so the trainable instance embeddings
can be added inside the model graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError
from .io import seeded_rng
from .pca import PcaProjection, pca_fit, pca_project
from .scene import (BACKGROUND_CLASS, INSTANCE_SLOTS, SHAPE_CLASS,
                    TEXT_CLASS_BASE, TEXT_WORDS, SceneSpec, class_buffer,
                    depth_buffer, edge_buffer, instance_buffer, normal_buffer)

HIGH_LEVEL_CHANNELS = 64
HIGH_LEVEL_SCALE = 4
EMBED_DIM = 256

LOW_LEVEL_KINDS = ("depth", "normal", "edge")
HIGH_LEVEL_KINDS = ("segmentation", "object-detection", "ocr-detection")
EXPERT_ORDER = ("depth", "segmentation", "object-detection", "normal",
                "edge", "ocr-detection")

# channel count per kind; "noise" is the scene-free control expert
KIND_CHANNELS = {"depth": 1, "normal": 3, "edge": 1, "noise": 1}
KIND_CHANNELS.update({k: HIGH_LEVEL_CHANNELS for k in HIGH_LEVEL_KINDS})


def is_high_level(kind: str) -> bool:
    return kind in HIGH_LEVEL_KINDS


@dataclass
class ExpertLabelMap:
    kind: str
    grid: np.ndarray                       # (H', W', C)
    instance_ids: Optional[np.ndarray] = None  # (H', W') ints, -1 = none

    def validate(self):
        if self.grid.ndim != 3:
            raise ValueError(f"grid must be 3-D, got shape {self.grid.shape}")
        channels = KIND_CHANNELS.get(self.kind)
        if channels is None:
            raise ConfigError(f"unknown expert kind {self.kind!r}")
        if self.grid.shape[2] != channels:
            raise ValueError(
                f"{self.kind} expects {channels} channels, got {self.grid.shape[2]}")
        if not is_high_level(self.kind):
            if self.grid.min() < -1.0 - 1e-12 or self.grid.max() > 1.0 + 1e-12:
                raise ValueError(f"{self.kind} values outside [-1, 1]")


class SemanticEmbeddingTable:
    """Deterministic unit embeddings standing in for a text encoder."""

    def __init__(self, dim: int = EMBED_DIM, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._cache = {}

    def vector(self, class_id: int) -> np.ndarray:
        key = int(class_id)
        if key not in self._cache:
            rng = seeded_rng("semantic-embedding", self.seed, key)
            v = rng.standard_normal(self.dim)
            self._cache[key] = v / np.linalg.norm(v)
        return self._cache[key]

    def universe(self):
        """Every class id the synthetic world can produce."""
        ids = [BACKGROUND_CLASS] + sorted(SHAPE_CLASS.values())
        ids += [TEXT_CLASS_BASE + i for i in range(len(TEXT_WORDS))]
        return ids


def fit_semantic_pca(table: SemanticEmbeddingTable,
                     d: int = HIGH_LEVEL_CHANNELS) -> PcaProjection:
    samples = np.stack([table.vector(i) for i in table.universe()])
    return pca_fit(samples, d=d)


@dataclass
class ExpertPipeline:
    """Shared tables for one dataset: embeddings plus their PCA basis."""

    table: SemanticEmbeddingTable
    projection: PcaProjection

    @classmethod
    def create(cls, seed: int = 0, dim: int = EMBED_DIM) -> "ExpertPipeline":
        table = SemanticEmbeddingTable(dim=dim, seed=seed)
        return cls(table=table, projection=fit_semantic_pca(table))


def renormalize(grid: np.ndarray) -> np.ndarray:
    """Min-max rescale to [-1, 1]; a constant grid maps to all zeros."""
    lo, hi = grid.min(), grid.max()
    if hi == lo:
        return np.zeros_like(grid)
    return 2.0 * (grid - lo) / (hi - lo) - 1.0


def _downsample(grid: np.ndarray) -> np.ndarray:
    return grid[::HIGH_LEVEL_SCALE, ::HIGH_LEVEL_SCALE]


def _embed_id_map(ids: np.ndarray, pipeline: ExpertPipeline) -> np.ndarray:
    out = np.empty(ids.shape + (pipeline.projection.output_dim,))
    for class_id in np.unique(ids):
        emb = pca_project(pipeline.projection,
                          pipeline.table.vector(int(class_id)))
        out[ids == class_id] = emb
    return out


def render_expert_label(scene: SceneSpec, kind: str,
                        pipeline: Optional[ExpertPipeline] = None) -> ExpertLabelMap:
    """Render one expert's post-processed label map for a scene."""
    if kind == "depth":
        grid = renormalize(depth_buffer(scene))[:, :, None]
        return ExpertLabelMap(kind, grid)
    if kind == "normal":
        grid = renormalize(normal_buffer(scene))
        return ExpertLabelMap(kind, grid)
    if kind == "edge":
        grid = renormalize(edge_buffer(scene))[:, :, None]
        return ExpertLabelMap(kind, grid)
    if kind in HIGH_LEVEL_KINDS:
        if pipeline is None:
            raise ContractError(f"{kind} rendering needs an ExpertPipeline")
        boxes = kind == "object-detection"
        if kind == "ocr-detection":
            ids = np.full((scene.height, scene.width), BACKGROUND_CLASS,
                          dtype=np.int64)
            if scene.text_item is not None:
                word, (y0, x0, y1, x1) = scene.text_item
                ids[y0:y1, x0:x1] = TEXT_CLASS_BASE + TEXT_WORDS.index(word)
            instances = None
        else:
            ids = class_buffer(scene, boxes=boxes)
            instances = _downsample(instance_buffer(scene, boxes=boxes))
        grid = _embed_id_map(_downsample(ids), pipeline)
        return ExpertLabelMap(kind, grid, instance_ids=instances)
    raise ConfigError(f"unsupported expert kind {kind!r}")


def corrupt_uniform(label: ExpertLabelMap, fraction: float,
                    seed: int) -> ExpertLabelMap:
    """Replace exactly round(p * sites) pixel sites with Uniform(-1, 1).

    Site selection is without replacement and seeded; untouched sites are
    bit-identical to the input.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"corruption fraction {fraction} outside [0, 1]")
    grid = label.grid.copy()
    height, width, channels = grid.shape
    sites = int(round(fraction * height * width))
    if sites:
        rng = seeded_rng("corrupt", seed, label.kind, height, width)
        chosen = rng.choice(height * width, size=sites, replace=False)
        values = rng.uniform(-1.0, 1.0, size=(sites, channels))
        flat = grid.reshape(height * width, channels)
        flat[chosen] = values
    ids = None if label.instance_ids is None else label.instance_ids.copy()
    return ExpertLabelMap(label.kind, grid, instance_ids=ids)


def make_noise_expert(height: int, width: int, channels: int,
                      seed: int) -> ExpertLabelMap:
    """Pure Uniform(-1, 1) map with no scene dependence."""
    rng = seeded_rng("noise-expert", seed, height, width, channels)
    grid = rng.uniform(-1.0, 1.0, size=(height, width, channels))
    return ExpertLabelMap("noise", grid)
