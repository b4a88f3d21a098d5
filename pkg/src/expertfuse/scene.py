"""Synthetic scenes: geometric objects with color, depth, and optional text.

A scene is the single source of truth from which the RGB image, every
stand-in expert label, the caption, and the QA pairs are rendered, so all
supervision is consistent by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .io import seeded_rng

SHAPES = ("square", "circle", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow")
COLOR_RGB = {
    "red": (1.0, 0.1, 0.1),
    "green": (0.1, 0.9, 0.1),
    "blue": (0.1, 0.2, 1.0),
    "yellow": (1.0, 0.9, 0.1),
}
BACKGROUND_RGB = (0.5, 0.5, 0.5)
TEXT_WORDS = ("hello", "world", "stop", "go", "cat", "dog")

# semantic class ids used by the high-level expert renderers
BACKGROUND_CLASS = 0
SHAPE_CLASS = {name: i + 1 for i, name in enumerate(SHAPES)}
TEXT_CLASS_BASE = 100  # text word w maps to class TEXT_CLASS_BASE + index(w)

INSTANCE_SLOTS = 128


@dataclass
class SceneObject:
    shape: str
    color: str
    class_id: int
    instance_id: int
    depth: float                      # in (0, 1), smaller is nearer
    region: tuple                     # (y0, x0, y1, x1), exclusive upper bounds


@dataclass
class SceneSpec:
    height: int
    width: int
    objects: list
    background_class: int
    seed: int
    text_item: Optional[tuple] = None   # (word, (y0, x0, y1, x1))
    difficulty: int = 0

    def validate(self):
        ids = [o.instance_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate instance ids in scene {self.seed}")
        depths = sorted(o.depth for o in self.objects)
        for lo, hi in zip(depths, depths[1:]):
            if hi <= lo:
                raise ValueError(f"depths not strictly ordered in scene {self.seed}")
        for o in self.objects:
            y0, x0, y1, x1 = o.region
            if not (0 <= y0 < y1 <= self.height and 0 <= x0 < x1 <= self.width):
                raise ValueError(f"region {o.region} outside canvas")


def generate_scene(seed: int, difficulty: int = 1, height: int = 64,
                   width: int = 64) -> SceneSpec:
    """Deterministic scene for (seed, difficulty, canvas size).

    difficulty 0 always yields exactly one object; difficulty d yields
    1..d+1 objects with pairwise-distinct shapes and colors, so every
    templated question has one unambiguous answer.
    """
    rng = seeded_rng("scene", seed, difficulty, height, width)
    count = 1 + int(rng.integers(0, difficulty + 1))
    count = min(count, len(SHAPES), len(COLORS))
    shapes = list(rng.choice(len(SHAPES), size=count, replace=False))
    colors = list(rng.choice(len(COLORS), size=count, replace=False))
    instance_ids = list(rng.choice(INSTANCE_SLOTS, size=count, replace=False))

    # single objects are large so their color/class dominates pooled
    # features; crowded scenes shrink everything to fit
    if count == 1:
        lo, hi = height * 5 // 10, height * 7 // 10
    else:
        lo, hi = height * 3 // 10, height * 9 // 20
    objects = []
    for i in range(count):
        side = int(rng.integers(max(6, lo), max(7, hi + 1)))
        y0 = int(rng.integers(0, height - side + 1))
        x0 = int(rng.integers(0, width - side + 1))
        depth = (i + 1.0) / (count + 1.0) + float(rng.uniform(-0.3, 0.3)) / (count + 1.0)
        shape = SHAPES[shapes[i]]
        objects.append(SceneObject(
            shape=shape,
            color=COLORS[colors[i]],
            class_id=SHAPE_CLASS[shape],
            instance_id=int(instance_ids[i]),
            depth=depth,
            region=(y0, x0, y0 + side, x0 + side),
        ))

    text_item = None
    if difficulty >= 2 and rng.random() < 0.5:
        word = TEXT_WORDS[int(rng.integers(0, len(TEXT_WORDS)))]
        band = max(4, height // 8)
        x0 = int(rng.integers(0, width // 2))
        text_item = (word, (0, x0, band, min(width, x0 + width // 2)))

    spec = SceneSpec(height=height, width=width, objects=objects,
                     background_class=BACKGROUND_CLASS, seed=seed,
                     text_item=text_item, difficulty=difficulty)
    spec.validate()
    return spec


def object_mask(scene: SceneSpec, obj: SceneObject) -> np.ndarray:
    """Boolean (H, W) rasterization of one object's shape."""
    y0, x0, y1, x1 = obj.region
    ys, xs = np.mgrid[0:scene.height, 0:scene.width]
    cy, cx = (y0 + y1 - 1) / 2.0, (x0 + x1 - 1) / 2.0
    ry, rx = (y1 - y0) / 2.0, (x1 - x0) / 2.0
    inside_box = (ys >= y0) & (ys < y1) & (xs >= x0) & (xs < x1)
    if obj.shape == "square":
        return inside_box
    if obj.shape == "circle":
        return ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0
    if obj.shape == "triangle":
        # upward triangle: apex at the top of the box
        t = np.clip((ys - y0) / max(y1 - y0 - 1, 1), 0.0, 1.0)
        half_width = t * rx
        return inside_box & (np.abs(xs - cx) <= half_width)
    if obj.shape == "cross":
        arm_y = np.abs(ys - cy) <= max(1.0, ry / 3.0)
        arm_x = np.abs(xs - cx) <= max(1.0, rx / 3.0)
        return inside_box & (arm_y | arm_x)
    raise ValueError(f"unknown shape {obj.shape!r}")


def _painters_order(scene: SceneSpec):
    """Objects sorted far to near so nearer objects overwrite."""
    return sorted(scene.objects, key=lambda o: -o.depth)


def render_rgb(scene: SceneSpec) -> np.ndarray:
    """(H, W, 3) float image in [0, 1], flat shading, nearest object wins."""
    image = np.empty((scene.height, scene.width, 3))
    image[:] = BACKGROUND_RGB
    for obj in _painters_order(scene):
        image[object_mask(scene, obj)] = COLOR_RGB[obj.color]
    if scene.text_item is not None:
        word, (y0, x0, y1, x1) = scene.text_item
        stripe = seeded_rng("text-pixels", scene.seed, word)
        block = image[y0:y1, x0:x1]
        # checkered monochrome texture stands in for glyphs
        pattern = stripe.random(block.shape[:2]) < 0.5
        block[pattern] = (0.05, 0.05, 0.05)
        block[~pattern] = (0.95, 0.95, 0.95)
    return image


def depth_buffer(scene: SceneSpec) -> np.ndarray:
    """(H, W) depth with background at 1.0 and nearer objects smaller."""
    depth = np.ones((scene.height, scene.width))
    for obj in _painters_order(scene):
        depth[object_mask(scene, obj)] = obj.depth
    return depth


def instance_buffer(scene: SceneSpec, boxes: bool = False) -> np.ndarray:
    """(H, W) int map of instance ids, -1 for background.

    ``boxes=True`` fills each object's full bounding region (the
    detection-style footprint); otherwise the shape mask is used.
    Overlaps resolve to the nearer object.
    """
    grid = np.full((scene.height, scene.width), -1, dtype=np.int64)
    for obj in _painters_order(scene):
        if boxes:
            y0, x0, y1, x1 = obj.region
            grid[y0:y1, x0:x1] = obj.instance_id
        else:
            grid[object_mask(scene, obj)] = obj.instance_id
    return grid


def class_buffer(scene: SceneSpec, boxes: bool = False) -> np.ndarray:
    """(H, W) int map of semantic class ids with background class elsewhere."""
    grid = np.full((scene.height, scene.width), scene.background_class,
                   dtype=np.int64)
    for obj in _painters_order(scene):
        if boxes:
            y0, x0, y1, x1 = obj.region
            grid[y0:y1, x0:x1] = obj.class_id
        else:
            grid[object_mask(scene, obj)] = obj.class_id
    return grid


def normal_buffer(scene: SceneSpec) -> np.ndarray:
    """(H, W, 3) pseudo surface normals; background faces the camera."""
    normals = np.zeros((scene.height, scene.width, 3))
    normals[:, :, 2] = 1.0
    for obj in _painters_order(scene):
        y0, x0, y1, x1 = obj.region
        cy, cx = (y0 + y1) / 2.0, (x0 + x1) / 2.0
        tilt = np.array([
            (cx - scene.width / 2.0) / (scene.width / 2.0),
            (cy - scene.height / 2.0) / (scene.height / 2.0),
            1.5,
        ])
        normals[object_mask(scene, obj)] = tilt / np.linalg.norm(tilt)
    return normals


def edge_buffer(scene: SceneSpec) -> np.ndarray:
    """(H, W) binary boundary map, 1 where the instance label changes."""
    labels = instance_buffer(scene)
    edges = np.zeros((scene.height, scene.width), dtype=bool)
    edges[:-1, :] |= labels[:-1, :] != labels[1:, :]
    edges[1:, :] |= labels[1:, :] != labels[:-1, :]
    edges[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    edges[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    return edges.astype(np.float64)
