"""Synthetic oriented-object scenes and sparse-annotation samplers.

A scene is a grid of cells with a feature raster ``(H, W, F)``. The channel
layout is fixed by :class:`RasterLayout`:

* ``C`` evidence channels, one per category. Inside an instance of class
  ``c`` channel ``c`` carries ``detectability[c]`` times a bump that peaks at
  the box center.
* 5 geometry channels holding, inside any object or clutter blob, the
  offset from the cell center to the blob center, log width, log height
  and angle.
* clutter channels. Clutter blobs mimic the evidence of one category and
  also light up clutter channel ``c % n_clutter``, so they are separable only
  up to the noise level (hard negatives).

Zero-mean Gaussian noise is added to every channel of every cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .geometry import HALF_PI, OrientedBox, points_in_box, rotated_iou

N_GEOMETRY = 5


@dataclass(frozen=True)
class CategorySpec:
    id: int
    name: str
    frequency_weight: float = 1.0
    size_range: tuple[float, float] = (2.0, 5.0)
    detectability: float = 1.0

    def __post_init__(self):
        if self.frequency_weight <= 0:
            raise ValueError(f"{self.name}: frequency_weight must be > 0")
        lo, hi = self.size_range
        if not 0 < lo <= hi:
            raise ValueError(f"{self.name}: bad size_range {self.size_range}")
        if not 0 < self.detectability <= 1:
            raise ValueError(f"{self.name}: detectability must be in (0, 1]")


class Annotation(NamedTuple):
    class_id: int
    box: OrientedBox


@dataclass(frozen=True)
class RasterLayout:
    num_classes: int
    num_clutter: int = 2

    @property
    def num_features(self) -> int:
        return self.num_classes + N_GEOMETRY + self.num_clutter

    @property
    def geometry_slice(self) -> slice:
        return slice(self.num_classes, self.num_classes + N_GEOMETRY)

    @property
    def clutter_slice(self) -> slice:
        start = self.num_classes + N_GEOMETRY
        return slice(start, start + self.num_clutter)


@dataclass(eq=False)
class Scene:
    id: int
    grid: tuple[int, int]
    features: np.ndarray
    instances: list[Annotation]
    num_classes: int

    def class_set(self) -> set[int]:
        return {a.class_id for a in self.instances}


@dataclass(frozen=True)
class SparseAnnotations:
    """Subset of a scene's instances that stays labeled.

    ``kept_indices`` index into ``Scene.instances``; ``kept`` holds the same
    objects, so subset checks are by identity.
    """

    scene_id: int
    kept: tuple[Annotation, ...]
    removed_count: int
    kept_indices: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if self.removed_count < 0:
            raise ValueError("removed_count must be >= 0")

    @property
    def is_unlabeled(self) -> bool:
        return not self.kept

    def class_set(self) -> set[int]:
        return {a.class_id for a in self.kept}


def cell_centers(grid: tuple[int, int]) -> np.ndarray:
    """(H, W, 2) array of ``(x, y)`` cell-center coordinates."""
    h, w = grid
    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    return np.stack([xs, ys], axis=-1)


def _bump(centers: np.ndarray, box: OrientedBox) -> np.ndarray:
    c, s = math.cos(box.theta), math.sin(box.theta)
    x = centers[..., 0] - box.cx
    y = centers[..., 1] - box.cy
    u = (c * x + s * y) / (0.5 * box.w)
    v = (-s * x + c * y) / (0.5 * box.h)
    return np.exp(-(u * u + v * v))


def _sample_box(rng: np.random.Generator, spec: CategorySpec, grid: tuple[int, int]) -> OrientedBox:
    h, w = grid
    lo, hi = spec.size_range
    long_side = rng.uniform(lo, hi)
    short_side = long_side * rng.uniform(0.4, 1.0)
    theta = rng.uniform(-HALF_PI, HALF_PI)
    cx = rng.uniform(0.0, w)
    cy = rng.uniform(0.0, h)
    return OrientedBox(cx, cy, long_side, max(short_side, 1.0), theta)


def _place(rng, spec, grid, placed, max_overlap, attempts=30):
    for _ in range(attempts):
        box = _sample_box(rng, spec, grid)
        if all(rotated_iou(box, other) <= max_overlap for other in placed):
            return box
    return None


def generate_scene(
    specs: Sequence[CategorySpec],
    scene_id: int,
    grid: tuple[int, int],
    density: float,
    seed: int,
    *,
    clutter_density: float = 0.0,
    clutter_strength: float = 0.8,
    clutter_signal: float = 0.5,
    noise: float = 0.15,
    geometry_noise: float = 0.1,
    num_clutter: int = 2,
    max_overlap: float = 0.05,
    classes_per_scene: int | None = None,
) -> Scene:
    """Draw one scene. Randomness comes only from ``(seed, scene_id)``.

    With ``classes_per_scene`` set, the scene first draws that many distinct
    categories (frequency-weighted) and its objects use only those; clutter
    then mimics the categories the scene does not contain.
    """
    rng = np.random.default_rng((seed, scene_id))
    C = len(specs)
    layout = RasterLayout(C, num_clutter)
    weights = np.array([s.frequency_weight for s in specs], dtype=float)
    weights /= weights.sum()
    obj_w = clutter_w = weights
    if classes_per_scene is not None:
        if not 1 <= classes_per_scene <= C:
            raise ValueError(f"classes_per_scene must be in [1, {C}]")
        theme = rng.choice(C, size=classes_per_scene, replace=False, p=weights)
        in_theme = np.isin(np.arange(C), theme)
        obj_w = np.where(in_theme, weights, 0.0)
        obj_w /= obj_w.sum()
        if classes_per_scene < C:
            clutter_w = np.where(in_theme, 0.0, weights)
            clutter_w /= clutter_w.sum()

    n_obj = rng.poisson(density)
    classes = rng.choice(C, size=n_obj, p=obj_w) if n_obj else np.zeros(0, dtype=int)
    n_clutter = rng.poisson(clutter_density) if clutter_density > 0 else 0
    clutter_classes = rng.choice(C, size=n_clutter, p=clutter_w) if n_clutter else []

    instances: list[Annotation] = []
    placed: list[OrientedBox] = []
    for c in classes:
        box = _place(rng, specs[c], grid, placed, max_overlap)
        if box is not None:
            instances.append(Annotation(int(c), box))
            placed.append(box)
    blobs: list[tuple[int, OrientedBox]] = []
    for c in clutter_classes:
        box = _place(rng, specs[c], grid, placed, max_overlap)
        if box is not None:
            blobs.append((int(c), box))
            placed.append(box)

    H, W = grid
    centers = cell_centers(grid)
    feats = np.zeros((H, W, layout.num_features))
    owner_area = np.full((H, W), np.inf)
    geo = layout.geometry_slice

    def paint_geometry(box):
        inside = points_in_box(centers, box) & (box.area < owner_area)
        owner_area[inside] = box.area
        g = feats[..., geo]
        g[inside, 0] = box.cx - centers[inside, 0]
        g[inside, 1] = box.cy - centers[inside, 1]
        g[inside, 2] = math.log(box.w)
        g[inside, 3] = math.log(box.h)
        g[inside, 4] = box.theta
        feats[..., geo] = g

    for ann in instances:
        feats[..., ann.class_id] += specs[ann.class_id].detectability * _bump(centers, ann.box)
        paint_geometry(ann.box)
    for c, box in blobs:
        bump = _bump(centers, box)
        feats[..., c] += clutter_strength * specs[c].detectability * bump
        feats[..., layout.clutter_slice.start + c % num_clutter] += clutter_signal * bump
        paint_geometry(box)

    feats += rng.normal(0.0, noise, size=feats.shape)
    feats[..., geo] += rng.normal(0.0, geometry_noise, size=(H, W, N_GEOMETRY))
    return Scene(scene_id, (H, W), feats, instances, C)


def generate_corpus(
    specs: Sequence[CategorySpec],
    n_scenes: int,
    density: float,
    seed: int,
    grid: tuple[int, int] = (32, 32),
    first_id: int = 0,
    **scene_kwargs,
) -> list[Scene]:
    """Generate ``n_scenes`` independent scenes.

    Args:
        specs: categories with dense ids ``0..C-1``.
        n_scenes: number of scenes, > 0.
        density: expected number of instances per scene (Poisson mean).
        seed: root seed; scene ``i`` draws from ``(seed, first_id + i)``.
        grid: ``(H, W)`` in cells.
        **scene_kwargs: forwarded to :func:`generate_scene`.
    """
    if not specs:
        raise ValueError("at least one CategorySpec is required")
    if sorted(s.id for s in specs) != list(range(len(specs))):
        raise ValueError("category ids must be dense 0..C-1 and ordered")
    specs = sorted(specs, key=lambda s: s.id)
    if n_scenes <= 0:
        raise ValueError(f"n_scenes must be > 0, got {n_scenes}")
    if density <= 0:
        raise ValueError(f"density must be > 0, got {density}")
    return [generate_scene(specs, first_id + i, grid, density, seed, **scene_kwargs)
            for i in range(n_scenes)]


def _keep_count(rate: float, count: int) -> int:
    return min(count, math.ceil(rate * count - 1e-9))


def sparsify(scene: Scene, rate: float, at_least_one_per_class: bool = False,
             seed: int = 0) -> SparseAnnotations:
    """Keep ``ceil(rate * n_c)`` uniformly chosen instances of each class ``c``.

    Selection within a class is a prefix of a seeded permutation, so for a
    fixed seed a higher rate keeps a superset of a lower one.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    rng = np.random.default_rng((seed, scene.id))
    by_class: dict[int, list[int]] = {}
    for i, ann in enumerate(scene.instances):
        by_class.setdefault(ann.class_id, []).append(i)
    kept_idx: list[int] = []
    for c in sorted(by_class):
        members = np.array(by_class[c])
        perm = members[rng.permutation(len(members))]
        n = _keep_count(rate, len(members))
        if at_least_one_per_class:
            n = max(n, 1)
        kept_idx.extend(int(i) for i in perm[:n])
    kept_idx.sort()
    return SparseAnnotations(scene.id, tuple(scene.instances[i] for i in kept_idx),
                             len(scene.instances) - len(kept_idx), tuple(kept_idx))


def sparsify_corpus(scenes: Sequence[Scene], rate: float, seed: int = 0,
                    at_least_one_per_class: bool = False) -> list[SparseAnnotations]:
    """Dataset-level sampling: keep ``ceil(rate * N_c)`` instances of each class.

    ``N_c`` counts class ``c`` over the whole corpus, so most scenes end up
    with no labels at low rates. With ``at_least_one_per_class`` every scene
    additionally keeps one instance of each class it contains. Nested across
    rates for a fixed seed.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    rng = np.random.default_rng((seed, 0x5A0D))
    by_class: dict[int, list[tuple[int, int]]] = {}
    for si, scene in enumerate(scenes):
        for i, ann in enumerate(scene.instances):
            by_class.setdefault(ann.class_id, []).append((si, i))
    kept: set[tuple[int, int]] = set()
    for c in sorted(by_class):
        members = by_class[c]
        perm = rng.permutation(len(members))
        for j in perm[:_keep_count(rate, len(members))]:
            kept.add(members[j])
        if at_least_one_per_class:
            first_in_scene: dict[int, tuple[int, int]] = {}
            for j in perm:
                first_in_scene.setdefault(members[j][0], members[j])
            kept.update(first_in_scene.values())
    out = []
    for si, scene in enumerate(scenes):
        idx = sorted(i for (s, i) in kept if s == si)
        out.append(SparseAnnotations(scene.id, tuple(scene.instances[i] for i in idx),
                                     len(scene.instances) - len(idx), tuple(idx)))
    return out


def gt_pixel_mask(annotations: Sequence[Annotation] | Scene | SparseAnnotations,
                  grid: tuple[int, int], num_classes: int) -> np.ndarray:
    """Boolean ``(H, W, C)`` mask of cells whose center lies in a class-``c`` box."""
    if isinstance(annotations, Scene):
        annotations = annotations.instances
    elif isinstance(annotations, SparseAnnotations):
        annotations = annotations.kept
    h, w = grid
    if h <= 0 or w <= 0:
        raise ValueError(f"invalid grid {grid}")
    mask = np.zeros((h, w, num_classes), dtype=bool)
    if not annotations:
        return mask
    centers = cell_centers(grid)
    for ann in annotations:
        mask[..., ann.class_id] |= points_in_box(centers, ann.box)
    return mask


def regression_targets(annotations: Sequence[Annotation], grid: tuple[int, int]):
    """Per-cell regression target and owner mask.

    A cell inside several boxes regresses the smallest one. Targets are
    ``(dx, dy, log w, log h, theta)`` with ``(dx, dy)`` measured from the
    cell center.

    Returns:
        ``(targets (H, W, 5), owned (H, W) bool)``.
    """
    h, w = grid
    centers = cell_centers(grid)
    targets = np.zeros((h, w, 5))
    area = np.full((h, w), np.inf)
    for ann in annotations:
        box = ann.box
        inside = points_in_box(centers, box) & (box.area < area)
        area[inside] = box.area
        targets[inside, 0] = box.cx - centers[inside, 0]
        targets[inside, 1] = box.cy - centers[inside, 1]
        targets[inside, 2] = math.log(box.w)
        targets[inside, 3] = math.log(box.h)
        targets[inside, 4] = box.theta
    return targets, np.isfinite(area)


def flip_features(features: np.ndarray, num_classes: int) -> np.ndarray:
    """Mirror a raster left-right, negating the x-offset and angle channels."""
    out = features[:, ::-1].copy()
    g = num_classes
    out[..., g] *= -1.0
    out[..., g + 4] *= -1.0
    return out
