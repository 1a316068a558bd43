"""Class-aware dense pseudo-label assignment.

Candidates are ``(y, x, class_id, score)`` quadruples, usually one per
(cell, class) pair of a teacher's joint-confidence map. Three selectors are
combined and deduplicated:

* :func:`select_fg` keeps cells whose predicted class is in the prompt and
  whose score clears a threshold,
* :func:`select_topk` keeps the ``k`` best pairs overall,
* :func:`select_per_class` keeps the ``k_j`` best pairs of every prompted
  class.

Ranking ties are broken by ``(y, x, class_id)`` ascending, never by input
order, so every selector is invariant to permutations of the candidates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

TAGS = ("fg", "conf", "per-class", "gt")


class PixelCandidate(NamedTuple):
    y: int
    x: int
    class_id: int
    score: float


class Candidates:
    """Column-oriented candidate list."""

    def __init__(self, y, x, c, score):
        self.y = np.asarray(y, dtype=np.int64).ravel()
        self.x = np.asarray(x, dtype=np.int64).ravel()
        self.c = np.asarray(c, dtype=np.int64).ravel()
        self.score = np.asarray(score, dtype=float).ravel()
        n = len(self.y)
        if not (len(self.x) == len(self.c) == len(self.score) == n):
            raise ValueError("candidate columns differ in length")

    @classmethod
    def from_scores(cls, scores: np.ndarray) -> "Candidates":
        """One candidate per (cell, class) of an (H, W, C) score map."""
        H, W, C = scores.shape
        y, x, c = np.meshgrid(np.arange(H), np.arange(W), np.arange(C), indexing="ij")
        return cls(y, x, c, scores)

    @classmethod
    def from_list(cls, items: Iterable[PixelCandidate | Sequence]) -> "Candidates":
        items = list(items)
        if not items:
            return cls([], [], [], [])
        y, x, c, s = zip(*items)
        return cls(y, x, c, s)

    def to_list(self) -> list[PixelCandidate]:
        return [PixelCandidate(int(a), int(b), int(c), float(s))
                for a, b, c, s in zip(self.y, self.x, self.c, self.score)]

    def subset(self, idx) -> "Candidates":
        return Candidates(self.y[idx], self.x[idx], self.c[idx], self.score[idx])

    def scaled(self, factor: float) -> "Candidates":
        return Candidates(self.y, self.x, self.c, self.score * factor)

    def __len__(self) -> int:
        return len(self.y)

    def ranked(self) -> np.ndarray:
        """Indices by descending score, ties by (y, x, class) ascending."""
        return np.lexsort((self.c, self.x, self.y, -self.score))


class SelectionSet:
    """Duplicate-free set of ``(y, x, class_id)`` triples with scores and tags.

    Adding an existing triple merges its provenance tags and keeps the first
    recorded score.
    """

    def __init__(self):
        self._items: dict[tuple[int, int, int], tuple[float, set[str]]] = {}

    def add(self, y: int, x: int, c: int, score: float, tag: str) -> None:
        key = (int(y), int(x), int(c))
        entry = self._items.get(key)
        if entry is None:
            self._items[key] = (float(score), {tag})
        else:
            entry[1].add(tag)

    def add_candidates(self, cands: Candidates, idx, tag: str) -> "SelectionSet":
        for i in np.asarray(idx, dtype=np.int64).ravel():
            self.add(cands.y[i], cands.x[i], cands.c[i], cands.score[i], tag)
        return self

    def update(self, other: "SelectionSet") -> "SelectionSet":
        for key, (score, tags) in other._items.items():
            for tag in sorted(tags):
                self.add(*key, score, tag)
        return self

    def __or__(self, other: "SelectionSet") -> "SelectionSet":
        return SelectionSet().update(self).update(other)

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, key) -> bool:
        return tuple(int(v) for v in key) in self._items

    def __iter__(self) -> Iterator[tuple[int, int, int]]:
        return iter(sorted(self._items))

    def keys(self) -> set[tuple[int, int, int]]:
        return set(self._items)

    def tags(self, key) -> set[str]:
        return set(self._items[tuple(int(v) for v in key)][1])

    def score(self, key) -> float:
        return self._items[tuple(int(v) for v in key)][0]

    def with_tag(self, tag: str) -> set[tuple[int, int, int]]:
        return {k for k, (_, t) in self._items.items() if tag in t}

    def indices(self) -> np.ndarray:
        """(N, 3) int array of ``(y, x, class_id)`` rows in sorted order."""
        if not self._items:
            return np.zeros((0, 3), dtype=np.int64)
        return np.array(sorted(self._items), dtype=np.int64)

    def classes(self) -> set[int]:
        return {k[2] for k in self._items}

    def mapped(self, fn) -> "SelectionSet":
        """New set with every key passed through ``fn(y, x, c) -> (y, x, c)``."""
        out = SelectionSet()
        for key, (score, tags) in self._items.items():
            for tag in sorted(tags):
                out.add(*fn(*key), score, tag)
        return out


@dataclass(frozen=True)
class ClaConfig:
    """Thresholds and budgets for class-aware assignment.

    ``k`` may be given directly; when ``None`` it is ``k_ratio`` of the
    number of candidates (rounded, at least 1).
    """

    thr: float = 0.5
    k: int | None = None
    k_j: int = 10
    k_ratio: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.thr < 1.0:
            raise ValueError(f"thr must be in (0, 1), got {self.thr}")
        if self.k is not None and self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.k_j < 1:
            raise ValueError(f"k_j must be >= 1, got {self.k_j}")
        if not 0.0 < self.k_ratio <= 1.0:
            raise ValueError(f"k_ratio must be in (0, 1], got {self.k_ratio}")

    def resolve_k(self, n_candidates: int) -> int:
        if self.k is not None:
            return self.k
        return max(1, int(round(self.k_ratio * n_candidates)))


def _prompt_classes(prompt) -> set[int] | None:
    if prompt is None:
        return None
    classes = getattr(prompt, "classes", prompt)
    return {int(c) for c in classes}


def predicted_class(cands: Candidates) -> np.ndarray:
    """Indices of the per-cell argmax candidates (lowest class id on ties)."""
    if not len(cands):
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((cands.c, -cands.score, cands.x, cands.y))
    y, x = cands.y[order], cands.x[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = (y[1:] != y[:-1]) | (x[1:] != x[:-1])
    return order[first]


def select_fg(cands: Candidates, prompt, thr: float) -> SelectionSet:
    """Cells whose predicted class is prompted and whose score exceeds ``thr``."""
    if not 0.0 < thr < 1.0:
        raise ValueError(f"thr must be in (0, 1), got {thr}")
    classes = _prompt_classes(prompt)
    out = SelectionSet()
    if not classes or not len(cands):
        return out
    best = predicted_class(cands)
    keep = best[np.isin(cands.c[best], list(classes)) & (cands.score[best] > thr)]
    return out.add_candidates(cands, keep, "fg")


def select_topk(cands: Candidates, k: int, tag: str = "conf") -> SelectionSet:
    """The ``k`` highest-scoring candidates (all of them if fewer)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return SelectionSet().add_candidates(cands, cands.ranked()[:k], tag)


def select_per_class(cands: Candidates, prompt, k_j: int) -> SelectionSet:
    """Top ``k_j`` candidates of each prompted class.

    An empty or missing prompt falls back to every class present among the
    candidates.
    """
    if k_j < 1:
        raise ValueError(f"k_j must be >= 1, got {k_j}")
    classes = _prompt_classes(prompt)
    if not classes:
        classes = set(np.unique(cands.c).tolist())
    out = SelectionSet()
    order = cands.ranked()
    ranked_c = cands.c[order]
    for c in sorted(classes):
        out.add_candidates(cands, order[ranked_c == c][:k_j], "per-class")
    return out


def assign_unlabeled(cands: Candidates, prompt, cfg: ClaConfig) -> SelectionSet:
    """Union of the three selectors; ``prompt=None`` skips the foreground stage."""
    sel = SelectionSet()
    if prompt is not None:
        sel.update(select_fg(cands, prompt, cfg.thr))
    if len(cands):
        sel.update(select_topk(cands, cfg.resolve_k(len(cands))))
        sel.update(select_per_class(cands, prompt, cfg.k_j))
    return sel


def assign_sparse(cands: Candidates, prompt, cfg: ClaConfig,
                  gt_pixels: SelectionSet) -> SelectionSet:
    """:func:`assign_unlabeled` plus every annotated pixel."""
    return assign_unlabeled(cands, prompt, cfg).update(gt_pixels)


def assign_global_topk(cands: Candidates, k: int) -> SelectionSet:
    """Baseline: plain global top-k over all (cell, class) pairs."""
    return select_topk(cands, k)


def selection_from_mask(mask: np.ndarray, scores: np.ndarray | None = None,
                        tag: str = "gt") -> SelectionSet:
    """Selection of every true entry of an (H, W, C) mask."""
    sel = SelectionSet()
    for y, x, c in zip(*np.nonzero(mask)):
        sel.add(y, x, c, 1.0 if scores is None else scores[y, x, c], tag)
    return sel


def selection_to_text(sel: SelectionSet) -> str:
    """One ``y x class score tags`` line per element, sorted by coordinates."""
    lines = ["# y x class score tags"]
    for key in sel:
        tags = ",".join(t for t in TAGS if t in sel.tags(key))
        lines.append(f"{key[0]} {key[1]} {key[2]} {sel.score(key):.6f} {tags}")
    return "\n".join(lines) + "\n"


def selection_from_text(text: str) -> SelectionSet:
    sel = SelectionSet()
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        y, x, c, s, tags = line.split()
        for tag in tags.split(","):
            sel.add(int(y), int(x), int(c), float(s), tag)
    return sel


def selection_map(sel: SelectionSet, grid: tuple[int, int]) -> np.ndarray:
    """uint8 (H, W) image: 0 background, 128 pseudo-labeled, 255 annotated."""
    img = np.zeros(grid, dtype=np.uint8)
    for y, x, c in sel:
        level = 255 if "gt" in sel.tags((y, x, c)) else 128
        img[y, x] = max(img[y, x], level)
    return img


def to_pgm(img: np.ndarray, scale: int = 1) -> bytes:
    """Binary (P5) portable graymap of a uint8 image, upsampled by ``scale``."""
    if scale > 1:
        img = np.kron(img, np.ones((scale, scale), dtype=np.uint8))
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def per_class_floor_ok(sel: SelectionSet, cands: Candidates, prompt, k_j: int) -> bool:
    """Check that each prompted class with candidates has >= min(k_j, n) picks."""
    classes = _prompt_classes(prompt) or set(np.unique(cands.c).tolist())
    for c in classes:
        available = int(np.sum(cands.c == c))
        got = sum(1 for key in sel.keys() if key[2] == c)
        if got < min(k_j, available):
            return False
    return True

