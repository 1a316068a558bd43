"""On-disk formats for corpora, sparse annotations and run manifests.

A corpus directory holds ``corpus.json`` (scenes, instances, categories)
and ``rasters.f8``, the concatenated little-endian float64 feature rasters.
Field names are documented in ``docs/formats.md``.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .geometry import OrientedBox
from .model import atomic_write_bytes, atomic_write_text
from .scene import Annotation, CategorySpec, Scene, SparseAnnotations

CORPUS_FILE = "corpus.json"
RASTER_FILE = "rasters.f8"


class FormatError(ValueError):
    """A file exists but does not have the expected structure."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: Mapping) -> str:
    """SHA-256 of the canonical JSON encoding of a resolved config."""
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path: str | os.PathLike, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def read_json(path: str | os.PathLike):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def _expect(doc: Mapping, fmt: str, path) -> None:
    if not isinstance(doc, Mapping) or doc.get("format") != fmt:
        raise FormatError(f"{path}: not a {fmt} file")


# corpus ---------------------------------------------------------------------

def save_corpus(out_dir: str | os.PathLike, scenes: Sequence[Scene], specs: Sequence[CategorySpec],
                meta: Mapping | None = None) -> str:
    """Write a corpus directory and return its content hash."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    blobs, entries, offset = [], [], 0
    for s in scenes:
        arr = np.ascontiguousarray(s.features, dtype="<f8")
        entries.append({
            "id": s.id,
            "grid": list(s.grid),
            "raster_shape": list(arr.shape),
            "raster_offset": offset,
            "instances": [{"class": a.class_id, "cx": a.box.cx, "cy": a.box.cy, "w": a.box.w,
                           "h": a.box.h, "theta": a.box.theta} for a in s.instances],
        })
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    raster = b"".join(blobs)
    doc = {
        "format": "saod-corpus",
        "version": 1,
        "num_classes": len(specs),
        "categories": [{"id": c.id, "name": c.name, "frequency_weight": c.frequency_weight,
                        "size_range": list(c.size_range), "detectability": c.detectability}
                       for c in specs],
        "raster_file": RASTER_FILE,
        "raster_dtype": "<f8",
        "raster_sha256": hashlib.sha256(raster).hexdigest(),
        "meta": dict(meta or {}),
        "scenes": entries,
    }
    atomic_write_bytes(out / RASTER_FILE, raster)
    write_json(out / CORPUS_FILE, doc)
    return corpus_hash(out)


def corpus_hash(corpus_dir: str | os.PathLike) -> str:
    return file_sha256(Path(corpus_dir) / CORPUS_FILE)


def load_corpus(corpus_dir: str | os.PathLike, verify: bool = True):
    """Read a corpus directory.

    Returns:
        ``(scenes, specs, meta)``.
    """
    root = Path(corpus_dir)
    path = root / CORPUS_FILE
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")
    doc = read_json(path)
    _expect(doc, "saod-corpus", path)
    raster = (root / doc["raster_file"]).read_bytes()
    if verify and hashlib.sha256(raster).hexdigest() != doc["raster_sha256"]:
        raise FormatError(f"{root / doc['raster_file']}: checksum mismatch")
    specs = [CategorySpec(c["id"], c["name"], c["frequency_weight"], tuple(c["size_range"]),
                          c["detectability"]) for c in doc["categories"]]
    scenes = []
    for e in doc["scenes"]:
        n = int(np.prod(e["raster_shape"]))
        feats = np.frombuffer(raster, dtype="<f8", count=n, offset=e["raster_offset"])
        inst = [Annotation(int(i["class"]), OrientedBox(i["cx"], i["cy"], i["w"], i["h"], i["theta"]))
                for i in e["instances"]]
        scenes.append(Scene(int(e["id"]), tuple(e["grid"]), feats.reshape(e["raster_shape"]).astype(float),
                            inst, doc["num_classes"]))
    return scenes, specs, doc.get("meta", {})


# sparse annotations -----------------------------------------------------------

def save_annotations(path: str | os.PathLike, sparse: Sequence[SparseAnnotations], meta: Mapping) -> None:
    doc = {
        "format": "saod-annotations",
        "version": 1,
        "meta": dict(meta),
        "scenes": {str(a.scene_id): {"kept_indices": list(a.kept_indices),
                                     "removed_count": a.removed_count} for a in sparse},
    }
    write_json(path, doc)


def load_annotations(path: str | os.PathLike, scenes: Sequence[Scene]) -> tuple[list[SparseAnnotations], dict]:
    """Rebuild sparse annotations against ``scenes``; kept boxes are the scene's own objects."""
    doc = read_json(path)
    _expect(doc, "saod-annotations", path)
    by_id = {s.id: s for s in scenes}
    out = []
    for sid, entry in doc["scenes"].items():
        scene = by_id.get(int(sid))
        if scene is None:
            raise FormatError(f"{path}: scene {sid} is not in the corpus")
        idx = tuple(int(i) for i in entry["kept_indices"])
        if any(not 0 <= i < len(scene.instances) for i in idx):
            raise FormatError(f"{path}: scene {sid} has an out-of-range instance index")
        out.append(SparseAnnotations(scene.id, tuple(scene.instances[i] for i in idx),
                                     len(scene.instances) - len(idx), idx))
    missing = set(by_id) - {a.scene_id for a in out}
    if missing:
        raise FormatError(f"{path}: no entry for {len(missing)} corpus scenes")
    order = {s.id: k for k, s in enumerate(scenes)}
    out.sort(key=lambda a: order[a.scene_id])
    return out, doc.get("meta", {})
