"""Tiny dense per-cell detector with hand-written gradients.

Every cell is scored independently from its feature vector ``x`` (length F):

    z      = x                      (linear model)
    z      = relu(x @ W_h + b_h)    (optional hidden layer of width Hd)
    logits = z @ W_cls + b_cls      (H, W, C), sigmoid per class
    q      = sigmoid(z @ w_q + b_q) (H, W), localization quality
    reg    = z @ W_reg + b_reg      (H, W, 5): dx, dy, log w, log h, theta
"""

from __future__ import annotations

import hashlib
import io
import json
import os
from dataclasses import dataclass
from typing import Mapping

import numpy as np

N_REG = 5
CHECKPOINT_MAGIC = b"SAODCKPT1\n"


class NumericalError(RuntimeError):
    """Raised when a loss, gradient or parameter stops being finite."""


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class ModelParams:
    """Named float64 arrays. Copies are deep; arithmetic never aliases."""

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        self.arrays = {k: np.array(v, dtype=float) for k, v in arrays.items()}

    @classmethod
    def init(cls, num_features: int, num_classes: int, hidden: int = 0, seed: int = 0,
             prior: float = 0.01, scale: float = 0.01) -> "ModelParams":
        rng = np.random.default_rng((seed, 0x30DE1))
        arrays = {}
        width = num_features
        if hidden:
            arrays["hid_w"] = rng.normal(0.0, np.sqrt(2.0 / num_features), (num_features, hidden))
            arrays["hid_b"] = np.zeros(hidden)
            width = hidden
        arrays["cls_w"] = rng.normal(0.0, scale, (width, num_classes))
        arrays["cls_b"] = np.full(num_classes, -np.log((1 - prior) / prior))
        arrays["q_w"] = rng.normal(0.0, scale, width)
        arrays["q_b"] = np.zeros(1)
        arrays["reg_w"] = rng.normal(0.0, scale, (width, N_REG))
        arrays["reg_b"] = np.zeros(N_REG)
        return cls(arrays)

    @classmethod
    def zeros(cls, num_features: int, num_classes: int, hidden: int = 0) -> "ModelParams":
        arrays = {}
        width = num_features
        if hidden:
            arrays["hid_w"] = np.zeros((num_features, hidden))
            arrays["hid_b"] = np.zeros(hidden)
            width = hidden
        arrays.update(cls_w=np.zeros((width, num_classes)), cls_b=np.zeros(num_classes),
                      q_w=np.zeros(width), q_b=np.zeros(1),
                      reg_w=np.zeros((width, N_REG)), reg_b=np.zeros(N_REG))
        return cls(arrays)

    @property
    def hidden(self) -> int:
        return self.arrays["hid_w"].shape[1] if "hid_w" in self.arrays else 0

    @property
    def num_features(self) -> int:
        key = "hid_w" if self.hidden else "cls_w"
        return self.arrays[key].shape[0]

    @property
    def num_classes(self) -> int:
        return self.arrays["cls_w"].shape[1]

    def names(self) -> list[str]:
        return sorted(self.arrays)

    def copy(self) -> "ModelParams":
        return ModelParams(self.arrays)

    def zeros_like(self) -> "ModelParams":
        return ModelParams({k: np.zeros_like(v) for k, v in self.arrays.items()})

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.arrays.items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in self.names()])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())

    def checksum(self) -> str:
        return hashlib.sha256(self.flat().astype("<f8").tobytes()).hexdigest()

    def __getitem__(self, key):
        return self.arrays[key]

    def __eq__(self, other):
        if not isinstance(other, ModelParams) or self.shapes() != other.shapes():
            return False
        return all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)


@dataclass
class DenseOutput:
    class_logits: np.ndarray  # (H, W, C)
    quality: np.ndarray  # (H, W), in (0, 1)
    regression: np.ndarray  # (H, W, 5)
    quality_logit: np.ndarray | None = None
    hidden_pre: np.ndarray | None = None

    @property
    def class_prob(self) -> np.ndarray:
        return sigmoid(self.class_logits)

    @property
    def grid(self) -> tuple[int, int]:
        return self.class_logits.shape[:2]


@dataclass
class OutputGrads:
    """Gradient of a scalar loss w.r.t. the raw head outputs."""

    class_logits: np.ndarray
    quality_logit: np.ndarray
    regression: np.ndarray

    @classmethod
    def zeros(cls, out: DenseOutput) -> "OutputGrads":
        return cls(np.zeros_like(out.class_logits), np.zeros(out.grid),
                   np.zeros_like(out.regression))

    def __add__(self, other: "OutputGrads") -> "OutputGrads":
        return OutputGrads(self.class_logits + other.class_logits,
                           self.quality_logit + other.quality_logit,
                           self.regression + other.regression)

    def scaled(self, factor: float) -> "OutputGrads":
        return OutputGrads(self.class_logits * factor, self.quality_logit * factor,
                           self.regression * factor)


def _check_features(params: ModelParams, features: np.ndarray):
    if features.ndim != 3 or features.shape[-1] != params.num_features:
        raise ValueError(f"expected raster (H, W, {params.num_features}), got {features.shape}")


def forward(params: ModelParams, features: np.ndarray) -> DenseOutput:
    _check_features(params, features)
    a = params.arrays
    z = features
    pre = None
    if "hid_w" in a:
        pre = features @ a["hid_w"] + a["hid_b"]
        z = np.maximum(pre, 0.0)
    logits = z @ a["cls_w"] + a["cls_b"]
    q_logit = z @ a["q_w"] + a["q_b"][0]
    reg = z @ a["reg_w"] + a["reg_b"]
    return DenseOutput(logits, sigmoid(q_logit), reg, q_logit, pre)


def backward(params: ModelParams, features: np.ndarray, out: DenseOutput,
             grads: OutputGrads) -> ModelParams:
    """Chain output gradients back to every parameter array."""
    a = params.arrays
    F = features.shape[-1]
    x = features.reshape(-1, F)
    if "hid_w" in a:
        z = np.maximum(out.hidden_pre, 0.0).reshape(-1, a["hid_w"].shape[1])
    else:
        z = x
    g_cls = grads.class_logits.reshape(-1, a["cls_w"].shape[1])
    g_q = grads.quality_logit.reshape(-1)
    g_reg = grads.regression.reshape(-1, N_REG)
    g = {
        "cls_w": z.T @ g_cls,
        "cls_b": g_cls.sum(0),
        "q_w": z.T @ g_q,
        "q_b": np.array([g_q.sum()]),
        "reg_w": z.T @ g_reg,
        "reg_b": g_reg.sum(0),
    }
    if "hid_w" in a:
        g_z = g_cls @ a["cls_w"].T + np.outer(g_q, a["q_w"]) + g_reg @ a["reg_w"].T
        g_pre = g_z * (out.hidden_pre.reshape(g_z.shape) > 0)
        g["hid_w"] = x.T @ g_pre
        g["hid_b"] = g_pre.sum(0)
    return ModelParams(g)


def joint_confidence(out: DenseOutput) -> np.ndarray:
    """Per-class score ``sigmoid(logit) * quality`` with shape (H, W, C)."""
    return out.class_prob * out.quality[..., None]


def sgd_step(params: ModelParams, grads: ModelParams, velocity: ModelParams | None = None,
             lr: float = 0.0025, momentum: float = 0.9, weight_decay: float = 0.0001):
    """One step of SGD with momentum and L2 weight decay.

    ``v <- momentum * v + (grad + weight_decay * param)``, then
    ``param <- param - lr * v``.

    Returns:
        ``(new_params, new_velocity)``; inputs are not modified.
    """
    if not grads.is_finite():
        raise NumericalError("non-finite gradient")
    if velocity is None:
        velocity = params.zeros_like()
    new_p, new_v = {}, {}
    for k, p in params.arrays.items():
        v = momentum * velocity.arrays[k] + (grads.arrays[k] + weight_decay * p)
        new_v[k] = v
        new_p[k] = p - lr * v
    out = ModelParams(new_p)
    if not out.is_finite():
        raise NumericalError("non-finite parameters after step")
    return out, ModelParams(new_v)


def add_params(a: ModelParams, b: ModelParams, scale: float = 1.0) -> ModelParams:
    return ModelParams({k: a.arrays[k] + scale * b.arrays[k] for k in a.arrays})


# checkpoint format: magic line, one JSON header line, little-endian float64 blob

def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, ModelParams],
                    meta: Mapping | None = None) -> None:
    """Write named parameter sets atomically (temp file + rename)."""
    entries, blobs, offset = [], [], 0
    for group in sorted(tensors):
        p = tensors[group]
        for name in p.names():
            arr = np.ascontiguousarray(p.arrays[name], dtype="<f8")
            entries.append({"name": f"{group}/{name}", "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    header = {"format": "saod-checkpoint", "version": 1, "dtype": "<f8",
              "meta": dict(meta or {}), "tensors": entries}
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
    for b in blobs:
        buf.write(b)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, ModelParams], dict]:
    with open(path, "rb") as fh:
        if fh.readline() != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a saod checkpoint")
        header = json.loads(fh.readline())
        blob = fh.read()
    groups: dict[str, dict[str, np.ndarray]] = {}
    for e in header["tensors"]:
        group, name = e["name"].split("/", 1)
        n = int(np.prod(e["shape"], dtype=int))
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"])
        groups.setdefault(group, {})[name] = arr.astype(float)
    return {g: ModelParams(a) for g, a in groups.items()}, header["meta"]


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode())

