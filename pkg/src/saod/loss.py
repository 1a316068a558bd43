"""Hard-negative reweighted focal loss, supervised and distillation losses.

The reweighted loss has three branches, with ``p`` the predicted class
probability, ``a = alpha``, ``g = gamma``:

* positive:                 ``-log(p) * a * m_pos(p)``
* negative with ``p <= thr``: ``-log(1 - p) * (1 - a) * m_neg(p)``
* negative with ``p > thr``:  the negative term times ``w``

Mode ``"as-written"`` uses ``m_pos = p**g`` and ``m_neg = (1 - p)**g``;
mode ``"standard-focal"`` swaps them to the usual focal modulators
``m_pos = (1 - p)**g`` and ``m_neg = p**g``.

Every loss returns gradients with respect to pre-sigmoid logits, so they
can be chained straight into :func:`saod.model.backward`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .model import DenseOutput, OutputGrads, sigmoid
from .scene import Annotation, SparseAnnotations, regression_targets

MODES = ("as-written", "standard-focal")


@dataclass(frozen=True)
class AhrConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    thr: float = 0.9
    w: float = 0.15
    mode: str = "as-written"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 < self.thr <= 1.0:
            raise ValueError(f"thr must be in (0, 1], got {self.thr}")
        if not 0.0 < self.w <= 1.0:
            raise ValueError(f"w must be in (0, 1], got {self.w}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


class LossResult(NamedTuple):
    loss: float
    grads: OutputGrads
    parts: dict


def _log_sigmoid(z):
    # log(sigmoid(z)) without overflow
    return -np.logaddexp(0.0, -z)


def _ahr_terms(p, log_p, log_q, positive, cfg: AhrConfig):
    """Elementwise loss and d loss / d logit given p, log p, log(1 - p)."""
    q = 1.0 - p
    a, g = cfg.alpha, cfg.gamma
    if cfg.mode == "as-written":
        pos_loss = -a * p**g * log_p
        pos_grad = -a * p**g * (g * log_p + 1.0) * q
        neg_loss = -(1.0 - a) * q**g * log_q
        neg_grad = (1.0 - a) * q**g * (g * log_q + 1.0) * p
    else:
        pos_loss = -a * q**g * log_p
        pos_grad = a * q**g * (g * p * log_p - q)
        neg_loss = -(1.0 - a) * p**g * log_q
        neg_grad = (1.0 - a) * p**g * (p - g * q * log_q)
    scale = np.where(p > cfg.thr, cfg.w, 1.0)
    loss = np.where(positive, pos_loss, scale * neg_loss)
    grad = np.where(positive, pos_grad, scale * neg_grad)
    return loss, grad


def ahr_loss(p_t, is_positive, cfg: AhrConfig = AhrConfig()):
    """Reweighted loss of a predicted probability and its logit gradient.

    Args:
        p_t: predicted probability, strictly inside (0, 1). Scalar or array.
        is_positive: target label, broadcastable against ``p_t``.
        cfg: loss hyperparameters.

    Returns:
        ``(loss, dloss_dlogit)``, floats for scalar input, arrays otherwise.
    """
    p = np.asarray(p_t, dtype=float)
    if np.any(~np.isfinite(p)) or np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("p_t must lie strictly inside (0, 1)")
    positive = np.asarray(is_positive, dtype=bool)
    loss, grad = _ahr_terms(p, np.log(p), np.log1p(-p), positive, cfg)
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def ahr_from_logits(logits: np.ndarray, positive: np.ndarray, cfg: AhrConfig):
    """Same as :func:`ahr_loss` but from logits, stable for saturated inputs."""
    z = np.asarray(logits, dtype=float)
    return _ahr_terms(sigmoid(z), _log_sigmoid(z), _log_sigmoid(-z), positive, cfg)


def focal_loss(p, is_positive, alpha=0.25, gamma=2.0):
    """Textbook sigmoid focal loss, used as an independent reference."""
    p = np.asarray(p, dtype=float)
    pt = np.where(is_positive, p, 1.0 - p)
    at = np.where(is_positive, alpha, 1.0 - alpha)
    return -at * (1.0 - pt) ** gamma * np.log(pt)


def smooth_l1(diff: np.ndarray, beta: float = 1.0):
    """Smooth-L1 value and derivative, elementwise."""
    ad = np.abs(diff)
    small = ad < beta
    val = np.where(small, 0.5 * diff * diff / beta, ad - 0.5 * beta)
    grad = np.where(small, diff / beta, np.sign(diff))
    return val, grad


def supervised_loss(out: DenseOutput, annotations: SparseAnnotations | Sequence[Annotation],
                    gt_mask: np.ndarray, cfg: AhrConfig = AhrConfig(),
                    reg_beta: float = 1.0) -> LossResult:
    """Loss of the supervised branch on one scene.

    Classification uses the reweighted loss over every (cell, class) pair
    with positives at ``gt_mask``. Quality BCE (target 1) and smooth-L1 box
    regression apply at positive cells only. All three terms are divided by
    the number of positive cells (at least 1) and summed with unit weights.
    """
    if gt_mask.shape != out.class_logits.shape:
        raise ValueError(f"mask shape {gt_mask.shape} != logits shape {out.class_logits.shape}")
    if isinstance(annotations, SparseAnnotations):
        annotations = annotations.kept
    pos_cells = gt_mask.any(axis=-1)
    norm = max(1, int(pos_cells.sum()))

    cls_loss, cls_grad = ahr_from_logits(out.class_logits, gt_mask, cfg)
    grads = OutputGrads.zeros(out)
    grads.class_logits = cls_grad / norm
    parts = {"cls": float(cls_loss.sum()) / norm, "quality": 0.0, "reg": 0.0}

    if pos_cells.any():
        ql = out.quality_logit if out.quality_logit is not None else np.log(out.quality / (1 - out.quality))
        q_loss = -_log_sigmoid(ql[pos_cells])
        grads.quality_logit[pos_cells] = (sigmoid(ql[pos_cells]) - 1.0) / norm
        parts["quality"] = float(q_loss.sum()) / norm

        targets, owned = regression_targets(annotations, out.grid)
        cells = pos_cells & owned
        val, d = smooth_l1(out.regression[cells] - targets[cells], reg_beta)
        grads.regression[cells] = d / norm
        parts["reg"] = float(val.sum()) / norm

    total = parts["cls"] + parts["quality"] + parts["reg"]
    return LossResult(total, grads, parts)


def distill_loss(student_out: DenseOutput, teacher_scores: np.ndarray, selected,
                 cfg: AhrConfig = AhrConfig()) -> LossResult:
    """Dense distillation on the pixels chosen by an assignment strategy.

    Selected ``(y, x, class)`` pairs get binary cross-entropy against the
    teacher score as a soft target; every other pair gets the negative
    branch of the reweighted loss. The sum is divided by the number of
    selected pairs. An empty selection yields zero loss.

    Args:
        student_out: student predictions on its own view.
        teacher_scores: (H, W, C) soft targets in [0, 1].
        selected: :class:`~saod.assign.SelectionSet` or an (N, 3) int array
            of ``(y, x, class)`` rows, already in the student's frame.
    """
    idx = selected.indices() if hasattr(selected, "indices") else np.asarray(selected, dtype=np.int64)
    idx = np.unique(idx.reshape(-1, 3), axis=0)
    grads = OutputGrads.zeros(student_out)
    if not len(idx):
        return LossResult(0.0, grads, {"pos": 0.0, "neg": 0.0, "n_selected": 0})
    H, W, C = student_out.class_logits.shape
    if (idx < 0).any() or (idx[:, 0] >= H).any() or (idx[:, 1] >= W).any() or (idx[:, 2] >= C).any():
        raise ValueError("selected pixel outside the grid")
    n = len(idx)
    z = student_out.class_logits
    sel_mask = np.zeros(z.shape, dtype=bool)
    sel_mask[idx[:, 0], idx[:, 1], idx[:, 2]] = True

    neg_loss, neg_grad = ahr_from_logits(z, np.zeros(z.shape, dtype=bool), cfg)
    neg_loss = np.where(sel_mask, 0.0, neg_loss)
    neg_grad = np.where(sel_mask, 0.0, neg_grad)

    zs = z[sel_mask]
    t = np.clip(teacher_scores[sel_mask], 0.0, 1.0)
    pos_loss = -(t * _log_sigmoid(zs) + (1.0 - t) * _log_sigmoid(-zs))
    g = neg_grad
    g[sel_mask] = sigmoid(zs) - t
    grads.class_logits = g / n
    parts = {"pos": float(pos_loss.sum()) / n, "neg": float(neg_loss.sum()) / n, "n_selected": n}
    return LossResult(parts["pos"] + parts["neg"], grads, parts)
