"""Rotated-box detection metrics.

Detections are matched greedily in descending score order: each one takes
the unmatched ground-truth box of its class and scene with the highest
rotated IoU (lower GT index on ties), provided that IoU reaches the
threshold. AP is the area under the monotone precision envelope
(all-point interpolation).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .geometry import OrientedBox, iou_matrix, nms_params
from .model import DenseOutput, forward, joint_confidence

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


class Detection(NamedTuple):
    scene_id: int
    class_id: int
    box: OrientedBox
    score: float


class GroundTruth(NamedTuple):
    scene_id: int
    class_id: int
    box: OrientedBox


def gts_from_scenes(scenes) -> list[GroundTruth]:
    return [GroundTruth(s.id, a.class_id, a.box) for s in scenes for a in s.instances]


def decode(out: DenseOutput, score_thr: float = 0.05, nms_thr: float = 0.3, scene_id: int = 0,
           max_per_class: int = 200, max_dets: int = 100) -> list[Detection]:
    """Turn a dense output into scored oriented boxes.

    Every (cell, class) pair whose joint confidence exceeds ``score_thr``
    proposes the box regressed at that cell. At most ``max_per_class``
    proposals per class go through rotated NMS; the ``max_dets`` best
    survivors are returned, highest score first.
    """
    if not 0.0 < score_thr < 1.0 or not 0.0 < nms_thr <= 1.0:
        raise ValueError("score_thr must be in (0, 1) and nms_thr in (0, 1]")
    scores = joint_confidence(out)
    H, W, C = scores.shape
    log_cap = math.log(4.0 * max(H, W))
    dets: list[Detection] = []
    for c in range(C):
        ys, xs = np.nonzero(scores[..., c] > score_thr)
        if not len(ys):
            continue
        s = scores[ys, xs, c]
        order = np.lexsort((xs, ys, -s))[:max_per_class]
        ys, xs, s = ys[order], xs[order], s[order]
        reg = out.regression[ys, xs]
        params = np.column_stack([xs + 0.5 + reg[:, 0], ys + 0.5 + reg[:, 1],
                                  np.exp(np.clip(reg[:, 2], -log_cap, log_cap)),
                                  np.exp(np.clip(reg[:, 3], -log_cap, log_cap)), reg[:, 4]])
        for i in nms_params(params, s, nms_thr):
            dets.append(Detection(scene_id, c, OrientedBox(*params[i]), float(s[i])))
    dets.sort(key=lambda d: -d.score)
    return dets[:max_dets]


def _sorted_dets(dets: Sequence[Detection]) -> list[Detection]:
    # stable: equal scores keep their input order
    return sorted(dets, key=lambda d: -d.score)


def _match(dets: Sequence[Detection], gts: Sequence[GroundTruth],
           thresholds: Sequence[float]) -> np.ndarray:
    """TP flags of shape (len(thresholds), len(dets)) for ``dets`` already sorted."""
    tp = np.zeros((len(thresholds), len(dets)), dtype=bool)
    by_scene_gt: dict[tuple[int, int], list[int]] = {}
    for j, g in enumerate(gts):
        by_scene_gt.setdefault((g.scene_id, g.class_id), []).append(j)
    by_scene_det: dict[tuple[int, int], list[int]] = {}
    for i, d in enumerate(dets):
        by_scene_det.setdefault((d.scene_id, d.class_id), []).append(i)
    for key, det_idx in by_scene_det.items():
        gt_idx = by_scene_gt.get(key)
        if not gt_idx:
            continue
        ious = iou_matrix([dets[i].box for i in det_idx], [gts[j].box for j in gt_idx])
        for t_i, thr in enumerate(thresholds):
            taken = np.zeros(len(gt_idx), dtype=bool)
            for row, i in enumerate(det_idx):
                cand = np.where(taken, -1.0, ious[row])
                j = int(np.argmax(cand))  # first maximum, i.e. lowest GT index
                if cand[j] >= thr:
                    taken[j] = True
                    tp[t_i, i] = True
    return tp


def _ap_from_tp(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        return 1.0 if len(tp) == 0 else 0.0
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    r_prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - r_prev) * envelope))


def average_precision(dets: Iterable[Detection], gts: Iterable[GroundTruth],
                      iou_thr: float = 0.5) -> float:
    """All-point AP of one class.

    ``dets`` and ``gts`` should hold a single class; pairs of different
    classes never match. No GT and no detections gives 1.0 (such classes
    are left out of mAP by :func:`map_report`); no GT but some detections
    gives 0.0.
    """
    dets, gts = _sorted_dets(list(dets)), list(gts)
    return _ap_from_tp(_match(dets, gts, [iou_thr])[0], len(gts))


@dataclass
class MapReport:
    mAP: float | None = None
    AP50: float | None = None
    AP75: float | None = None
    per_class: list[dict] = field(default_factory=list)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        return {"mAP": self.mAP, "AP50": self.AP50, "AP75": self.AP75,
                "per_class": self.per_class, "error": self.error}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class_id", "name", "n_gt", "n_det", "AP50", "AP75", "mAP", "evaluated"])
        for row in self.per_class:
            writer.writerow([row["class_id"], row["name"], row["n_gt"], row["n_det"],
                             _fmt(row["AP50"]), _fmt(row["AP75"]), _fmt(row["mAP"]), int(row["evaluated"])])
        writer.writerow(["all", "", "", "", _fmt(self.AP50), _fmt(self.AP75), _fmt(self.mAP), 1])
        return buf.getvalue()


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def map_report(dets: Sequence[Detection], gts: Sequence[GroundTruth], num_classes: int | None = None,
               class_names: Sequence[str] | None = None,
               thresholds: Sequence[float] = IOU_THRESHOLDS) -> MapReport:
    """COCO-style mAP over ``thresholds`` plus AP50 and AP75.

    Per-class APs are averaged over classes with at least one GT box.
    """
    if not gts:
        return MapReport(error="empty corpus: no ground-truth boxes")
    if num_classes is None:
        num_classes = 1 + max([g.class_id for g in gts] + [d.class_id for d in dets])
    names = list(class_names) if class_names else [str(c) for c in range(num_classes)]
    grid = sorted(set(round(t, 6) for t in thresholds) | {0.5, 0.75})
    i50, i75 = grid.index(0.5), grid.index(0.75)
    main = [grid.index(round(t, 6)) for t in thresholds]

    rows, evaluated = [], []
    for c in range(num_classes):
        d_c = _sorted_dets([d for d in dets if d.class_id == c])
        g_c = [g for g in gts if g.class_id == c]
        tp = _match(d_c, g_c, grid)
        aps = [_ap_from_tp(tp[t], len(g_c)) for t in range(len(grid))]
        row = {"class_id": c, "name": names[c], "n_gt": len(g_c), "n_det": len(d_c),
               "evaluated": bool(g_c), "AP50": aps[i50], "AP75": aps[i75],
               "mAP": float(np.mean([aps[i] for i in main]))}
        rows.append(row)
        if g_c:
            evaluated.append(aps)
    ev = np.array(evaluated)
    return MapReport(
        mAP=float(ev[:, main].mean()),
        AP50=float(ev[:, i50].mean()),
        AP75=float(ev[:, i75].mean()),
        per_class=rows,
    )


def evaluate_params(params, scenes, score_thr: float = 0.05, nms_thr: float = 0.3,
                    class_names: Sequence[str] | None = None) -> MapReport:
    """Decode every scene with ``params`` and score against its full GT."""
    dets: list[Detection] = []
    for s in scenes:
        dets.extend(decode(forward(params, s.features), score_thr, nms_thr, scene_id=s.id))
    num_classes = scenes[0].num_classes if scenes else None
    return map_report(dets, gts_from_scenes(scenes), num_classes, class_names)
