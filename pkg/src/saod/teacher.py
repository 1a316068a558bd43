"""Burn-in, teacher-student mutual learning and EMA maintenance.

Training runs in two phases. During burn-in only the supervised branch is
active and the teacher does not exist yet. At iteration ``burn_in_iters``
the teacher is copied from the student; from then on each step adds the
distillation branch (teacher pseudo-labels on a weak view, student on a
strong view) and finishes with an EMA update of the teacher.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .assign import (Candidates, ClaConfig, SelectionSet, assign_global_topk, assign_sparse,
                     assign_unlabeled, selection_from_mask)
from .loss import AhrConfig, distill_loss, supervised_loss
from .model import (DenseOutput, ModelParams, NumericalError, add_params, backward, forward,
                    joint_confidence, sgd_step)
from .prompt import ClassPrompt
from .scene import Scene, SparseAnnotations, flip_features, gt_pixel_mask

log = logging.getLogger(__name__)

ASSIGNMENTS = ("cla", "global-topk")
PROMPT_MODES = ("no-prompt", "predictor", "gt-prompt")
DISTILL_TARGETS = ("joint", "prob", "hard")


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 12000
    burn_in_iters: int = 6400
    ema_momentum: float = 0.999
    unsup_weight: float = 1.0
    assignment: str = "cla"
    prompt_mode: str = "predictor"
    ahr: AhrConfig = field(default_factory=AhrConfig)
    cla: ClaConfig = field(default_factory=ClaConfig)
    seed: int = 0
    shuffle_seed: int | None = None
    lr: float = 0.0025
    momentum: float = 0.9
    weight_decay: float = 0.0001
    batch_size: int = 4
    hidden: int = 0
    view_noise: float = 0.05
    flip: bool = True
    distill_target: str = "joint"
    log_interval: int = 100
    eval_interval: int = 0
    score_thr: float = 0.05
    nms_thr: float = 0.3

    def __post_init__(self):
        if self.burn_in_iters > self.total_iters:
            raise ValueError("burn_in_iters must not exceed total_iters")
        if self.burn_in_iters < 0 or self.total_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError(f"ema_momentum must be in [0, 1], got {self.ema_momentum}")
        if self.unsup_weight < 0:
            raise ValueError("unsup_weight must be >= 0")
        if self.assignment not in ASSIGNMENTS:
            raise ValueError(f"assignment must be one of {ASSIGNMENTS}")
        if self.prompt_mode not in PROMPT_MODES:
            raise ValueError(f"prompt_mode must be one of {PROMPT_MODES}")
        if self.distill_target not in DISTILL_TARGETS:
            raise ValueError(f"distill_target must be one of {DISTILL_TARGETS}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def data_seed(self) -> int:
        return self.seed if self.shuffle_seed is None else self.shuffle_seed

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if isinstance(d.get("ahr"), Mapping):
            d["ahr"] = AhrConfig(**d["ahr"])
        if isinstance(d.get("cla"), Mapping):
            d["cla"] = ClaConfig(**d["cla"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


@dataclass
class TrainSample:
    """A scene with its sparse labels, prompt and cached GT pixels."""

    scene: Scene
    sparse: SparseAnnotations
    prompt: ClassPrompt | None = None
    gt_mask: np.ndarray | None = None
    gt_pixels: SelectionSet | None = None

    def __post_init__(self):
        if self.sparse.scene_id != self.scene.id:
            raise ValueError("annotations belong to another scene")
        if self.gt_mask is None:
            self.gt_mask = gt_pixel_mask(self.sparse.kept, self.scene.grid, self.scene.num_classes)
        if self.gt_pixels is None:
            self.gt_pixels = selection_from_mask(self.gt_mask)

    @property
    def labeled(self) -> bool:
        return bool(self.sparse.kept)


@dataclass
class TrainState:
    student: ModelParams
    teacher: ModelParams | None = None
    velocity: ModelParams | None = None
    iteration: int = 0

    def phase(self, cfg: TrainConfig) -> str:
        return "burn-in" if self.iteration < cfg.burn_in_iters else "mutual"

    def copy(self) -> "TrainState":
        return TrainState(self.student.copy(), self.teacher.copy() if self.teacher else None,
                          self.velocity.copy() if self.velocity else None, self.iteration)

    def final_model(self) -> ModelParams:
        return (self.teacher or self.student).copy()


def ema_update(teacher: ModelParams, student: ModelParams, m: float) -> ModelParams:
    """``m * teacher + (1 - m) * student``, elementwise.

    Evaluated as ``teacher + (1 - m) * (student - teacher)`` so that equal
    inputs come back bit for bit.
    """
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"EMA momentum must be in [0, 1], got {m}")
    if teacher.shapes() != student.shapes():
        raise ValueError("teacher and student parameter shapes differ")
    if m == 1.0:
        return teacher.copy()
    if m == 0.0:
        return student.copy()
    return ModelParams({k: t + (1.0 - m) * (student.arrays[k] - t) for k, t in teacher.arrays.items()})


@dataclass
class Views:
    teacher: np.ndarray
    student: np.ndarray
    flipped: bool

    def to_student(self, sel: SelectionSet) -> SelectionSet:
        if not self.flipped:
            return sel
        W = self.teacher.shape[1]
        return flip_selection(sel, W)

    def scores_to_student(self, scores: np.ndarray) -> np.ndarray:
        return scores[:, ::-1] if self.flipped else scores


def flip_selection(sel: SelectionSet, width: int) -> SelectionSet:
    return sel.mapped(lambda y, x, c: (y, width - 1 - x, c))


def branch_views(scene: Scene, seed: int = 0, iteration: int = 0, noise: float = 0.05,
                 flip: bool = True) -> Views:
    """Weak (raw) and strong (noise, random mirror) views of one scene.

    The strong view depends only on ``(seed, scene.id, iteration)``.
    """
    rng = np.random.default_rng((seed, scene.id, iteration, 0x71E5))
    flipped = bool(flip and rng.random() < 0.5)
    student = scene.features
    if noise > 0:
        student = student + rng.normal(0.0, noise, size=student.shape)
    if flipped:
        student = flip_features(student, scene.num_classes)
    return Views(scene.features, student, flipped)


def scene_prompt(sample: TrainSample, cfg: TrainConfig):
    if cfg.prompt_mode == "no-prompt":
        return None
    if cfg.prompt_mode == "gt-prompt":
        return ClassPrompt(sample.scene.id, sample.scene.class_set())
    return sample.prompt


def select_pixels(sample: TrainSample, teacher_scores: np.ndarray, cfg: TrainConfig) -> SelectionSet:
    """Pseudo-label selection for one scene in the teacher's frame."""
    cands = Candidates.from_scores(teacher_scores)
    if cfg.assignment == "global-topk":
        return assign_global_topk(cands, cfg.cla.resolve_k(len(cands)))
    prompt = scene_prompt(sample, cfg)
    if sample.labeled:
        return assign_sparse(cands, prompt, cfg.cla, sample.gt_pixels)
    return assign_unlabeled(cands, prompt, cfg.cla)


def distill_targets(teacher_out: DenseOutput, sel: SelectionSet, cfg: TrainConfig) -> np.ndarray:
    if cfg.distill_target == "hard":
        targets = np.ones_like(teacher_out.class_logits)
    elif cfg.distill_target == "prob":
        targets = teacher_out.class_prob
    else:
        targets = joint_confidence(teacher_out)
    gt = sel.with_tag("gt")
    if gt:
        idx = np.array(sorted(gt))
        targets[idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
    return targets


def train_step(state: TrainState, batch: Sequence[TrainSample], cfg: TrainConfig):
    """One optimizer step; returns ``(new_state, step_metrics)``."""
    if not batch:
        raise ValueError("empty batch")
    it = state.iteration
    mutual = it >= cfg.burn_in_iters
    teacher = state.teacher
    if mutual and teacher is None:
        teacher = state.student.copy()

    student = state.student
    grads = student.zeros_like()
    n = len(batch)
    sup_loss = unsup_loss = 0.0
    n_sel = n_labeled = 0
    for sample in batch:
        if sample.labeled:
            n_labeled += 1
            out = forward(student, sample.scene.features)
            res = supervised_loss(out, sample.sparse, sample.gt_mask, cfg.ahr)
            sup_loss += res.loss
            grads = add_params(grads, backward(student, sample.scene.features, out, res.grads), 1.0 / n)
        if mutual and cfg.unsup_weight > 0:
            views = branch_views(sample.scene, cfg.seed, it, cfg.view_noise, cfg.flip)
            t_out = forward(teacher, views.teacher)
            sel = select_pixels(sample, joint_confidence(t_out), cfg)
            targets = views.scores_to_student(distill_targets(t_out, sel, cfg))
            s_out = forward(student, views.student)
            res = distill_loss(s_out, targets, views.to_student(sel), cfg.ahr)
            unsup_loss += res.loss
            n_sel += len(sel)
            grads = add_params(grads, backward(student, views.student, s_out, res.grads),
                               cfg.unsup_weight / n)
    total = (sup_loss + cfg.unsup_weight * unsup_loss) / n
    if not math.isfinite(total):
        raise NumericalError(f"non-finite loss at iteration {it}: sup={sup_loss} unsup={unsup_loss}")
    new_student, velocity = sgd_step(student, grads, state.velocity, cfg.lr, cfg.momentum,
                                     cfg.weight_decay)
    if mutual:
        teacher = ema_update(teacher, new_student, cfg.ema_momentum)
    metrics = {"iter": it, "phase": "mutual" if mutual else "burn-in", "loss": total,
               "sup_loss": sup_loss / n, "unsup_loss": unsup_loss / n,
               "n_selected": n_sel, "n_labeled": n_labeled}
    return TrainState(new_student, teacher, velocity, it + 1), metrics


def batch_indices(n_samples: int, batch_size: int, iteration: int, seed: int) -> np.ndarray:
    """Indices of the batch used at ``iteration``; a pure function of its arguments."""
    per_epoch = max(1, n_samples // batch_size)
    epoch, pos = divmod(iteration, per_epoch)
    perm = np.random.default_rng((seed, epoch, 0xBA7C)).permutation(n_samples)
    return perm[pos * batch_size:(pos + 1) * batch_size]


class MissingPromptError(ValueError):
    pass


def build_samples(scenes: Sequence[Scene], sparse: Sequence[SparseAnnotations],
                  prompts: Mapping[int, ClassPrompt] | None = None) -> list[TrainSample]:
    by_id = {a.scene_id: a for a in sparse}
    prompts = prompts or {}
    return [TrainSample(s, by_id[s.id], prompts.get(s.id)) for s in scenes]


def run_training(samples: Sequence[TrainSample], cfg: TrainConfig,
                 evaluate: Callable[[ModelParams], Mapping] | None = None,
                 state: TrainState | None = None,
                 on_log: Callable[[dict], None] | None = None,
                 on_step: Callable[[TrainState], None] | None = None):
    """Run ``cfg.total_iters`` steps and return ``(final teacher, metrics log)``.

    Args:
        samples: training scenes; scenes without kept annotations only feed
            the distillation branch.
        cfg: run configuration.
        evaluate: optional callback mapping parameters to a metrics dict;
            called every ``cfg.eval_interval`` iterations on the model that
            would be returned at that point.
        state: resume from this state instead of a fresh initialization.
        on_log: receives every log record as it is produced.
        on_step: receives the state after every step, once that step's log
            records have been emitted (checkpointing hook).
    """
    if not samples:
        raise ValueError("no training samples")
    distills = cfg.total_iters > cfg.burn_in_iters and cfg.unsup_weight > 0
    if distills and cfg.prompt_mode == "predictor" and cfg.assignment == "cla":
        missing = [s.scene.id for s in samples if s.prompt is None]
        if missing:
            raise MissingPromptError(f"no persisted prompt for {len(missing)} scenes, e.g. {missing[:5]}")
    if state is None:
        scene = samples[0].scene
        state = TrainState(ModelParams.init(scene.features.shape[-1], scene.num_classes,
                                            cfg.hidden, cfg.seed))
    records: list[dict] = []

    def emit(rec):
        records.append(rec)
        if on_log:
            on_log(rec)

    acc: dict[str, float] = {}
    count = 0
    while state.iteration < cfg.total_iters:
        idx = batch_indices(len(samples), cfg.batch_size, state.iteration, cfg.data_seed)
        state, m = train_step(state, [samples[i] for i in idx], cfg)
        for key in ("loss", "sup_loss", "unsup_loss", "n_selected", "n_labeled"):
            acc[key] = acc.get(key, 0.0) + m[key]
        count += 1
        it = state.iteration
        if cfg.log_interval and (it % cfg.log_interval == 0 or it == cfg.total_iters):
            rec = {"type": "train", "iter": it, "phase": m["phase"]}
            rec.update({k: v / count for k, v in acc.items()})
            emit(rec)
            acc, count = {}, 0
        if evaluate and cfg.eval_interval and (it % cfg.eval_interval == 0 or it == cfg.total_iters):
            rec = {"type": "eval", "iter": it, "phase": m["phase"]}
            rec.update(evaluate(state.final_model()))
            emit(rec)
        if on_step:
            on_step(state)
    if state.teacher is None:
        state = TrainState(state.student, state.student.copy(), state.velocity, state.iteration)
    return state.teacher.copy(), records


def metrics_jsonl(records: Sequence[Mapping]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
