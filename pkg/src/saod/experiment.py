"""Strategy comparison on seeded synthetic corpora.

A comparison trains one model per (strategy, label rate, seed) on the same
corpus and scores the returned teacher on a held-out split. Strategies are
named bundles of :class:`~saod.teacher.TrainConfig` overrides.
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .assign import ClaConfig
from .eval import evaluate_params
from .loss import AhrConfig
from .prompt import MockPredictor, query_corpus, refine_all
from .scene import CategorySpec, Scene, generate_corpus, sparsify_corpus
from .teacher import TrainConfig, build_samples, run_training

STRATEGIES: dict[str, dict] = {
    "supervised-only": {"unsup_weight": 0.0},
    "global-topk": {"assignment": "global-topk", "prompt_mode": "no-prompt"},
    "cla-no-prompt": {"assignment": "cla", "prompt_mode": "no-prompt"},
    "cla-predictor": {"assignment": "cla", "prompt_mode": "predictor"},
    "cla-gt-prompt": {"assignment": "cla", "prompt_mode": "gt-prompt"},
}


def toy_categories() -> list[CategorySpec]:
    """Five categories with a 9:1 frequency imbalance; rarer ones are easier to see."""
    names = ["plane", "ship", "storage-tank", "harbor", "bridge"]
    freq = [9.0, 5.0, 3.0, 2.0, 1.0]
    detect = [0.6, 0.7, 0.8, 0.9, 1.0]
    return [CategorySpec(i, n, f, (3.0, 6.0), d) for i, (n, f, d) in enumerate(zip(names, freq, detect))]


@dataclass(frozen=True)
class ExperimentConfig:
    n_train: int = 200
    n_test: int = 60
    grid: tuple[int, int] = (24, 24)
    density: float = 8.0
    clutter_density: float = 6.0
    classes_per_scene: int | None = 1
    rates: tuple[float, ...] = (0.05, 0.10)
    seeds: tuple[int, ...] = (0, 1, 2)
    strategies: tuple[str, ...] = tuple(STRATEGIES)
    predictor_accuracy: float = 0.9
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        total_iters=600, burn_in_iters=300, ema_momentum=0.99, lr=0.05,
        ahr=AhrConfig(mode="standard-focal"), cla=ClaConfig(thr=0.3, k_ratio=0.002, k_j=20),
        distill_target="hard", log_interval=0))

    def __post_init__(self):
        unknown = set(self.strategies) - set(STRATEGIES)
        if unknown:
            raise ValueError(f"unknown strategies {sorted(unknown)}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        d = dict(d)
        if "train" in d and isinstance(d["train"], Mapping):
            d["train"] = TrainConfig.from_dict(d["train"])
        for key in ("grid", "rates", "seeds", "strategies"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def make_corpus(cfg: ExperimentConfig, seed: int) -> tuple[list[Scene], list[Scene]]:
    """Train and held-out splits drawn from disjoint scene ids."""
    specs = toy_categories()
    kw = dict(grid=cfg.grid, clutter_density=cfg.clutter_density,
              classes_per_scene=cfg.classes_per_scene)
    train = generate_corpus(specs, cfg.n_train, cfg.density, seed, **kw)
    test = generate_corpus(specs, cfg.n_test, cfg.density, seed, first_id=1_000_000, **kw)
    return train, test


def run_one(cfg: ExperimentConfig, strategy: str, rate: float, seed: int) -> dict:
    train, test = make_corpus(cfg, seed)
    sparse = sparsify_corpus(train, rate, seed=seed)
    names = [c.name for c in toy_categories()]
    mock = MockPredictor(names, truth={s.id: s.class_set() for s in train},
                         accuracy=cfg.predictor_accuracy, seed=seed)
    prompts = refine_all(query_corpus(mock, train, names), sparse)
    tcfg = dataclasses.replace(cfg.train, seed=seed, **STRATEGIES[strategy])
    teacher, _ = run_training(build_samples(train, sparse, prompts), tcfg)
    rep = evaluate_params(teacher, test, tcfg.score_thr, tcfg.nms_thr, names)
    return {"strategy": strategy, "rate": rate, "seed": seed,
            "AP50": rep.AP50, "AP75": rep.AP75, "mAP": rep.mAP, "checksum": teacher.checksum()}


def stability_run(cfg: ExperimentConfig, rate: float, seed: int, w: float,
                  total_iters: int = 3000, interval: int = 50, n_snapshots: int = 10,
                  lr: float = 0.1, alpha: float = 0.99, gamma: float = 0.0) -> list[float]:
    """Supervised-only run; AP50 of the model at the last ``n_snapshots`` checkpoints.

    The defaults put the detector in a regime where unlabeled objects are
    scored above the hard-negative threshold, so the reweighting is active.
    """
    train, test = make_corpus(cfg, seed)
    samples = build_samples(train, sparsify_corpus(train, rate, seed=seed))
    ahr = dataclasses.replace(cfg.train.ahr, w=w, alpha=alpha, gamma=gamma)
    tcfg = dataclasses.replace(cfg.train, seed=seed, lr=lr, ahr=ahr, unsup_weight=0.0,
                               total_iters=total_iters, burn_in_iters=total_iters)
    snaps = set(range(total_iters - (n_snapshots - 1) * interval, total_iters + 1, interval))
    ap50: list[float] = []

    def snapshot(state):
        if state.iteration in snaps:
            ap50.append(evaluate_params(state.final_model(), test, tcfg.score_thr, tcfg.nms_thr).AP50)

    run_training(samples, tcfg, on_step=snapshot)
    return ap50


def compare(cfg: ExperimentConfig, jobs: int = 1) -> list[dict]:
    """Every (strategy, rate, seed) cell, in a fixed order independent of ``jobs``."""
    cells = [(s, r, sd) for r in cfg.rates for s in cfg.strategies for sd in cfg.seeds]
    if jobs <= 1:
        return [run_one(cfg, *c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_one, [cfg] * len(cells), *zip(*cells)))


def summarize(rows: Sequence[dict], metric: str = "AP50") -> dict[str, dict[float, float]]:
    """Mean of ``metric`` over seeds, keyed by strategy then rate."""
    acc: dict[str, dict[float, list[float]]] = {}
    for r in rows:
        acc.setdefault(r["strategy"], {}).setdefault(r["rate"], []).append(r[metric])
    return {s: {rate: float(np.mean(v)) for rate, v in by_rate.items()} for s, by_rate in acc.items()}


def format_table(rows: Sequence[dict], metric: str = "AP50") -> str:
    summary = summarize(rows, metric)
    rates = sorted({r["rate"] for r in rows})
    head = f"{'strategy':<18}" + "".join(f"{f'{100 * r:g}%':>10}" for r in rates)
    lines = [f"{metric} (mean over seeds, %)", head]
    for s, by_rate in summary.items():
        lines.append(f"{s:<18}" + "".join(f"{100 * by_rate[r]:>10.2f}" for r in rates))
    return "\n".join(lines)


def rows_to_json(rows: Sequence[dict]) -> str:
    return json.dumps(list(rows), indent=1, sort_keys=True) + "\n"
