"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line (also echoed in pytest's terminal
summary) and then asserts the criterion at its stated tolerance. Run alone
with ``pytest tests/test_acceptance.py -s``.
"""

import itertools
import json
import math
import time

import numpy as np
import pytest

from saod import cli
from saod.assign import ClaConfig
from saod.eval import Detection, GroundTruth, average_precision, map_report
from saod.experiment import ExperimentConfig, compare, stability_run, summarize
from saod.geometry import OrientedBox, rotated_iou
from saod.loss import AhrConfig, ahr_loss, distill_loss, supervised_loss
from saod.model import ModelParams, sigmoid
from saod.prompt import ClassPrompt, classify_prediction, refine_prompt
from saod.scene import Annotation, CategorySpec, SparseAnnotations, generate_corpus, sparsify_corpus
from saod.teacher import TrainConfig, TrainState, build_samples, ema_update, train_step

from .conftest import central_diff, monte_carlo_iou_in_a, random_box, record_acceptance, rel_err
from .test_assign import run_assignment_oracle
from .test_eval import random_corpus
from .test_loss import ahr_fd_errors, check_output_grads, random_output, supervised_setup
from .test_prompt import classify_by_definition, refinement_error_counts, subsets

TOTAL = 10
MODES = ("as-written", "standard-focal")


def test_geometry_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    mc_err = 0.0
    for _ in range(1000):
        a, b = random_box(rng, 1.5), random_box(rng, 1.5)
        mc_err = max(mc_err, abs(rotated_iou(a, b) - monte_carlo_iou_in_a(a, b, 1_000_000, rng)))
    aa_err = 0.0
    for _ in range(1000):
        x1, y1, x2, y2 = rng.uniform(-2, 2, 4)
        w1, h1, w2, h2 = rng.uniform(0.5, 3, 4)
        ix = max(0.0, min(x1 + w1 / 2, x2 + w2 / 2) - max(x1 - w1 / 2, x2 - w2 / 2))
        iy = max(0.0, min(y1 + h1 / 2, y2 + h2 / 2) - max(y1 - h1 / 2, y2 - h2 / 2))
        ref = ix * iy / (w1 * h1 + w2 * h2 - ix * iy)
        aa_err = max(aa_err, abs(rotated_iou(OrientedBox(x1, y1, w1, h1), OrientedBox(x2, y2, w2, h2)) - ref))
    inter = 2 * (math.sqrt(2) - 1)
    sq_err = abs(rotated_iou(OrientedBox(0, 0, 1, 1), OrientedBox(0, 0, 1, 1, math.pi / 4))
                 - inter / (2 - inter))
    elapsed = time.perf_counter() - t0
    ok = mc_err < 1e-2 and aa_err < 1e-9 and sq_err < 1e-6 and elapsed < 60
    assert record_acceptance(1, TOTAL, "geometry oracle", ok,
                             f"max MC err {mc_err:.2e}, axis-aligned {aa_err:.1e}, "
                             f"45-degree squares {sq_err:.1e}, {elapsed:.1f}s")


def test_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = {}
    for mode in MODES:
        cfg = AhrConfig(thr=0.9, w=0.15, mode=mode)
        for branch in ("pos", "easy", "hard"):
            worst[f"ahr/{mode}/{branch}"] = ahr_fd_errors(cfg, branch, rng, n=100).max()

        anns, out, mask = supervised_setup(rng)
        scfg = AhrConfig(thr=0.7, w=0.3, mode=mode)
        out.class_logits[np.abs(sigmoid(out.class_logits) - scfg.thr) < 1e-4] += 0.1

        def sup():
            out.quality = sigmoid(out.quality_logit)
            return supervised_loss(out, anns, mask, scfg).loss

        res = supervised_loss(out, anns, mask, scfg)
        worst[f"supervised/{mode}"] = check_output_grads(sup, out, res.grads, rng, n=100).max()

        d_out = random_output(rng)
        teacher = rng.random(d_out.class_logits.shape)
        sel = rng.integers(0, [5, 6, 3], size=(12, 3))
        d_out.class_logits[np.abs(sigmoid(d_out.class_logits) - scfg.thr) < 1e-4] += 0.1
        d_res = distill_loss(d_out, teacher, sel, scfg)
        errs = []
        for _ in range(100):
            idx = tuple(int(rng.integers(s)) for s in d_out.class_logits.shape)
            fd = central_diff(lambda: distill_loss(d_out, teacher, sel, scfg).loss, d_out.class_logits, idx)
            errs.append(rel_err(d_res.grads.class_logits[idx], fd))
        worst[f"distill/{mode}"] = max(errs)
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = all(v < 1e-5 for v in worst.values()) and elapsed < 30
    assert record_acceptance(2, TOTAL, "gradient suite", ok,
                             f"{len(worst)} groups x 100 points, worst rel err {worst[top]:.1e} ({top}), "
                             f"{elapsed:.1f}s")


def test_reweighting_structure():
    p = np.linspace(1e-6, 1 - 1e-6, 2001)
    checks = []
    for mode in MODES:
        a = ahr_loss(p, False, AhrConfig(thr=1.0, w=0.15, mode=mode))
        b = ahr_loss(p, False, AhrConfig(thr=1.0, w=1.0, mode=mode))
        checks.append(np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]))
        hard = ahr_loss(p, False, AhrConfig(thr=0.5, w=1.0, mode=mode))
        plain = ahr_loss(p, False, AhrConfig(thr=1.0, w=1.0, mode=mode))
        checks.append(np.array_equal(hard[0], plain[0]) and np.array_equal(hard[1], plain[1]))
        hp = np.linspace(0.9 + 1e-4, 1 - 1e-6, 500)
        losses = np.array([ahr_loss(hp, False, AhrConfig(thr=0.9, w=float(w), mode=mode))[0]
                           for w in np.linspace(0.01, 1.0, 100)])
        checks.append(bool(np.all(np.diff(losses, axis=0) >= 0)))
    ok = all(checks)
    assert record_acceptance(3, TOTAL, "reweighting structure", ok,
                             f"{sum(checks)}/{len(checks)} checks exact (thr=1 unreachable, w=1 merge, "
                             f"monotone in w) over both modes")


def test_assignment_oracle():
    mismatches = run_assignment_oracle(500, seed=11)
    assert record_acceptance(4, TOTAL, "assignment oracle", mismatches == 0,
                             f"{mismatches}/500 random instances disagree with the brute-force construction")


def test_prompt_logic():
    pairs = list(itertools.product(subsets(4), repeat=2))
    partition_ok = len(pairs) == 256 and all(
        classify_prediction(p, g) is classify_by_definition(p, g) for p, g in pairs)
    refine_ok = True
    for pred, ann in pairs:
        sp = SparseAnnotations(0, tuple(Annotation(c, OrientedBox(1, 1, 1, 1)) for c in sorted(ann)), 0)
        once = refine_prompt(ClassPrompt(0, pred), sp)
        refine_ok &= once.classes >= pred | ann and refine_prompt(once, sp) == once
    counts = refinement_error_counts([0.0, 0.01, 0.02, 0.05, 0.10])
    monotone = all(a >= b for a, b in zip(counts, counts[1:]))
    ok = partition_ok and refine_ok and monotone
    assert record_acceptance(5, TOTAL, "prompt logic", ok,
                             f"256-pair partition {'exact' if partition_ok else 'WRONG'}, "
                             f"refine superset+idempotent {refine_ok}, errors by rate {counts}")


def test_ema_identities():
    t = ModelParams.init(9, 2, hidden=3, seed=1, scale=1.0)
    s = ModelParams.init(9, 2, hidden=3, seed=2, scale=1.0)
    exact = (ema_update(t, s, 0.0) == s and ema_update(t, s, 1.0) == t
             and all(ema_update(t, t.copy(), m) == t for m in (0.1, 0.5, 0.9, 0.999, 0.3333)))
    specs = [CategorySpec(0, "a", 3.0, (2.0, 4.0)), CategorySpec(1, "b", 1.0, (2.0, 4.0))]
    scenes = generate_corpus(specs, 8, 4.0, seed=0, grid=(10, 10))
    samples = build_samples(scenes, sparsify_corpus(scenes, 0.3, seed=0),
                            {sc.id: ClassPrompt(sc.id, sc.class_set()) for sc in scenes})
    cfg = TrainConfig(total_iters=10, burn_in_iters=6, lr=0.05, batch_size=3,
                      ahr=AhrConfig(mode="standard-focal"), cla=ClaConfig(thr=0.3, k=5, k_j=3))
    teacher = ModelParams.init(9, 2, seed=9)
    state = TrainState(ModelParams.init(9, 2, seed=0), teacher.copy())
    before = teacher.checksum()
    frozen = True
    for _ in range(cfg.burn_in_iters):
        state, _ = train_step(state, samples[:3], cfg)
        frozen &= state.teacher.checksum() == before
    ok = exact and frozen
    assert record_acceptance(6, TOTAL, "EMA identities", ok,
                             f"m=0/m=1/fixed point exact: {exact}; teacher checksum unchanged over "
                             f"{cfg.burn_in_iters} burn-in steps: {frozen}")


@pytest.fixture(scope="module")
def comparison():
    t0 = time.perf_counter()
    rows = compare(ExperimentConfig())
    return rows, time.perf_counter() - t0


@pytest.mark.slow
def test_strategy_ordering(comparison):
    rows, elapsed = comparison
    ap = summarize(rows, "AP50")
    margins = []
    for rate in sorted(ap["supervised-only"]):
        sup, topk = ap["supervised-only"][rate], ap["global-topk"][rate]
        pred, gt = ap["cla-predictor"][rate], ap["cla-gt-prompt"][rate]
        margins += [topk - sup, gt - topk, pred - topk, gt - pred]
    worst = min(margins)
    ok = worst > 0.01 and elapsed < 15 * 60
    table = "; ".join(f"{100 * r:g}%: sup {100 * ap['supervised-only'][r]:.2f} < topk "
                      f"{100 * ap['global-topk'][r]:.2f} < pred {100 * ap['cla-predictor'][r]:.2f} < gt "
                      f"{100 * ap['cla-gt-prompt'][r]:.2f}" for r in sorted(ap["supervised-only"]))
    assert record_acceptance(7, TOTAL, "strategy ordering (AP50, mean of 3 seeds)", ok,
                             f"{table}; smallest margin {100 * worst:.2f} points, {elapsed:.0f}s")


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="reweighting lowers snapshot variance at 5% but not at 10% "
                                       "labels; analysis in the design notes")
def test_reweighting_stability():
    cfg = ExperimentConfig()
    parts, ok = [], True
    for rate in cfg.rates:
        var = {}
        for w in (0.15, 1.0):
            var[w] = float(np.mean([np.var(stability_run(cfg, rate, seed, w)) for seed in cfg.seeds]))
        ok &= var[0.15] < var[1.0]
        parts.append(f"{100 * rate:g}%: var {var[0.15]:.3e} (w=0.15) vs {var[1.0]:.3e} (w=1)")
    assert record_acceptance(8, TOTAL, "reweighting stability", ok, "; ".join(parts))


def test_evaluation_oracle():
    g = GroundTruth(0, 0, OrientedBox(5, 5, 4, 2, 0.3))
    far = OrientedBox(20, 20, 4, 2)
    g2 = GroundTruth(0, 0, OrientedBox(10, 3, 3, 3))
    fixtures = [
        (average_precision([Detection(0, 0, g.box, 0.9), Detection(0, 0, far, 0.8)], [g]), 1.0),
        (average_precision([Detection(0, 0, g.box, 0.8), Detection(0, 0, far, 0.9)], [g]), 0.5),
        (average_precision([Detection(0, 0, g.box, 0.9), Detection(0, 0, g.box, 0.8),
                            Detection(0, 0, g2.box, 0.7)], [g, g2]), 0.5 + 1 / 3),
    ]
    fixtures_ok = all(abs(got - want) < 1e-12 for got, want in fixtures)
    order_ok = rank_ok = True
    for seed in range(20):
        gts, dets = random_corpus(seed)
        rep = map_report(dets, gts, 2)
        order_ok &= rep.AP50 >= rep.AP75
        for f in (lambda v: v ** 3, lambda v: 1 / (1 + math.exp(-8 * (v - 0.3))), lambda v: 0.5 * v + 0.1):
            moved = map_report([d._replace(score=f(d.score)) for d in dets], gts, 2)
            rank_ok &= (moved.mAP, moved.AP50, moved.AP75) == (rep.mAP, rep.AP50, rep.AP75)
    ok = fixtures_ok and order_ok and rank_ok
    assert record_acceptance(9, TOTAL, "evaluation oracle", ok,
                             f"hand fixtures {fixtures_ok}, AP50>=AP75 on 20 corpora {order_ok}, "
                             f"rank invariance exact {rank_ok}")


def _pipeline(root):
    gen = root / "gen.json"
    gen.write_text(json.dumps({"n_scenes": 30, "grid": [16, 16]}))
    train = root / "train.json"
    train.write_text(json.dumps({"total_iters": 60, "burn_in_iters": 30, "lr": 0.05, "ema_momentum": 0.99,
                                 "log_interval": 10, "eval_interval": 30, "distill_target": "hard",
                                 "ahr": {"mode": "standard-focal"},
                                 "cla": {"thr": 0.3, "k_ratio": 0.002, "k_j": 20}}))
    steps = [
        ("gen", "--config", gen, "--out", root / "corpus", "--seed", 3),
        ("gen", "--config", gen, "--out", root / "test", "--seed", 3, "--first-id", 900, "--n-scenes", 10),
        ("sparsify", "--corpus", root / "corpus", "--rate", 0.1, "--out", root / "ann", "--seed", 3),
        ("prompt", "--corpus", root / "corpus", "--annotations", root / "ann" / "annotations.json",
         "--mock", "--accuracy", 0.9, "--out", root / "prompts", "--seed", 3),
        ("train", "--corpus", root / "corpus", "--annotations", root / "ann" / "annotations.json",
         "--prompts", root / "prompts" / "prompts.json", "--eval-corpus", root / "test",
         "--config", train, "--out", root / "run", "--seed", 3),
        ("eval", "--checkpoint", root / "run" / "checkpoint.bin", "--corpus", root / "test",
         "--out", root / "eval"),
    ]
    for argv in steps:
        assert cli.main([str(a) for a in argv]) == 0, argv
    files = ["corpus/corpus.json", "corpus/rasters.f8", "ann/annotations.json", "prompts/prompts.json",
             "run/checkpoint.bin", "run/metrics.jsonl", "eval/report.json"]
    return {f: (root / f).read_bytes() for f in files}


def test_determinism(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a, b = _pipeline(tmp_path / "a"), _pipeline(tmp_path / "b")
    same = [f for f in a if a[f] == b[f]]
    ok = len(same) == len(a)
    assert record_acceptance(10, TOTAL, "determinism", ok,
                             f"{len(same)}/{len(a)} pipeline artifacts byte-identical across two runs "
                             f"(metrics log, checkpoint, corpus, annotations, prompts, report)")
