"""Command-line entry point: ``saod <command> [options]``.

Every command writes into ``--out`` and finishes with ``manifest.json``,
which records the resolved config, its hash, the seed and the sha256 of
every input and output. A directory whose manifest carries a different
config hash is refused before any work starts.

Exit codes: 0 success, 2 invalid input or config, 3 predictor transport
failure, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .eval import evaluate_params
from .experiment import ExperimentConfig, compare, format_table, rows_to_json, toy_categories
from .model import (NumericalError, atomic_write_bytes, atomic_write_text, forward, joint_confidence,
                    load_checkpoint, save_checkpoint)
from .prompt import (MockPredictor, PredictorError, RemotePredictor, compute_stats, format_stats_table,
                     prompts_from_json, prompts_to_json, query_corpus, refine_all)
from .scene import CategorySpec, generate_corpus, sparsify, sparsify_corpus
from .store import (FormatError, config_hash, corpus_hash, file_sha256, load_annotations, load_corpus,
                    read_json, save_annotations, save_corpus, write_json)
from .teacher import TrainConfig, TrainState, build_samples, metrics_jsonl, run_training, select_pixels

log = logging.getLogger("saod")

EXIT_OK, EXIT_INVALID, EXIT_TRANSPORT, EXIT_NUMERICAL = 0, 2, 3, 4
MANIFEST = "manifest.json"
CHECKPOINT = "checkpoint.bin"
METRICS = "metrics.jsonl"

GEN_DEFAULTS = {"n_scenes": 200, "density": 8.0, "grid": [24, 24], "clutter_density": 6.0,
                "classes_per_scene": 1, "first_id": 0, "categories": None}
GEN_SCENE_KEYS = {"clutter_strength", "clutter_signal", "noise", "geometry_noise", "num_clutter",
                  "max_overlap"}


class ValidationError(ValueError):
    pass


# run bookkeeping --------------------------------------------------------------

def _input_digest(path: Path) -> str:
    return corpus_hash(path) if path.is_dir() else file_sha256(path)


class Run:
    """Manifest handling for one command invocation."""

    def __init__(self, command: str, out: str, config: Mapping, seed: int,
                 inputs: Mapping[str, str | None]):
        self.out = Path(out)
        self.inputs = {k: {"path": str(p), "sha256": _input_digest(Path(p))}
                       for k, p in sorted(inputs.items()) if p is not None}
        self.doc = {"format": "saod-manifest", "version": 1, "command": command,
                    "config": dict(config), "seed": seed, "inputs": self.inputs}
        self.hash = config_hash({"command": command, "config": config, "seed": seed,
                                 "inputs": {k: v["sha256"] for k, v in self.inputs.items()}})
        self.doc["config_hash"] = self.hash
        prev = self.previous()
        if prev is not None and prev.get("config_hash") != self.hash:
            raise ValidationError(
                f"{self.out / MANIFEST} was written with config hash {prev.get('config_hash')}, "
                f"this run resolves to {self.hash}; use a fresh --out directory")
        self.out.mkdir(parents=True, exist_ok=True)

    def previous(self) -> dict | None:
        path = self.out / MANIFEST
        return read_json(path) if path.exists() else None

    def path(self, name: str) -> Path:
        return self.out / name

    def write(self, outputs: Sequence[str], complete: bool = True) -> None:
        doc = dict(self.doc)
        doc["complete"] = complete
        doc["outputs"] = {n: {"path": n, "sha256": file_sha256(self.out / n)} for n in sorted(outputs)}
        write_json(self.out / MANIFEST, doc)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    doc = read_json(path)
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return doc


def _check_annotations_match(ann_meta: Mapping, corpus_dir: str) -> None:
    want = ann_meta.get("corpus_hash")
    have = corpus_hash(corpus_dir)
    if want != have:
        raise ValidationError(f"annotations were made for corpus {want}, not {have} ({corpus_dir})")


def _specs_from_config(raw) -> list[CategorySpec]:
    if raw is None:
        return toy_categories()
    return [CategorySpec(int(c["id"]), c["name"], float(c.get("frequency_weight", 1.0)),
                         tuple(c.get("size_range", (2.0, 5.0))), float(c.get("detectability", 1.0)))
            for c in raw]


# commands ---------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = dict(GEN_DEFAULTS)
    user = _load_config(args.config)
    unknown = set(user) - set(GEN_DEFAULTS) - GEN_SCENE_KEYS
    if unknown:
        raise ValidationError(f"unknown gen config keys: {sorted(unknown)}")
    cfg.update(user)
    if args.n_scenes is not None:
        cfg["n_scenes"] = args.n_scenes
    if args.first_id is not None:
        cfg["first_id"] = args.first_id
    specs = _specs_from_config(cfg["categories"])
    cfg["categories"] = [dataclasses.asdict(s) for s in specs]
    run = Run("gen", args.out, cfg, args.seed, {})
    extra = {k: cfg[k] for k in GEN_SCENE_KEYS if k in cfg}
    scenes = generate_corpus(specs, int(cfg["n_scenes"]), float(cfg["density"]), args.seed,
                             grid=tuple(cfg["grid"]), first_id=int(cfg["first_id"]),
                             clutter_density=float(cfg["clutter_density"]),
                             classes_per_scene=cfg["classes_per_scene"], **extra)
    h = save_corpus(run.out, scenes, specs, meta={"seed": args.seed, "config_hash": run.hash})
    run.write(["corpus.json", "rasters.f8"])
    n_inst = sum(len(s.instances) for s in scenes)
    print(f"wrote {len(scenes)} scenes, {n_inst} instances to {run.out} (corpus {h[:12]})")
    return EXIT_OK


def cmd_sparsify(args) -> int:
    if not 0.0 <= args.rate <= 1.0:
        raise ValidationError(f"--rate must be in [0, 1], got {args.rate}")
    mode = "scene" if args.per_scene else "corpus"
    cfg = {"rate": args.rate, "at_least_one": bool(args.at_least_one), "mode": mode}
    run = Run("sparsify", args.out, cfg, args.seed, {"corpus": args.corpus})
    scenes, _, _ = load_corpus(args.corpus)
    if mode == "scene":
        sparse = [sparsify(s, args.rate, args.at_least_one, seed=args.seed) for s in scenes]
    else:
        sparse = sparsify_corpus(scenes, args.rate, seed=args.seed, at_least_one_per_class=args.at_least_one)
    meta = dict(cfg, seed=args.seed, corpus_hash=corpus_hash(args.corpus))
    save_annotations(run.path("annotations.json"), sparse, meta)
    run.write(["annotations.json"])
    kept = sum(len(a.kept) for a in sparse)
    total = kept + sum(a.removed_count for a in sparse)
    labeled = sum(not a.is_unlabeled for a in sparse)
    print(f"kept {kept}/{total} instances; {labeled}/{len(sparse)} scenes have labels")
    return EXIT_OK


def _predictor(args, names, scenes):
    if args.mock:
        truth = {s.id: s.class_set() for s in scenes}
        return MockPredictor(names, truth=truth, accuracy=args.accuracy, seed=args.seed), "mock"
    return RemotePredictor.from_env(args.endpoint), "remote"


def cmd_prompt(args) -> int:
    if args.mock and args.endpoint:
        raise ValidationError("--mock and --endpoint are mutually exclusive")
    cfg = {"source": "mock" if args.mock else "remote",
           "accuracy": args.accuracy if args.mock else None}
    run = Run("prompt", args.out, cfg, args.seed,
              {"corpus": args.corpus, "annotations": args.annotations})
    scenes, specs, _ = load_corpus(args.corpus)
    names = [c.name for c in specs]
    sparse = None
    if args.annotations:
        sparse, meta = load_annotations(args.annotations, scenes)
        _check_annotations_match(meta, args.corpus)
    client, _ = _predictor(args, names, scenes)
    raw = query_corpus(client, scenes, names, jobs=args.jobs)
    truth = {s.id: s.class_set() for s in scenes}
    rows = {"predicted": compute_stats(raw, truth)}
    refined = raw
    if sparse is not None:
        refined = refine_all(raw, sparse)
        rows[f"refined {100 * sparse_rate(sparse):.3g}%"] = compute_stats(refined, truth)
    atomic_write_text(run.path("prompts_raw.json"), prompts_to_json(raw, names))
    atomic_write_text(run.path("prompts.json"), prompts_to_json(refined, names))
    table = format_stats_table(rows)
    atomic_write_text(run.path("stats.txt"), table + "\n")
    write_json(run.path("stats.json"), {k: v.as_row() for k, v in rows.items()})
    run.write(["prompts_raw.json", "prompts.json", "stats.txt", "stats.json"])
    print(table)
    return EXIT_OK


def sparse_rate(sparse) -> float:
    kept = sum(len(a.kept) for a in sparse)
    total = kept + sum(a.removed_count for a in sparse)
    return kept / total if total else 0.0


def _train_config(args) -> TrainConfig:
    raw = _load_config(args.config)
    if args.seed_given:
        raw["seed"] = args.seed
    return TrainConfig.from_dict(raw)


def _state_from_checkpoint(path: Path) -> tuple[TrainState, dict]:
    groups, meta = load_checkpoint(path)
    if "student" not in groups:
        raise FormatError(f"{path}: checkpoint has no student parameters")
    return TrainState(groups["student"], groups.get("teacher"), groups.get("velocity"),
                      int(meta.get("iteration", 0))), meta


def cmd_train(args) -> int:
    tcfg = _train_config(args)
    cfg = tcfg.to_dict()
    run = Run("train", args.out, cfg, tcfg.seed,
              {"corpus": args.corpus, "annotations": args.annotations, "prompts": args.prompts,
               "eval_corpus": args.eval_corpus})
    ckpt_path, metrics_path = run.path(CHECKPOINT), run.path(METRICS)
    state, records = None, []
    if args.resume and ckpt_path.exists():
        state, meta = _state_from_checkpoint(ckpt_path)
        if meta.get("config_hash") != run.hash:
            raise ValidationError(f"{ckpt_path} belongs to config {meta.get('config_hash')}, not {run.hash}")
        if metrics_path.exists():
            records = [json.loads(line) for line in metrics_path.read_text().splitlines() if line]
            records = [r for r in records if r["iter"] <= state.iteration]
        print(f"resuming at iteration {state.iteration}")
    scenes, specs, _ = load_corpus(args.corpus)
    sparse, ann_meta = load_annotations(args.annotations, scenes)
    _check_annotations_match(ann_meta, args.corpus)
    names = [c.name for c in specs]
    prompts = prompts_from_json(Path(args.prompts).read_text(), names) if args.prompts else None
    evaluate = None
    if args.eval_corpus:
        test, _, _ = load_corpus(args.eval_corpus)

        def evaluate(p):
            rep = evaluate_params(p, test, tcfg.score_thr, tcfg.nms_thr, names)
            return {"AP50": rep.AP50, "AP75": rep.AP75, "mAP": rep.mAP}

    samples = build_samples(scenes, sparse, prompts)
    run.write([], complete=False)

    def checkpoint(st: TrainState) -> None:
        it = st.iteration
        if it != tcfg.total_iters and not (tcfg.log_interval and it % tcfg.log_interval == 0):
            return
        groups = {"student": st.student}
        if st.teacher is not None:
            groups["teacher"] = st.teacher
        if st.velocity is not None:
            groups["velocity"] = st.velocity
        # metrics first: a crash in between leaves extra records, which resume drops
        atomic_write_text(metrics_path, metrics_jsonl(records))
        save_checkpoint(ckpt_path, groups, {"iteration": it, "config_hash": run.hash, "config": cfg})

    if state is not None and state.iteration >= tcfg.total_iters:
        checkpoint(state)
    else:
        run_training(samples, tcfg, evaluate=evaluate, state=state, on_log=records.append, on_step=checkpoint)
    write_json(run.path("config.json"), cfg)
    run.write([CHECKPOINT, METRICS, "config.json"])
    last = next((r for r in reversed(records) if r["type"] == "eval"), None)
    print(f"trained {tcfg.total_iters} iterations -> {ckpt_path}"
          + (f"; AP50 {100 * last['AP50']:.2f}" if last and last["AP50"] is not None else ""))
    return EXIT_OK


def cmd_eval(args) -> int:
    state, meta = _state_from_checkpoint(Path(args.checkpoint))
    stored = meta.get("config", {})
    cfg = {"score_thr": stored.get("score_thr", 0.05), "nms_thr": stored.get("nms_thr", 0.3)}
    user = _load_config(args.config)
    unknown = set(user) - set(cfg)
    if unknown:
        raise ValidationError(f"unknown eval config keys: {sorted(unknown)}")
    cfg.update(user)
    run = Run("eval", args.out, cfg, args.seed, {"checkpoint": args.checkpoint, "corpus": args.corpus})
    params = state.final_model()
    if not params.is_finite():
        raise NumericalError(f"{args.checkpoint} holds non-finite parameters")
    scenes, specs, _ = load_corpus(args.corpus)
    rep = evaluate_params(params, scenes, cfg["score_thr"], cfg["nms_thr"], [c.name for c in specs])
    atomic_write_text(run.path("report.json"), rep.to_json())
    atomic_write_text(run.path("report.csv"), rep.to_csv())
    run.write(["report.json", "report.csv"])
    if not rep.ok:
        print(f"evaluation failed: {rep.error}", file=sys.stderr)
        return EXIT_INVALID
    print(f"AP50 {100 * rep.AP50:.2f}  AP75 {100 * rep.AP75:.2f}  mAP {100 * rep.mAP:.2f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    ecfg = ExperimentConfig.from_dict(_load_config(args.config))
    if args.seed_given:
        ecfg = dataclasses.replace(ecfg, seeds=tuple(args.seed + s for s in ecfg.seeds))
    cfg = ecfg.to_dict()
    run = Run("compare", args.out, cfg, args.seed, {})
    rows = compare(ecfg, jobs=args.jobs)
    atomic_write_text(run.path("rows.json"), rows_to_json(rows))
    table = format_table(rows) + "\n\n" + format_table(rows, "mAP")
    atomic_write_text(run.path("table.txt"), table + "\n")
    run.write(["rows.json", "table.txt"])
    print(table)
    return EXIT_OK


PALETTE = np.array([[230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
                    [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 190]],
                   dtype=np.uint8)


def selection_image(scores: np.ndarray, sel, scale: int) -> np.ndarray:
    """RGB image: teacher confidence in gray, selected cells in their class color."""
    H, W = scores.shape[:2]
    gray = np.clip(scores.max(axis=-1) * 160, 0, 160).astype(np.uint8)
    img = np.repeat(gray[..., None], 3, axis=-1)
    best: dict[tuple[int, int], tuple[float, int]] = {}
    for (y, x, c) in sel:
        s = sel.score((y, x, c))
        if (y, x) not in best or s > best[(y, x)][0]:
            best[(y, x)] = (s, c)
    for (y, x), (_, c) in best.items():
        img[y, x] = PALETTE[c % len(PALETTE)]
    return np.kron(img, np.ones((scale, scale, 1), dtype=np.uint8)) if scale > 1 else img


def ppm_bytes(img: np.ndarray) -> bytes:
    H, W = img.shape[:2]
    return f"P6\n{W} {H}\n255\n".encode() + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def cmd_selmap(args) -> int:
    if args.scale < 1:
        raise ValidationError("--scale must be >= 1")
    try:
        wanted = [int(t) for t in args.scenes.split(",") if t.strip()]
    except ValueError as exc:
        raise ValidationError(f"--scenes must be comma-separated integers: {exc}") from exc
    state, meta = _state_from_checkpoint(Path(args.checkpoint))
    tcfg = TrainConfig.from_dict(meta.get("config", {}))
    cfg = {"scenes": wanted, "scale": args.scale}
    run = Run("selmap", args.out, cfg, args.seed,
              {"checkpoint": args.checkpoint, "corpus": args.corpus, "annotations": args.annotations,
               "prompts": args.prompts})
    scenes, specs, _ = load_corpus(args.corpus)
    by_id = {s.id: s for s in scenes}
    missing = [i for i in wanted if i not in by_id]
    if missing:
        raise ValidationError(f"scenes {missing} are not in {args.corpus}")
    names = [c.name for c in specs]
    if args.annotations:
        sparse, ann_meta = load_annotations(args.annotations, scenes)
        _check_annotations_match(ann_meta, args.corpus)
    else:
        sparse = sparsify_corpus(scenes, 0.0)
    prompts = prompts_from_json(Path(args.prompts).read_text(), names) if args.prompts else None
    samples = {s.scene.id: s for s in build_samples(scenes, sparse, prompts)}
    params = state.final_model()
    outputs = []
    for sid in wanted:
        smp = samples[sid]
        scores = joint_confidence(forward(params, smp.scene.features))
        sel = select_pixels(smp, scores, tcfg)
        atomic_write_bytes(run.path(f"selmap_{sid}.ppm"), ppm_bytes(selection_image(scores, sel, args.scale)))
        lines = ["y x class name score tag"]
        for (y, x, c) in sorted(sel):
            lines.append(f"{y} {x} {c} {names[c]} {sel.score((y, x, c)):.6f} {'+'.join(sorted(sel.tags((y, x, c))))}")
        atomic_write_text(run.path(f"selmap_{sid}.txt"), "\n".join(lines) + "\n")
        outputs += [f"selmap_{sid}.ppm", f"selmap_{sid}.txt"]
        print(f"scene {sid}: {len(sel)} selected cells")
    run.write(outputs)
    return EXIT_OK


# argument parsing ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="saod", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, jobs=False):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="root seed (default 0)")
        sp.add_argument("--config", help="JSON config file")
        if jobs:
            sp.add_argument("--jobs", type=int, default=1, help="max parallel workers")
        return sp

    sp = common(sub.add_parser("gen", help="generate a synthetic corpus"))
    sp.add_argument("--n-scenes", type=int)
    sp.add_argument("--first-id", type=int)
    sp.set_defaults(func=cmd_gen)

    sp = common(sub.add_parser("sparsify", help="keep a fraction of the annotations"))
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--rate", type=float, required=True)
    sp.add_argument("--at-least-one", action="store_true", help="keep one instance per class per scene")
    sp.add_argument("--per-scene", action="store_true", help="sample within each scene")
    sp.set_defaults(func=cmd_sparsify)

    sp = common(sub.add_parser("prompt", help="query a class predictor for every scene"), jobs=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--annotations", help="refine predictions with these kept labels")
    sp.add_argument("--mock", action="store_true", help="use the seeded mock predictor")
    sp.add_argument("--accuracy", type=float, default=0.9, help="mock per-scene accuracy")
    sp.add_argument("--endpoint", help="remote predictor URL (default from environment)")
    sp.set_defaults(func=cmd_prompt)

    sp = common(sub.add_parser("train", help="burn-in plus teacher-student training"))
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--annotations", required=True)
    sp.add_argument("--prompts")
    sp.add_argument("--eval-corpus")
    sp.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("eval", help="score a checkpoint on a corpus"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("compare", help="strategy x label-rate comparison"), jobs=True)
    sp.set_defaults(func=cmd_compare)

    sp = common(sub.add_parser("selmap", help="export selected-pixel maps"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--annotations")
    sp.add_argument("--prompts")
    sp.add_argument("--scenes", required=True, help="comma-separated scene ids")
    sp.add_argument("--scale", type=int, default=8, help="pixels per cell")
    sp.set_defaults(func=cmd_selmap)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    if args.seed < 0:
        print("error: --seed must be >= 0", file=sys.stderr)
        return EXIT_INVALID
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except PredictorError as exc:
        print(f"predictor failure: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except (ValueError, TypeError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
