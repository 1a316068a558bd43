"""Prompt quality from a seeded mock predictor, before and after refinement."""

from saod.experiment import toy_categories
from saod.prompt import (MockPredictor, compute_stats, format_stats_table, query_corpus, refine_all)
from saod.scene import generate_corpus, sparsify_corpus

specs = toy_categories()
names = [c.name for c in specs]
scenes = generate_corpus(specs, 500, 2.0, seed=0, grid=(16, 16), classes_per_scene=2)
truth = {s.id: s.class_set() for s in scenes}

# Each scene is answered exactly with probability `accuracy`; otherwise one
# class is dropped, added or swapped.
for accuracy in (1.0, 0.9, 0.6):
    mock = MockPredictor(names, truth=truth, accuracy=accuracy, seed=0)
    raw = query_corpus(mock, scenes, names)
    rows = {"predicted": compute_stats(raw, truth)}
    # Kept labels are certain, so their classes are added to the prompt.
    # At low rates few scenes keep any label, so the change is small; it
    # can only remove missed classes, never wrongly added ones.
    for rate in (0.01, 0.05, 0.10, 0.5, 1.0):
        rows[f"+{100 * rate:g}% labels"] = compute_stats(refine_all(raw, sparsify_corpus(scenes, rate)), truth)
    print(f"\naccuracy {accuracy}")
    print(format_stats_table(rows))
