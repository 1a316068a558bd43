"""Class-aware pixel selection on one synthetic scene.

The scores come from the scene's own class-evidence channels, standing in
for a teacher's output.
"""

import numpy as np

from saod.assign import (Candidates, ClaConfig, assign_global_topk, assign_unlabeled, selection_map)
from saod.experiment import toy_categories
from saod.model import sigmoid
from saod.scene import generate_scene, gt_pixel_mask

specs = toy_categories()
scene = generate_scene(specs, scene_id=3, grid=(20, 20), density=8.0, seed=0, clutter_density=4.0,
                       classes_per_scene=2)
print("classes in scene:", sorted(scene.class_set()), "objects:", len(scene.instances))

C = len(specs)
scores = sigmoid(3.0 * scene.features[..., :C] - 2.0)
cands = Candidates.from_scores(scores)
cfg = ClaConfig(thr=0.5, k=20, k_j=5)

truth = gt_pixel_mask(scene, scene.grid, C).any(axis=-1)


def show(title, sel):
    grid = selection_map(sel, scene.grid) > 0
    hit = np.count_nonzero(grid & truth)
    print(f"\n{title}: {len(sel)} selections, {hit} of {np.count_nonzero(grid)} cells on objects")
    for row_sel, row_gt in zip(grid, truth):
        print("".join("#" if s else ("." if g else " ") for s, g in zip(row_sel, row_gt)))


# Global top-k takes the k most confident (cell, class) pairs, whichever class.
show("global top-k", assign_global_topk(cands, cfg.k))
# Without a prompt: confidence top-k plus a per-class floor over every class seen.
show("class-aware, no prompt", assign_unlabeled(cands, None, cfg))
# With the true class list: foreground cells of prompted classes are added,
# and the per-class floor only spends budget on classes that are present.
show("class-aware, true prompt", assign_unlabeled(cands, scene.class_set(), cfg))
