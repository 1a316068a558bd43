"""A reduced strategy comparison that finishes in under a minute.

The full-size run (200 scenes, 3 seeds, 600 iterations) is
`saod compare --out results/compare`; its table is in the README.
"""

import dataclasses
import time

from saod.experiment import ExperimentConfig, compare, format_table

base = ExperimentConfig()
cfg = dataclasses.replace(base, n_train=80, n_test=30, seeds=(0,), rates=(0.10,),
                          train=dataclasses.replace(base.train, total_iters=300, burn_in_iters=150))
t0 = time.perf_counter()
rows = compare(cfg)
print(format_table(rows))
print(f"({time.perf_counter() - t0:.0f}s, one seed: expect noise of a few points)")
