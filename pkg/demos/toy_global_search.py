"""Genetic search against random search on a closed-form fitness landscape.

The landscape hides one target structure of 40 layers; fitness is the
percentage of layers whose dilation matches the target.  Both searches get
the same number of iterations and the same number of new individuals per
iteration.

    python demos/toy_global_search.py
"""

import numpy as np

from g2lsearch import (GlobalSearchConfig, HammingLandscape, build_global_space, random_search_baseline,
                       run_global_search)

space = build_global_space(2, 10)  # {1, 2, 4, ..., 1024}
checkpoints = (1, 10, 25, 50, 100)
ga_curves, rs_curves = [], []

for seed in range(5):
    landscape = HammingLandscape.random(space, (40,), 1000 + seed)
    cfg = GlobalSearchConfig(iterations=100, population_size=50, mutation_prob=0.2, seed=seed,
                             space=space, shape=(40,))
    ga = run_global_search(cfg, landscape)
    rs = random_search_baseline(cfg, landscape)
    ga_curves.append([h.best_fitness for h in ga.history])
    rs_curves.append([h.best_fitness for h in rs.history])
    print(f"seed {seed}: genetic {ga.best.fitness:5.1f} ({ga.evaluations} distinct evaluations), "
          f"random {rs.best.fitness:5.1f}")

print("\nmean best fitness by iteration")
print("iteration  genetic  random")
for it in checkpoints:
    print(f"{it:9d}  {np.mean([c[it - 1] for c in ga_curves]):7.1f}  {np.mean([c[it - 1] for c in rs_curves]):6.1f}")
