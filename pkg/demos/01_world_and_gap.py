"""A synthetic world, its grade table, and what retrieval can lose.

Generates a small world, prints the grade histogram against the design
marginal, then shows how the NDCG gap between the corpus-ideal ranking and
the best ranking inside a retrieved subset shrinks as the subset grows.
"""

import numpy as np

from unirank.metrics import error_propagation, ndcg_at
from unirank.world import design_marginal, generate_world, grade_histogram, ideal_ranking, performance_gap

world = generate_world(seed=0, n_items=1000, n_queries=50)
hist = grade_histogram(world)
print("grade histogram:", hist.tolist())
print("observed fractions:", np.round(hist / hist.sum(), 5).tolist())
print("design marginal:  ", np.round(design_marginal(world), 5).tolist())

q = 0
print(f"\nquery {q}: {world.relevant(q).size} relevant items, ideal NDCG@10 =",
      ndcg_at(ideal_ranking(world, q), world, q, 10))

# retrieve by the clean latent dot product, no noise: a strong but imperfect stage one
scores = world.item_latents @ world.query_latents[q]
order = np.argsort(-scores, kind="stable")
for k in (10, 25, 50, 100, 200):
    r = performance_gap(world, q, order[:k], cutoff=10)
    print(f"k={k:4d}  missed relevant={error_propagation(world, q, order[:k]):3d}  gap={r.gap:.4f}  bound={r.bound:.4f}")
