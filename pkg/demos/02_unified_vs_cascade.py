"""Joint training against the disjoint cascade on a small world.

Both systems start from the same weights and get the same step budget; the
cascade spends half on its retriever and half on its ranker. Takes about a
minute.
"""

from unirank import TrainingConfig, compare, evaluate_system, fit, generate_world, train_disjoint
from unirank.metrics import RankingSystem

world = generate_world(seed=1, n_items=600, n_queries=90, vocab_size=128)
config = TrainingConfig(seed=1, steps=400, n_train_queries=60, k=30, refresh_every=100,
                        d=16, hidden=32, d_tok=16, d_model=32, d_ff=64)
held_out = range(60, 90)

tte, lt, log = fit(world, config)
print(f"unified: total loss {log.records[0].total:.3f} -> {log.records[-1].total:.3f}")
cascade = train_disjoint(world, config)

u = evaluate_system(RankingSystem("lt-ttd", tte, lt), world, held_out, k=config.k)
c = evaluate_system(RankingSystem("cascade", cascade.l1, cascade.l2), world, held_out, k=config.k)
for rep in (u, c):
    m = rep.mean
    print(f"{rep.system:8s} NDCG@10 {m['ndcg@10']:.4f}  recall {m['recall']:.3f}  E_prop {m['e_prop']:.2f}")

cmp_ = compare(u, c)
print(f"mean UPQE {cmp_.mean_upqe:.4f} over {len(cmp_.per_query) - cmp_.excluded} queries "
      f"({cmp_.excluded} excluded where the cascade scored 0)")
