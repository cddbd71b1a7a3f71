"""
Incremental BOOM
================

A model trained on six datasets meets two new ones. Instead of retraining
on everything, train on the new data plus a 40% replay of the old, then
merge that update with the original model.
"""
import time

from boom.bagging import IncrementalPlan, run_incremental
from boom.evalkit import eval_model
from boom.synth import REFERENCE_HELD_OUT, REFERENCE_TRAIN, generate_corpus, reference_specs, split_ood
from boom.trainer import TrainConfig, train

corpus = generate_corpus(reference_specs(), seed=0)
train_c, ind, _ = split_ood(corpus, REFERENCE_HELD_OUT, seed=0)
cfg = TrainConfig(**REFERENCE_TRAIN)
old = train_c.select(["cls_a", "clu_a", "sts_a", "ret_a", "cls_b", "clu_b"])
new = train_c.select(["sts_b", "ret_b"])

w0, _ = train(old, cfg)
t = time.perf_counter()
res = run_incremental(IncrementalPlan(w0, old, new, core_ratio=0.4, train_cfg=cfg))
t_update = time.perf_counter() - t
t = time.perf_counter()
full, _ = train(old.union(new), cfg)
t_full = time.perf_counter() - t

print(f"cost ratio {res.report['cost_ratio']:.3f}, wall {t_update:.2f}s vs {t_full:.2f}s for a full retrain")
for name, model in [("W_0", w0), ("W_new", res.constituents[1]), ("merged", res.model), ("full retrain", full)]:
    rep = eval_model(model, ind)
    print(f"{name:13s} IND {rep.mean_task:.4f}  " + "  ".join(f"{k} {v:.3f}" for k, v in rep.per_type.items()))
