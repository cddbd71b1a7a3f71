"""
Static BOOM
===========

Train on stratified subsets of 20%, 40%, ... 100% of the data and merge the
models with multislerp, weighted by subset size. Compare with one model on
everything, and with the 50% / remaining 50% split that costs the same.
"""
from boom.bagging import BaggingPlan, run_static
from boom.evalkit import eval_model
from boom.synth import REFERENCE_HELD_OUT, REFERENCE_TRAIN, generate_corpus, reference_specs, split_ood
from boom.trainer import TrainConfig, train

corpus = generate_corpus(reference_specs(), seed=0)
train_c, ind, ood = split_ood(corpus, REFERENCE_HELD_OUT, seed=0)
cfg = TrainConfig(**REFERENCE_TRAIN)

full, _ = train(train_c, cfg)
ratio_set = run_static(train_c, BaggingPlan(train_cfg=cfg))
fifty = run_static(train_c, BaggingPlan(variant="fifty_and_remainder", train_cfg=cfg))

for sub in ratio_set.report["subsets"]:
    print(f"ratio {sub['ratio']:.1f}: {sub['examples']:5d} examples, final epoch loss {sub['final_epoch_loss']:.3f}")
print("merge weights:", [round(a, 3) for a in ratio_set.report["alphas"]])

for name, model in [("full corpus", full), ("50% + remainder", fifty.model), ("ratio set", ratio_set.model)]:
    print(f"{name:16s} IND {eval_model(model, ind).mean_task:.4f}  OOD {eval_model(model, ood).mean_task:.4f}")
