"""
Scheduling strategies
=====================

Same corpus, same seed, four ways to order the batches. Batch-level
shuffling should win on the mean score; finishing one dataset before the
next forgets the early ones.
"""
from dataclasses import replace

from boom.evalkit import compare_strategies
from boom.synth import REFERENCE_HELD_OUT, REFERENCE_TRAIN, generate_corpus, reference_specs, split_ood
from boom.trainer import STRATEGIES, TrainConfig

corpus = generate_corpus(reference_specs(), seed=0)
train, ind, ood = split_ood(corpus, REFERENCE_HELD_OUT, seed=0)
print(f"{len(corpus)} datasets, {train.num_examples} training examples")

cfg = TrainConfig(**REFERENCE_TRAIN)
pipelines = {s: replace(cfg, strategy=s) for s in STRATEGIES}
table = compare_strategies(train, pipelines, {"ind": ind, "ood": ood})
print(table.to_text())
