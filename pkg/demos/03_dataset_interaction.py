"""
Which datasets fight?
=====================

A retrieval set and a copy with positive and first negative swapped cannot
both be learned. Training them jointly raises the loss (delta > 0), which
pushes their distance above 1 and splits them at a threshold of 1.0.
"""
import numpy as np

from boom.interaction import compute_interaction, cut_threshold, hierarchical_cluster
from boom.synth import DatasetSpec, generate_conflicting_pair, generate_corpus
from boom.trainer import TrainConfig

a, flipped = generate_conflicting_pair(DatasetSpec("a", "retrieval", 256, 21, 0.3, 8, 2), seed=0)
others = generate_corpus([DatasetSpec("b", "retrieval", 256, 22, 0.3, 8, 2),
                          DatasetSpec("c", "classification", 256, 23, 0.4, 8, 2)], seed=0)
corpus = others.with_datasets([a, flipped] + others.datasets)

m = compute_interaction(corpus, TrainConfig())
np.set_printoptions(precision=3, suppress=True)
print(m.names)
print("delta:\n", m.delta)
print("distance:\n", m.distance)

dg = hierarchical_cluster(m.distance, m.names)
for merge in dg.merges:
    print("merge", [m.names[i] for i in dg.members(merge.new_id)], f"at {merge.distance:.3f}")
for t in (0.05, 0.5, 1.0):
    print(f"t={t}:", cut_threshold(dg, t))
