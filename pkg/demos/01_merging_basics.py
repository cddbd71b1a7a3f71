"""
Merging checkpoints
===================

Two small "fine-tunes" of one base, merged seven ways.
"""
import numpy as np

from boom.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from boom.merge import METHODS, MergeRecipe, geodesic_distance, merge, slerp

rng = np.random.default_rng(0)


def ckpt(w, n):
    return Checkpoint({"w": w}, {"arch_id": "demo", "seed": "0", "train_examples": str(n)})


base = ckpt(rng.normal(size=(4, 4)), 0)
shared = rng.normal(size=(4, 4))
models = [ckpt(base["w"] + shared + 0.5 * rng.normal(size=(4, 4)), n) for n in (100, 300, 600)]

# slerp follows the arc between the two; the endpoints come back bit for bit
a, b = models[0]["w"].ravel(), models[1]["w"].ravel()
for t in (0.0, 0.25, 0.5, 1.0):
    print(f"slerp t={t:.2f}  |x|={np.linalg.norm(slerp(a, b, t)):.4f}")
print("endpoints exact:", np.array_equal(slerp(a, b, 0.0), a) and np.array_equal(slerp(a, b, 1.0), b))

# every method through the one dispatcher
for method in METHODS:
    inputs = models[:2] if method == "slerp" else models
    out = merge(MergeRecipe(method, "size_proportional", base=base), inputs)
    d = geodesic_distance(out["w"].ravel(), models[-1]["w"].ravel())
    print(f"{method:16s} angle to the largest model: {d:.4f} rad")

# checkpoints round-trip exactly
save_checkpoint(models[0], "/tmp/demo_model.ckpt")
print("round trip exact:", load_checkpoint("/tmp/demo_model.ckpt") == models[0])
