"""BOOM: bagging-style subset training fused by parameter merging.

Static setting: train one encoder per sampled subset (stratified per
dataset) and merge them. Incremental setting: train an update model on the
new data plus a replayed core subset of the old corpus, then merge it with
the existing model.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .checkpoint import Checkpoint, check_compatible, digest
from .merge import TASK_VECTOR, MergeRecipe, merge, resolve_weights
from .synth import Corpus
from .trainer import (EncoderArch, TrainConfig, init_params, steps_per_epoch, train,
                      train_many)

VARIANTS = ("ratio_set", "fifty_and_remainder")


class PlanError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RunResult:
    """Merged model plus run report; unpacks as ``merged, report``.

    ``constituents`` holds the models that went into the merge.
    """
    model: Checkpoint
    report: dict
    constituents: tuple = ()

    def __iter__(self) -> Iterator:
        return iter((self.model, self.report))


def _require_shuffle(cfg: TrainConfig):
    # constituents are always trained with plain batch-level shuffling
    if cfg.strategy != "batch_shuffle":
        raise PlanError(f"BOOM trains with batch_shuffle, got strategy {cfg.strategy!r}")


def default_recipe() -> MergeRecipe:
    return MergeRecipe("multislerp", "size_proportional")


@dataclass(frozen=True)
class BaggingPlan:
    ratios: tuple = (0.2, 0.4, 0.6, 0.8, 1.0)
    variant: str = "ratio_set"
    recipe: MergeRecipe = field(default_factory=default_recipe)
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    replacement: bool = False

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if self.variant not in VARIANTS:
            raise PlanError(f"unknown variant {self.variant!r}")
        if self.variant == "ratio_set" and not self.ratios:
            raise PlanError("ratio_set needs at least one ratio")
        for i, r in enumerate(self.ratios):
            if not 0 < r <= 1:
                raise PlanError(f"ratios[{i}]={r} outside (0, 1]")
        _require_shuffle(self.train_cfg)

    @classmethod
    def from_dict(cls, doc) -> "BaggingPlan":
        """Build from a normalized ``plan`` config document."""
        return cls(ratios=doc["ratios"], variant=doc["variant"], recipe=MergeRecipe.from_dict(doc["recipe"]),
                   train_cfg=TrainConfig.from_dict(doc["train"]), seed=doc["seed"],
                   replacement=doc["replacement"])


@dataclass(frozen=True)
class IncrementalPlan:
    base_model: Checkpoint
    old_corpus: Corpus
    new_corpus: Corpus
    core_ratio: float = 0.4
    recipe: MergeRecipe = field(default_factory=lambda: MergeRecipe("multislerp", "equal"))
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.core_ratio <= 1:
            raise PlanError(f"core_ratio {self.core_ratio} outside (0, 1]")
        _require_shuffle(self.train_cfg)


def sample_subset(corpus: Corpus, ratio: float, seed: int, subset_index: int = 0,
                  replacement: bool = False) -> Corpus:
    """Stratified sample: round(ratio * |D_i|) examples from every dataset.

    Sampling is without replacement unless ``replacement`` is set. Ratio 1
    (without replacement) returns every dataset intact and in order.
    """
    if not 0 < ratio <= 1:
        raise PlanError(f"ratio {ratio} outside (0, 1]")
    if ratio == 1.0 and not replacement:
        return corpus.with_datasets(list(corpus.datasets))
    out = []
    for i, d in enumerate(corpus.datasets):
        k = int(round(ratio * len(d)))
        if k == 0:
            raise PlanError(f"ratio {ratio} leaves dataset {d.name!r} (size {len(d)}) empty")
        rng = np.random.default_rng([seed, subset_index, i])
        idx = np.sort(rng.choice(len(d), size=k, replace=replacement))
        out.append(d.take(idx))
    return corpus.with_datasets(out)


def split_fifty_and_remainder(corpus: Corpus, seed: int) -> tuple[Corpus, Corpus]:
    """Exact per-dataset partition into ceil(n/2) and floor(n/2) examples."""
    first, rest = [], []
    for i, d in enumerate(corpus.datasets):
        n = len(d)
        if n < 2:
            raise PlanError(f"dataset {d.name!r} has {n} example(s); need at least 2 to split")
        perm = np.random.default_rng([seed, 50, i]).permutation(n)
        h = math.ceil(n / 2)
        first.append(d.take(np.sort(perm[:h])))
        rest.append(d.take(np.sort(perm[h:])))
    return corpus.with_datasets(first), corpus.with_datasets(rest)


def _recipe_with_base(recipe: MergeRecipe, arch: EncoderArch, seed: int) -> MergeRecipe:
    if recipe.method in TASK_VECTOR and recipe.base is None:
        return replace(recipe, base=init_params(arch, seed))
    return recipe


def merge_or_identity(recipe: MergeRecipe, models: Sequence[Checkpoint], workers: int = 1) -> Checkpoint:
    """A merge of a single model is that model."""
    if len(models) == 1:
        return models[0]
    return merge(recipe, models, workers=workers)


def _subset_report(subset: Corpus, cfg: TrainConfig, log, ratio=None):
    spe = steps_per_epoch(subset, cfg.batch_size)
    rep = {
        "sizes": {d.name: len(d) for d in subset.datasets},
        "examples": subset.num_examples,
        "steps": spe * cfg.epochs,
        "mean_step_loss": log.mean_step_loss,
        "final_epoch_loss": log.final_epoch_loss(spe),
    }
    if ratio is not None:
        rep["ratio"] = ratio
    return rep


def subsets_for(corpus: Corpus, plan: BaggingPlan) -> list[Corpus]:
    if plan.variant == "fifty_and_remainder":
        return list(split_fifty_and_remainder(corpus, plan.seed))
    return [sample_subset(corpus, r, plan.seed, m, plan.replacement) for m, r in enumerate(plan.ratios)]


def run_static(corpus: Corpus, plan: BaggingPlan, workers: int = 1) -> RunResult:
    """Train one model per subset, then fuse them."""
    subsets = subsets_for(corpus, plan)
    results = train_many([(s, plan.train_cfg) for s in subsets], workers)
    models = [m for m, _ in results]
    recipe = _recipe_with_base(plan.recipe, plan.train_cfg.arch, plan.train_cfg.seed)
    merged = merge_or_identity(recipe, models)
    ratios = list(plan.ratios) if plan.variant == "ratio_set" else [None, None]
    report = {
        "variant": plan.variant,
        "seed": plan.seed,
        "recipe": recipe.to_dict(),
        "alphas": resolve_weights(recipe, models) if len(models) > 1 else [1.0],
        "subsets": [_subset_report(s, plan.train_cfg, log, r) for s, (_, log), r in zip(subsets, results, ratios)],
        "constituents": [digest(m) for m in models],
        "merged": digest(merged),
        "total_examples": sum(s.num_examples for s in subsets),
        "corpus_examples": corpus.num_examples,
    }
    return RunResult(merged, report, tuple(models))


def run_incremental(plan: IncrementalPlan, workers: int = 1) -> RunResult:
    """Core-subset replay plus a two-model merge; constituents are ``(W_0, W_new)``."""
    cfg = plan.train_cfg
    init = init_params(cfg.arch, cfg.seed)
    check_compatible([plan.base_model], init)
    core = sample_subset(plan.old_corpus, plan.core_ratio, plan.seed, subset_index=0)
    clash = set(core.names) & set(plan.new_corpus.names)
    if clash:
        core = core.with_datasets([d.renamed(f"{d.name}__core") if d.name in clash else d for d in core.datasets])
    train_set = plan.new_corpus.union(core) if len(plan.new_corpus) else core
    w_new, log = train(train_set, cfg)
    recipe = _recipe_with_base(plan.recipe, cfg.arch, cfg.seed)
    merged = merge(recipe, [plan.base_model, w_new], workers=workers)
    full = plan.old_corpus.num_examples + plan.new_corpus.num_examples
    report = {
        "core_ratio": plan.core_ratio,
        "seed": plan.seed,
        "recipe": recipe.to_dict(),
        "alphas": resolve_weights(recipe, [plan.base_model, w_new]),
        "core_sizes": {d.name: len(d) for d in core.datasets},
        "train_examples": train_set.num_examples,
        "full_retrain_examples": full,
        "cost_ratio": train_set.num_examples / full,
        "update": _subset_report(train_set, cfg, log),
        "base": digest(plan.base_model),
        "w_new": digest(w_new),
        "merged": digest(merged),
    }
    return RunResult(merged, report, (plan.base_model, w_new))
