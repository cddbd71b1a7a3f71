import numpy as np
import pytest

from boom.bagging import (
    BaggingPlan, IncrementalPlan, PlanError, run_incremental, run_static, sample_subset,
    split_fifty_and_remainder,
)
from boom.checkpoint import is_compatible, load_checkpoint, save_checkpoint, to_bytes
from boom.merge import MergeRecipe, merge
from boom.synth import DatasetSpec, generate_corpus
from boom.trainer import EncoderArch, TrainConfig, init_params, steps_per_epoch, train

ARCH = EncoderArch(8, 8, 4)
CFG = TrainConfig(arch=ARCH, batch_size=8, epochs=2, lr=5e-3, temperature=0.1)


def corpus(sizes=(100, 60), seed=0, first_seed=1):
    kinds = ["retrieval", "classification", "sts", "clustering"]
    specs = [DatasetSpec(f"d{i + first_seed}", kinds[i % 4], n, i + first_seed, 0.3, 4) for i, n in enumerate(sizes)]
    return generate_corpus(specs, 8, 4, 2, seed=seed)


def rows(d):
    return [r.tobytes() for r in d.records()]


# -- sampling ----------------------------------------------------------------

def test_ratio_one_is_identity():
    c = corpus()
    assert sample_subset(c, 1.0, seed=4).equals(c)


def test_half_sample_counts_and_containment():
    c = corpus((100, 60))
    s = sample_subset(c, 0.5, seed=1)
    assert [len(d) for d in s] == [50, 30]
    for src, sub in zip(c, s):
        r = rows(sub)
        assert len(set(r)) == len(r)
        assert set(r) <= set(rows(src))


def test_sampling_determinism():
    c = corpus()
    assert sample_subset(c, 0.4, 1, 2).equals(sample_subset(c, 0.4, 1, 2))
    assert not sample_subset(c, 0.4, 1, 2).equals(sample_subset(c, 0.4, 2, 2))
    assert not sample_subset(c, 0.4, 1, 2).equals(sample_subset(c, 0.4, 1, 3))


def test_sample_with_replacement_option():
    s = sample_subset(corpus((100, 60)), 1.0, 0, replacement=True)
    assert [len(d) for d in s] == [100, 60]
    assert len(set(rows(s["d1"]))) < 100


def test_sample_empty_names_dataset():
    c = corpus((100, 3))
    with pytest.raises(PlanError, match="d2"):
        sample_subset(c, 0.1, 0)


@pytest.mark.parametrize("r", [0.0, 1.5, -0.1])
def test_sample_ratio_range(r):
    with pytest.raises(PlanError):
        sample_subset(corpus(), r, 0)


@pytest.mark.parametrize("n,halves", [(10, (5, 5)), (11, (6, 5))])
def test_fifty_and_remainder_partition(n, halves):
    c = corpus((n, 20))
    a, b = split_fifty_and_remainder(c, 3)
    assert (len(a["d1"]), len(b["d1"])) == halves
    for src, x, y in zip(c, a, b):
        assert not set(rows(x)) & set(rows(y))
        assert sorted(rows(x) + rows(y)) == sorted(rows(src))
    a2, b2 = split_fifty_and_remainder(c, 3)
    assert a.equals(a2) and b.equals(b2)


def test_fifty_and_remainder_too_small():
    c = corpus((10, 20))
    c = c.with_datasets([c["d1"].take([0]), c["d2"]])
    with pytest.raises(PlanError):
        split_fifty_and_remainder(c, 0)


# -- plans -------------------------------------------------------------------

def test_plan_validation():
    with pytest.raises(PlanError):
        BaggingPlan(ratios=())
    with pytest.raises(PlanError):
        BaggingPlan(ratios=(0.5, 1.2))
    with pytest.raises(PlanError):
        BaggingPlan(variant="boosting")
    with pytest.raises(PlanError):
        BaggingPlan(train_cfg=TrainConfig(strategy="two_stage"))
    BaggingPlan(ratios=(), variant="fifty_and_remainder")


# -- static ------------------------------------------------------------------

def test_single_ratio_is_plain_training():
    c = corpus()
    merged, report = run_static(c, BaggingPlan(ratios=(1.0,), train_cfg=CFG))
    alone, _ = train(c, CFG)
    assert to_bytes(merged) == to_bytes(alone)
    assert report["alphas"] == [1.0]


def test_ratio_set_run():
    c = corpus()
    plan = BaggingPlan(train_cfg=CFG, seed=2)
    res = run_static(c, plan)
    assert len(res.constituents) == 5
    assert all(is_compatible(res.model, m) for m in res.constituents)
    sizes = [s["examples"] for s in res.report["subsets"]]
    assert sizes == [32, 64, 96, 128, 160]
    assert res.report["alphas"] == pytest.approx([s / sum(sizes) for s in sizes])
    assert to_bytes(res.model) == to_bytes(merge(plan.recipe, list(res.constituents)))
    for sub, m in zip(res.report["subsets"], res.constituents):
        assert m.meta["train_examples"] == str(sub["examples"])


def test_step_accounting():
    c = corpus()
    res = run_static(c, BaggingPlan(ratios=(0.3, 0.7), train_cfg=CFG))
    for ratio, sub in zip((0.3, 0.7), res.report["subsets"]):
        expect = sum(-(-n // CFG.batch_size) for n in sub["sizes"].values()) * CFG.epochs
        assert sub["steps"] == expect
        assert sub["steps"] == steps_per_epoch(sample_subset(c, ratio, 0, 0 if ratio == 0.3 else 1), 8) * 2


def test_fifty_and_remainder_equal_cost():
    c = corpus((101, 60))
    res = run_static(c, BaggingPlan(variant="fifty_and_remainder", train_cfg=CFG))
    assert res.report["total_examples"] == c.num_examples == res.report["corpus_examples"]
    assert len(res.constituents) == 2


def test_static_is_deterministic_and_worker_independent():
    c = corpus()
    plan = BaggingPlan(ratios=(0.5, 1.0), train_cfg=CFG)
    a = run_static(c, plan)
    b = run_static(c, plan, workers=2)
    assert to_bytes(a.model) == to_bytes(b.model)
    assert a.report == b.report


def test_task_vector_recipe_uses_shared_init_as_base():
    c = corpus()
    plan = BaggingPlan(ratios=(0.5, 1.0), recipe=MergeRecipe("task_arithmetic"), train_cfg=CFG)
    res = run_static(c, plan)
    base = init_params(ARCH, CFG.seed)
    expect = merge(MergeRecipe("task_arithmetic", base=base), list(res.constituents))
    assert to_bytes(res.model) == to_bytes(expect)


# -- incremental -------------------------------------------------------------

def test_cost_ratio_700_of_1300():
    old = corpus((500, 500))
    new = corpus((300,), first_seed=7)
    base, _ = train(old, CFG)
    res = run_incremental(IncrementalPlan(base, old, new, 0.4, train_cfg=CFG))
    assert res.report["train_examples"] == 700
    assert res.report["full_retrain_examples"] == 1300
    assert res.report["cost_ratio"] == pytest.approx(700 / 1300)


def test_incremental_remerge_from_saved_constituents(tmp_path):
    old, new = corpus((80, 60)), corpus((50,), first_seed=7)
    base, _ = train(old, CFG)
    plan = IncrementalPlan(base, old, new, 0.4, train_cfg=CFG)
    res = run_incremental(plan)
    w0, w_new = res.constituents
    save_checkpoint(w0, tmp_path / "w0.ckpt")
    save_checkpoint(w_new, tmp_path / "w_new.ckpt")
    again = merge(plan.recipe, [load_checkpoint(tmp_path / "w0.ckpt"), load_checkpoint(tmp_path / "w_new.ckpt")])
    assert to_bytes(again) == to_bytes(res.model)
    assert res.report["alphas"] == [0.5, 0.5]


def test_incremental_degenerate_full_core():
    old = corpus((80, 60))
    base, _ = train(old, CFG)
    empty = old.with_datasets([])
    res = run_incremental(IncrementalPlan(base, old, empty, 1.0, train_cfg=CFG))
    w_new, _ = train(old, CFG)
    assert to_bytes(res.constituents[1]) == to_bytes(w_new)
    assert to_bytes(res.model) == to_bytes(merge(MergeRecipe("multislerp"), [base, w_new]))


def test_incremental_name_clash_renamed():
    old = corpus((80, 60))
    new = corpus((40,))
    base, _ = train(old, CFG)
    res = run_incremental(IncrementalPlan(base, old, new, 0.5, train_cfg=CFG))
    assert set(res.report["core_sizes"]) == {"d1__core", "d2"}


def test_incremental_incompatible_base():
    old, new = corpus(), corpus((40,), first_seed=7)
    base = init_params(EncoderArch(8, 6, 4), 0)
    with pytest.raises(Exception):
        run_incremental(IncrementalPlan(base, old, new, 0.4, train_cfg=CFG))


def test_core_ratio_range():
    c = corpus()
    with pytest.raises(PlanError):
        IncrementalPlan(init_params(ARCH, 0), c, c, 0.0)


def test_run_result_unpacks_to_pair():
    c = corpus()
    merged, report = run_static(c, BaggingPlan(ratios=(1.0,), train_cfg=CFG))
    assert isinstance(report, dict) and merged.meta["arch_id"] == ARCH.arch_id
