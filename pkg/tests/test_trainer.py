import hashlib
import math

import numpy as np
import pytest

from boom.checkpoint import to_bytes
from boom.synth import DatasetSpec, generate_corpus
from boom.trainer import (
    ConfigError, EncoderArch, TrainConfig, batch_loss, distinct_examples, encode, finite_diff_gradcheck,
    infonce_loss, init_params, schedule, steps_per_epoch, train, train_many,
)

TOY = EncoderArch(4, 4, 4)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def toy_corpus(H=3, seed=0):
    specs = [DatasetSpec("r", "retrieval", 24, 1, 0.3), DatasetSpec("c", "classification", 20, 2, 0.3, 4),
             DatasetSpec("k", "clustering", 16, 3, 0.3, 4), DatasetSpec("s", "sts", 18, 4, 0.3)]
    return generate_corpus(specs, d_in=4, d_latent=2, H=H, seed=seed)


def cfg(**kw):
    return TrainConfig(**{"arch": TOY, "batch_size": 4, "epochs": 2, **kw})


# -- loss --------------------------------------------------------------------

def test_infonce_examples():
    q = unit([1, 0])
    assert infonce_loss(q, q, []) == 0.0
    assert infonce_loss(unit([1, 0]), unit([0, 1]), [unit([0, -1])], 1.0) == pytest.approx(math.log(2), abs=1e-12)
    v = infonce_loss(q, q, [-q], 0.05)
    assert v == pytest.approx(4.248354255291589e-18, rel=1e-6)


def test_infonce_rejects_bad_input():
    with pytest.raises(ValueError):
        infonce_loss([], [], [])
    with pytest.raises(ValueError):
        infonce_loss([2.0, 0.0], unit([1, 0]), [])


def test_infonce_monotone():
    rng = np.random.default_rng(0)
    for _ in range(50):
        q = unit(rng.standard_normal(3))
        angles = np.sort(rng.uniform(0, np.pi, 2))
        base = unit(rng.standard_normal(3) - q * 0)
        perp = unit(base - (base @ q) * q)

        def at(a):
            return np.cos(a) * q + np.sin(a) * perp
        neg = [at(1.0)]
        hi, lo = infonce_loss(q, at(angles[0]), neg, 0.5), infonce_loss(q, at(angles[1]), neg, 0.5)
        assert hi < lo and hi >= 0
        pos = at(0.3)
        assert infonce_loss(q, pos, [at(angles[0])], 0.5) > infonce_loss(q, pos, [at(angles[1])], 0.5)


def _scalar_batch_loss(params, batch, task_type, tau):
    eq = encode(params, np.stack([e.query for e in batch]))
    ep = encode(params, np.stack([e.positive for e in batch]))
    total = 0.0
    for i, ex in enumerate(batch):
        negs = list(encode(params, ex.hard_negatives))
        if task_type == "retrieval":
            negs += [ep[j] for j in range(len(batch)) if j != i]
        total += infonce_loss(eq[i], ep[i], negs, tau)
    return total / len(batch)


@pytest.mark.parametrize("name", ["r", "c", "k", "s"])
def test_batch_loss_matches_scalar_loop(name):
    c = toy_corpus()
    d = c[name]
    batch = [d[i] for i in range(6)]
    p = init_params(TOY, 3)
    assert batch_loss(batch, p, d.task_type, 0.1) == pytest.approx(_scalar_batch_loss(p, batch, d.task_type, 0.1), abs=1e-6)


def test_non_retrieval_has_no_in_batch_coupling():
    c = toy_corpus()
    d = c["c"]
    p = init_params(TOY, 0)
    one = batch_loss([d[0]], p, "classification", 0.1)
    pair = [d[0], d[1]]
    moved = [d[0], type(d[1])(d.name, d[1].query + 5, d[1].positive - 3, d[1].hard_negatives * 2)]
    # batch mean = (l0 + l1) / 2, so l0 = 2 * mean - l1
    l0 = 2 * batch_loss(moved, p, "classification", 0.1) - batch_loss([moved[1]], p, "classification", 0.1)
    assert l0 == pytest.approx(one, abs=1e-12)
    assert batch_loss(pair, p, "classification", 0.1) != batch_loss(moved, p, "classification", 0.1)


def test_retrieval_pair_negative_count():
    # with H hard negatives and one other in-batch positive, example 0 sees H + 1 negatives
    c = toy_corpus(H=3)
    d = c["r"]
    p = init_params(TOY, 0)
    batch = [d[0], d[1]]
    eq, ep = encode(p, d.queries[:2]), encode(p, d.positives[:2])
    negs = list(encode(p, d.negatives[0])) + [ep[1]]
    assert len(negs) == 4
    l0 = infonce_loss(eq[0], ep[0], negs, 0.1)
    l1 = infonce_loss(eq[1], ep[1], list(encode(p, d.negatives[1])) + [ep[0]], 0.1)
    assert batch_loss(batch, p, "retrieval", 0.1) == pytest.approx((l0 + l1) / 2, abs=1e-12)


def test_mixed_batch_rejected():
    c = toy_corpus()
    with pytest.raises(ValueError):
        batch_loss([c["r"][0], c["c"][0]], init_params(TOY, 0), "retrieval", 0.1)


# -- gradients ---------------------------------------------------------------

@pytest.mark.parametrize("name", ["r", "c"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradcheck_toy(name, seed):
    c = toy_corpus(seed=seed)
    d = c[name]
    batch = [d[i] for i in range(5)]
    err = finite_diff_gradcheck(init_params(TOY, seed), batch, 1e-5, d.task_type, temperature=0.5, seed=seed)
    assert err < 1e-4


def test_gradcheck_zero_loss_batch():
    c = toy_corpus(H=0)
    d = c["c"]
    err = finite_diff_gradcheck(init_params(TOY, 0), [d[i] for i in range(4)], 1e-5, "classification")
    assert err < 1e-8


def test_gradcheck_eps_stability():
    c = toy_corpus()
    d = c["c"]
    batch = [d[i] for i in range(5)]
    p = init_params(TOY, 0)
    a = finite_diff_gradcheck(p, batch, 1e-5, "classification", temperature=0.5)
    b = finite_diff_gradcheck(p, batch, 2e-5, "classification", temperature=0.5)
    assert max(a, b) < 10 * max(min(a, b), 1e-12)


def test_gradcheck_eps_range():
    c = toy_corpus()
    with pytest.raises(ValueError):
        finite_diff_gradcheck(init_params(TOY, 0), [c["r"][0]], 1e-2)


# -- scheduling --------------------------------------------------------------

@pytest.mark.parametrize("strategy", ["batch_shuffle", "dataset_sequential", "task_sequential", "two_stage"])
def test_batches_are_pure(strategy):
    c = toy_corpus()
    for pb in schedule(c, cfg(strategy=strategy)):
        assert len(pb.indices) and pb.indices.max() < len(c.datasets[pb.dataset])


def test_batch_shuffle_epoch_coverage():
    c = toy_corpus()
    batches = schedule(c, cfg(epochs=1))
    seen = {}
    for pb in batches:
        seen.setdefault(pb.dataset, []).extend(pb.indices.tolist())
    for i, d in enumerate(c):
        assert sorted(seen[i]) == list(range(len(d)))
    assert len(batches) == steps_per_epoch(c, 4)


def test_sequential_task_order():
    c = toy_corpus()
    order = {"classification": 0, "clustering": 1, "sts": 2, "retrieval": 3}
    for strategy in ("dataset_sequential", "task_sequential"):
        tasks = [order[c.datasets[pb.dataset].task_type] for pb in schedule(c, cfg(strategy=strategy))]
        assert tasks == sorted(tasks)


def test_dataset_sequential_finishes_each_dataset():
    specs = [DatasetSpec(f"c{i}", "classification", 12, i, 0.3, 3) for i in range(3)]
    c = generate_corpus(specs, 4, 2, 2, seed=0)
    ds = [pb.dataset for pb in schedule(c, cfg(strategy="dataset_sequential"))]
    runs = [ds[0]] + [b for a, b in zip(ds, ds[1:]) if a != b]
    assert sorted(runs) == [0, 1, 2]


def test_two_stage_layout():
    c = toy_corpus()
    sched = schedule(c, cfg(strategy="two_stage", two_stage_retrieval_sample_ratio=0.25))
    stage1 = [pb for pb in sched if pb.stage == 0]
    stage2 = [pb for pb in sched if pb.stage == 1]
    assert sched == stage1 + stage2
    assert all(c.datasets[pb.dataset].task_type == "retrieval" and pb.in_batch for pb in stage1)
    assert not any(pb.in_batch for pb in stage2)
    per_epoch = {}
    for pb in stage2[:len(stage2) // 2]:
        per_epoch.setdefault(pb.dataset, set()).update(pb.indices.tolist())
    assert len(per_epoch[0]) == 6  # 0.25 * 24
    assert len(per_epoch[1]) == 20


def test_single_dataset_strategies_agree():
    c = generate_corpus([DatasetSpec("r", "retrieval", 30, 1)], 4, 2, 2, seed=0)
    runs = [schedule(c, cfg(strategy=s)) for s in ("batch_shuffle", "dataset_sequential", "task_sequential")]
    for other in runs[1:]:
        assert [(pb.dataset, pb.indices.tolist(), pb.in_batch) for pb in other] == \
               [(pb.dataset, pb.indices.tolist(), pb.in_batch) for pb in runs[0]]


# -- training ----------------------------------------------------------------

def test_epochs_zero_returns_init():
    c = toy_corpus()
    model, log = train(c, cfg(epochs=0, seed=4))
    assert model == init_params(TOY, 4).with_meta(train_examples=0)
    assert log.steps == []


def test_training_is_deterministic():
    c = toy_corpus()
    a, la = train(c, cfg())
    b, lb = train(c, cfg())
    assert hashlib.sha256(to_bytes(a)).digest() == hashlib.sha256(to_bytes(b)).digest()
    assert la.to_dict() == lb.to_dict()


def test_log_bookkeeping():
    c = toy_corpus()
    model, log = train(c, cfg())
    assert len(log.steps) == 2 * steps_per_epoch(c, 4)
    assert log.mean_step_loss == pytest.approx(np.mean([s.loss for s in log.steps]), abs=0)
    assert set(log.per_dataset_mean_loss) == set(c.names)
    assert model.meta["train_examples"] == str(c.num_examples) == str(distinct_examples(c, cfg()))


def test_two_stage_train_examples_counts_distinct():
    c = toy_corpus()
    model, _ = train(c, cfg(strategy="two_stage", two_stage_retrieval_sample_ratio=0.25))
    assert model.meta["train_examples"] == str(c.num_examples)


def test_training_reduces_loss():
    c = toy_corpus()
    _, log = train(c, cfg(epochs=8, lr=1e-2, temperature=0.1))
    n = steps_per_epoch(c, 4)
    assert log.final_epoch_loss(n) < np.mean([s.loss for s in log.steps[:n]])


@pytest.mark.parametrize("kw", [dict(strategy="roundrobin"), dict(lr=0.0), dict(batch_size=0), dict(epochs=-1),
                                dict(two_stage_retrieval_sample_ratio=0.0)])
def test_invalid_config(kw):
    with pytest.raises(ConfigError):
        cfg(**kw)


def test_config_against_corpus():
    c = toy_corpus()
    with pytest.raises(ConfigError):
        train(c, cfg(batch_size=17))
    with pytest.raises(ConfigError):
        train(c, cfg(arch=EncoderArch(5, 4, 4)))


def test_config_dict_roundtrip():
    c = cfg(strategy="two_stage")
    assert TrainConfig.from_dict(c.to_dict()) == c


def test_train_many_worker_independent():
    c = toy_corpus()
    jobs = [(c.select([n]), cfg(epochs=1, seed=i)) for i, n in enumerate(c.names)]
    serial = train_many(jobs, workers=1)
    parallel = train_many(jobs, workers=3)
    assert [to_bytes(m) for m, _ in serial] == [to_bytes(m) for m, _ in parallel]
