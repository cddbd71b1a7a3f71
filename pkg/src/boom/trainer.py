"""Toy dual encoder trained with InfoNCE under four data-scheduling strategies.

The encoder is ``normalize(W2 tanh(W1 x + b1) + b2)``. Gradients are
derived by hand and checked against central finite differences
(:func:`finite_diff_gradcheck`). Parameters are held in float64 while
training and rounded to float32 in the returned checkpoint.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .checkpoint import Checkpoint
from .synth import TASK_TYPES, Corpus, Dataset, Example

STRATEGIES = ("batch_shuffle", "dataset_sequential", "task_sequential", "two_stage")
PARAM_NAMES = ("b1", "b2", "w1", "w2")


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderArch:
    d_in: int = 64
    d_hidden: int = 64
    d_out: int = 16

    def __post_init__(self):
        if min(self.d_in, self.d_hidden, self.d_out) < 1:
            raise ConfigError(f"encoder dimensions must be positive: {self}")

    @property
    def arch_id(self) -> str:
        return f"mlp-tanh-{self.d_in}-{self.d_hidden}-{self.d_out}"

    @property
    def shapes(self) -> dict:
        return {"w1": (self.d_hidden, self.d_in), "b1": (self.d_hidden,),
                "w2": (self.d_out, self.d_hidden), "b2": (self.d_out,)}

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "EncoderArch":
        d_hidden, d_in = ckpt["w1"].shape
        return cls(d_in, d_hidden, ckpt["w2"].shape[0])


@dataclass(frozen=True)
class TrainConfig:
    arch: EncoderArch = field(default_factory=EncoderArch)
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 3
    temperature: float = 0.05
    strategy: str = "batch_shuffle"
    seed: int = 0
    two_stage_retrieval_sample_ratio: float = 0.25

    def __post_init__(self):
        if isinstance(self.arch, dict):
            object.__setattr__(self, "arch", EncoderArch(**self.arch))
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.lr <= 0 or self.temperature <= 0:
            raise ConfigError("lr and temperature must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be positive and epochs non-negative")
        if not 0 < self.two_stage_retrieval_sample_ratio <= 1:
            raise ConfigError("two_stage_retrieval_sample_ratio must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc) -> "TrainConfig":
        return cls(**doc)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def init_params(arch: EncoderArch, seed: int) -> Checkpoint:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    rng = np.random.default_rng([seed, 0xE1])
    shapes = arch.shapes
    bound1 = 1.0 / math.sqrt(arch.d_in)
    bound2 = 1.0 / math.sqrt(arch.d_hidden)
    tensors = {}
    for name, bound in (("w1", bound1), ("b1", bound1), ("w2", bound2), ("b2", bound2)):
        tensors[name] = rng.uniform(-bound, bound, size=shapes[name])
    return Checkpoint(tensors, {"arch_id": arch.arch_id, "seed": str(seed), "train_examples": "0"})


def _as_params(params) -> dict:
    if isinstance(params, Checkpoint):
        return {k: params[k].astype(np.float64) for k in PARAM_NAMES}
    return params


def _forward(p, x):
    h = np.tanh(x @ p["w1"].T + p["b1"])
    u = h @ p["w2"].T + p["b2"]
    norm = np.linalg.norm(u, axis=1, keepdims=True)
    return u / norm, (x, h, norm)


def _backward(p, cache, e, de):
    x, h, norm = cache
    du = (de - e * np.sum(e * de, axis=1, keepdims=True)) / norm
    dh = du @ p["w2"]
    da = dh * (1.0 - h * h)
    return {"w2": du.T @ h, "b2": du.sum(axis=0), "w1": da.T @ x, "b1": da.sum(axis=0)}


def encode(params, x) -> np.ndarray:
    """Unit-norm embeddings for the rows of ``x``."""
    e, _ = _forward(_as_params(params), np.asarray(x, dtype=np.float64))
    return e


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def infonce_loss(q_emb, pos_emb, neg_embs, temperature: float = 1.0) -> float:
    """-log softmax of the positive cosine score against the negatives."""
    q = np.asarray(q_emb, dtype=np.float64).reshape(-1)
    p = np.asarray(pos_emb, dtype=np.float64).reshape(-1)
    if q.size == 0 or p.size == 0:
        raise ValueError("empty embedding")
    for v in (q, p):
        if abs(np.linalg.norm(v) - 1.0) > 1e-5:
            raise ValueError("embeddings must be unit-norm")
    negs = np.asarray(neg_embs, dtype=np.float64).reshape(-1, q.size) if len(neg_embs) else np.zeros((0, q.size))
    s_pos = float(q @ p) / temperature
    if len(negs) == 0:
        return 0.0
    d = negs @ q / temperature - s_pos
    top = d.max()
    if top <= 0:
        return float(np.log1p(np.exp(d).sum()))
    return float(top + np.log(np.exp(-top) + np.exp(d - top).sum()))


def _contrastive(eq, ep, en, in_batch, tau):
    """Mean InfoNCE over a batch and its gradient w.r.t. each embedding."""
    b, h = en.shape[:2]
    s_pos = np.sum(eq * ep, axis=1)
    s_hn = np.einsum("bk,bhk->bh", eq, en)
    cols = [s_pos[:, None], s_hn]
    if in_batch:
        s_ib = eq @ ep.T
        np.fill_diagonal(s_ib, -np.inf)
        cols.append(s_ib)
    logits = np.concatenate(cols, axis=1) / tau
    d = logits - logits[:, :1]
    lse = logsumexp(d, axis=1)
    loss = float(np.mean(lse))
    prob = np.exp(d - lse[:, None])
    g = prob
    g[:, 0] -= 1.0
    g /= b * tau
    g_pos, g_hn = g[:, 0], g[:, 1:1 + h]
    dq = g_pos[:, None] * ep + np.einsum("bh,bhk->bk", g_hn, en)
    dp = g_pos[:, None] * eq
    if in_batch:
        g_ib = g[:, 1 + h:]
        dq += g_ib @ ep
        dp += g_ib.T @ eq
    dn = g_hn[..., None] * eq[:, None, :]
    return loss, dq, dp, dn


def _batch_arrays(batch):
    if isinstance(batch, Dataset):
        return batch.queries, batch.positives, batch.negatives
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    names = {ex.dataset for ex in batch}
    if len(names) > 1:
        raise ValueError(f"batch mixes datasets {sorted(names)}")
    return (np.stack([ex.query for ex in batch]), np.stack([ex.positive for ex in batch]),
            np.stack([ex.hard_negatives for ex in batch]))


def loss_and_grad(params, queries, positives, negatives, in_batch: bool, temperature: float):
    p = _as_params(params)
    b, h, d = np.shape(negatives)
    if b == 0:
        raise ValueError("empty batch")
    x = np.concatenate([queries, positives, np.reshape(negatives, (b * h, d))]).astype(np.float64)
    e, cache = _forward(p, x)
    loss, dq, dp, dn = _contrastive(e[:b], e[b:2 * b], e[2 * b:].reshape(b, h, e.shape[1]), in_batch, temperature)
    de = np.concatenate([dq, dp, dn.reshape(b * h, e.shape[1])])
    return loss, _backward(p, cache, e, de)


def batch_loss(batch, params, task_type: str, temperature: float, in_batch: bool | None = None) -> float:
    """Mean InfoNCE over a single-dataset batch.

    Retrieval batches use hard negatives plus the other examples' positives;
    every other task type uses hard negatives only. ``in_batch`` overrides
    the task-type rule.
    """
    if task_type not in TASK_TYPES:
        raise ValueError(f"unknown task type {task_type!r}")
    if in_batch is None:
        in_batch = task_type == "retrieval"
    q, pos, neg = _batch_arrays(batch)
    p = _as_params(params)
    b, h, d = neg.shape
    x = np.concatenate([q, pos, neg.reshape(b * h, d)]).astype(np.float64)
    e, _ = _forward(p, x)
    loss, *_ = _contrastive(e[:b], e[b:2 * b], e[2 * b:].reshape(b, h, e.shape[1]), in_batch, temperature)
    return loss


def finite_diff_gradcheck(params, batch, eps: float = 1e-5, task_type: str = "retrieval",
                          temperature: float = 0.05, num_checks: int = 100, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks ``num_checks`` randomly chosen scalar parameters (all of them if the
    model is smaller). Relative error is ``|a - n| / max(|a|, |n|, 1e-6)``.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    p = {k: v.copy() for k, v in _as_params(params).items()}
    q, pos, neg = _batch_arrays(batch)
    in_batch = task_type == "retrieval"
    _, grads = loss_and_grad(p, q, pos, neg, in_batch, temperature)

    slots = [(k, i) for k in PARAM_NAMES for i in range(p[k].size)]
    rng = np.random.default_rng(seed)
    if len(slots) > num_checks:
        slots = [slots[j] for j in rng.choice(len(slots), num_checks, replace=False)]
    worst = 0.0
    for k, i in slots:
        flat = p[k].reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        lp, _ = loss_and_grad(p, q, pos, neg, in_batch, temperature)
        flat[i] = orig - eps
        lm, _ = loss_and_grad(p, q, pos, neg, in_batch, temperature)
        flat[i] = orig
        numeric = (lp - lm) / (2 * eps)
        analytic = grads[k].reshape(-1)[i]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# scheduling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlannedBatch:
    dataset: int
    indices: np.ndarray
    in_batch: bool
    stage: int = 0


_TASK_ORDER = {t: i for i, t in enumerate(TASK_TYPES)}


def _task_ordered(corpus: Corpus, seed: int) -> list[list[int]]:
    """Dataset indices grouped by task (classification, clustering, sts, retrieval)."""
    groups = []
    for t in TASK_TYPES:
        members = [i for i, d in enumerate(corpus.datasets) if d.task_type == t]
        if members:
            order = np.random.default_rng([seed, 9, _TASK_ORDER[t]]).permutation(len(members))
            groups.append([members[j] for j in order])
    return groups


def _blocks(corpus: Corpus, cfg: TrainConfig):
    """Training blocks: lists of (dataset index, example pool, in_batch, stage)."""
    everything = [(i, np.arange(len(d)), d.task_type == "retrieval", 0) for i, d in enumerate(corpus.datasets)]
    if cfg.strategy == "batch_shuffle":
        return [everything]
    if cfg.strategy in ("dataset_sequential", "task_sequential"):
        groups = _task_ordered(corpus, cfg.seed)
        if cfg.strategy == "task_sequential":
            return [[everything[i] for i in g] for g in groups]
        return [[everything[i]] for g in groups for i in g]
    retrieval = [e for e in everything if e[2]]
    stage2 = []
    for i, d in enumerate(corpus.datasets):
        if d.task_type == "retrieval":
            k = max(1, int(round(cfg.two_stage_retrieval_sample_ratio * len(d))))
            pool = np.sort(np.random.default_rng([cfg.seed, 11, i]).permutation(len(d))[:k])
            stage2.append((i, pool, False, 1))
        else:
            stage2.append((i, np.arange(len(d)), False, 1))
    return [b for b in (retrieval, stage2) if b]


def schedule(corpus: Corpus, cfg: TrainConfig) -> list[PlannedBatch]:
    """The full, ordered list of batches a training run will consume."""
    out = []
    for block_id, block in enumerate(_blocks(corpus, cfg)):
        for epoch in range(cfg.epochs):
            batches = []
            for di, pool, in_batch, stage in block:
                perm = pool[np.random.default_rng([cfg.seed, 7, block_id, epoch, di]).permutation(len(pool))]
                for s in range(0, len(perm), cfg.batch_size):
                    batches.append(PlannedBatch(di, perm[s:s + cfg.batch_size], in_batch, stage))
            order = np.random.default_rng([cfg.seed, 8, block_id, epoch]).permutation(len(batches))
            out.extend(batches[j] for j in order)
    return out


def distinct_examples(corpus: Corpus, cfg: TrainConfig) -> int:
    if cfg.epochs == 0:
        return 0
    seen = {}
    for block in _blocks(corpus, cfg):
        for di, pool, _, _ in block:
            seen.setdefault(di, set()).update(pool.tolist())
    return sum(len(v) for v in seen.values())


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StepRecord:
    step: int
    dataset: str
    loss: float
    indices: tuple


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)

    @property
    def mean_step_loss(self) -> float:
        if not self.steps:
            return float("nan")
        return float(np.mean([s.loss for s in self.steps]))

    @property
    def per_dataset_mean_loss(self) -> dict:
        acc = {}
        for s in self.steps:
            acc.setdefault(s.dataset, []).append(s.loss)
        return {k: float(np.mean(v)) for k, v in acc.items()}

    def final_epoch_loss(self, steps_per_epoch: int) -> float:
        tail = self.steps[-steps_per_epoch:] if steps_per_epoch else []
        return float(np.mean([s.loss for s in tail])) if tail else float("nan")

    def to_dict(self) -> dict:
        return {
            "mean_step_loss": self.mean_step_loss,
            "per_dataset_mean_loss": self.per_dataset_mean_loss,
            "steps": [{"step": s.step, "dataset": s.dataset, "loss": s.loss, "indices": list(s.indices)}
                      for s in self.steps],
        }


def _check_config(corpus: Corpus, cfg: TrainConfig):
    if len(corpus) == 0:
        raise ConfigError("corpus is empty")
    if cfg.arch.d_in != corpus.d_in:
        raise ConfigError(f"encoder d_in={cfg.arch.d_in} but corpus d_in={corpus.d_in}")
    smallest = min(len(d) for d in corpus.datasets)
    if cfg.batch_size > smallest:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds smallest dataset size {smallest}")


def train(corpus: Corpus, cfg: TrainConfig, init: Checkpoint | None = None):
    """Train an encoder on ``corpus``; returns ``(checkpoint, TrainLog)``.

    Adam (0.9, 0.999, 1e-8) on the mean batch InfoNCE. Every batch holds
    examples of a single dataset; ``cfg.strategy`` decides how batches are
    ordered. The result is a deterministic function of ``(corpus, cfg, init)``.
    """
    _check_config(corpus, cfg)
    start = init if init is not None else init_params(cfg.arch, cfg.seed)
    p = _as_params(start)
    m = {k: np.zeros_like(v) for k, v in p.items()}
    v = {k: np.zeros_like(x) for k, x in p.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    log = TrainLog()
    for t, pb in enumerate(schedule(corpus, cfg), start=1):
        d = corpus.datasets[pb.dataset]
        idx = pb.indices
        loss, g = loss_and_grad(p, d.queries[idx], d.positives[idx], d.negatives[idx],
                                pb.in_batch, cfg.temperature)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} at step {t - 1} on dataset {d.name!r}")
        log.steps.append(StepRecord(t - 1, d.name, loss, tuple(int(i) for i in idx)))
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for k in PARAM_NAMES:
            m[k] = b1 * m[k] + (1 - b1) * g[k]
            v[k] = b2 * v[k] + (1 - b2) * g[k] * g[k]
            p[k] = p[k] - cfg.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + eps)
    if not log.steps:
        return start.with_meta(train_examples=0), log
    meta = {"arch_id": cfg.arch.arch_id, "seed": str(cfg.seed),
            "train_examples": str(distinct_examples(corpus, cfg)), "strategy": cfg.strategy}
    return Checkpoint(p, meta), log


def steps_per_epoch(corpus: Corpus, batch_size: int) -> int:
    return sum(math.ceil(len(d) / batch_size) for d in corpus.datasets)


def _train_job(job):
    corpus, cfg = job
    return train(corpus, cfg)


def train_many(jobs, workers: int = 1) -> list:
    """Run independent ``(corpus, cfg)`` trainings, in worker processes when ``workers > 1``.

    Results come back in job order, so the outcome never depends on ``workers``.
    """
    jobs = list(jobs)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            return list(pool.map(_train_job, jobs))
    return [_train_job(j) for j in jobs]
