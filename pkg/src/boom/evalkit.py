"""Desk-scale evaluation: NDCG@k, nearest-centroid accuracy, STS Spearman."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import spearmanr

from .checkpoint import Checkpoint
from .synth import TASK_TYPES, Corpus, Dataset
from .trainer import EncoderArch, TrainConfig, encode, train

METRIC_BY_TYPE = {"retrieval": "ndcg@k", "classification": "accuracy",
                  "clustering": "accuracy", "sts": "spearman"}


class EvalError(ValueError):
    pass


def ndcg_at_k(ranking: Sequence, relevant: Mapping, k: int = 10) -> float:
    """NDCG@k with gain 2^rel - 1 and log2(rank + 1) discount."""
    if k < 1:
        raise ValueError("k must be >= 1")
    gains = sorted((g for g in relevant.values() if g > 0), reverse=True)
    if not gains:
        return 0.0
    dcg = sum((2.0 ** relevant.get(doc, 0) - 1.0) / math.log2(r + 2)
              for r, doc in enumerate(list(ranking)[:k]))
    idcg = sum((2.0 ** g - 1.0) / math.log2(r + 2) for r, g in enumerate(gains[:k]))
    return dcg / idcg


def _single_relevant_ndcg(scores, target, k):
    """NDCG@k for one relevant doc per row; ties ranked by lower doc index."""
    n = len(scores)
    s_t = scores[np.arange(n), target]
    ids = np.arange(scores.shape[1])
    ahead = (scores > s_t[:, None]) | ((scores == s_t[:, None]) & (ids[None, :] < target[:, None]))
    rank = ahead.sum(axis=1) + 1
    return np.where(rank <= k, 1.0 / np.log2(rank + 1.0), 0.0)


def score_retrieval(model, d: Dataset, k: int) -> float:
    n, h = len(d), d.H
    eq = encode(model, d.queries)
    pool = np.concatenate([d.positives, d.negatives.reshape(n * h, -1)])
    ed = encode(model, pool)
    return float(_single_relevant_ndcg(eq @ ed.T, np.arange(n), k).mean())


def score_centroid_accuracy(model, d: Dataset) -> float:
    eq = encode(model, d.queries)
    ep = encode(model, d.positives)
    classes = np.unique(d.labels)
    cents = np.stack([ep[d.labels == c].mean(axis=0) for c in classes])
    cents /= np.linalg.norm(cents, axis=1, keepdims=True)
    pred = classes[np.argmax(eq @ cents.T, axis=1)]
    return float(np.mean(pred == d.labels))


def score_sts(model, d: Dataset) -> float:
    n, h = len(d), d.H
    eq = encode(model, d.queries)
    docs = encode(model, np.concatenate([d.positives[:, None], d.negatives], axis=1).reshape(n * (h + 1), -1))
    cos = np.einsum("nk,nck->nc", eq, docs.reshape(n, h + 1, -1))
    rho = spearmanr(cos.reshape(-1), d.sims.reshape(-1)).statistic
    return float(rho) if np.isfinite(rho) else 0.0


def score_dataset(model, d: Dataset, k: int = 10) -> float:
    if d.task_type == "retrieval":
        return score_retrieval(model, d, k)
    if d.task_type == "sts":
        return score_sts(model, d)
    return score_centroid_accuracy(model, d)


@dataclass
class EvalReport:
    scores: dict
    task_types: dict
    k: int = 10

    @property
    def mean_task(self) -> float:
        return float(np.mean(list(self.scores.values())))

    @property
    def per_type(self) -> dict:
        out = {}
        for t in TASK_TYPES:
            vals = [s for n, s in self.scores.items() if self.task_types[n] == t]
            if vals:
                out[t] = float(np.mean(vals))
        return out

    @property
    def mean_task_type(self) -> float:
        return float(np.mean(list(self.per_type.values())))

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "scores": dict(self.scores),
            "task_types": dict(self.task_types),
            "metrics": {n: METRIC_BY_TYPE[t] for n, t in self.task_types.items()},
            "per_type": self.per_type,
            "mean_task": self.mean_task,
            "mean_task_type": self.mean_task_type,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def eval_model(model: Checkpoint, suite: Corpus, k: int = 10) -> EvalReport:
    arch = EncoderArch.from_checkpoint(model)
    if arch.d_in != suite.d_in:
        raise EvalError(f"model expects d_in={arch.d_in}, suite has d_in={suite.d_in}")
    scores = {d.name: score_dataset(model, d, k) for d in suite.datasets}
    return EvalReport(scores, {d.name: d.task_type for d in suite.datasets}, k)


# ---------------------------------------------------------------------------
# strategy comparison
# ---------------------------------------------------------------------------

@dataclass
class ComparisonRow:
    name: str
    ind: EvalReport
    ood: EvalReport | None = None

    @property
    def mean_task(self) -> float:
        vals = list(self.ind.scores.values()) + (list(self.ood.scores.values()) if self.ood else [])
        return float(np.mean(vals))

    def to_dict(self) -> dict:
        row = {"name": self.name, "mean_task": self.mean_task, "ind": self.ind.mean_task,
               "ood": self.ood.mean_task if self.ood else None, "per_type": self.ind.per_type,
               "scores": {**self.ind.scores, **(self.ood.scores if self.ood else {})}}
        return row


@dataclass
class ComparisonTable:
    rows: list = field(default_factory=list)

    def row(self, name) -> ComparisonRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"columns": ["name", "mean_task", "ind", "ood"], "rows": [r.to_dict() for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        types = [t for t in TASK_TYPES if any(t in r.ind.per_type for r in self.rows)]
        head = ["pipeline"] + types + ["Mean(Task)", "IND", "OOD"]
        lines = []
        for r in self.rows:
            cells = [r.name] + [f"{100 * r.ind.per_type.get(t, float('nan')):.2f}" for t in types]
            cells += [f"{100 * r.mean_task:.2f}", f"{100 * r.ind.mean_task:.2f}",
                      f"{100 * r.ood.mean_task:.2f}" if r.ood else "-"]
            lines.append(cells)
        widths = [max(len(x[i]) for x in [head] + lines) for i in range(len(head))]
        fmt = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
        rule = "-" * len(fmt(head))
        return "\n".join([fmt(head), rule] + [fmt(c) for c in lines]) + "\n"


def run_pipeline(corpus: Corpus, pipeline, workers: int = 1) -> Checkpoint:
    from .bagging import BaggingPlan, run_static

    if isinstance(pipeline, TrainConfig):
        return train(corpus, pipeline)[0]
    if isinstance(pipeline, BaggingPlan):
        return run_static(corpus, pipeline, workers=workers).model
    if callable(pipeline):
        return pipeline(corpus)
    raise TypeError(f"cannot run pipeline of type {type(pipeline).__name__}")


def compare_strategies(corpus: Corpus, pipelines: Mapping, suites: Mapping, k: int = 10,
                       workers: int = 1) -> ComparisonTable:
    """Train every named pipeline on ``corpus`` and score it on the IND/OOD suites.

    ``pipelines`` maps a row name to a :class:`TrainConfig`, a
    :class:`~boom.bagging.BaggingPlan` or a callable ``corpus -> Checkpoint``.
    ``suites`` needs an ``"ind"`` corpus and may hold an ``"ood"`` one.
    """
    table = ComparisonTable()
    for name, pipeline in pipelines.items():
        model = run_pipeline(corpus, pipeline, workers)
        ind = eval_model(model, suites["ind"], k)
        ood = eval_model(model, suites["ood"], k) if suites.get("ood") is not None else None
        table.rows.append(ComparisonRow(name, ind, ood))
    return table
