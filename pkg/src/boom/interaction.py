"""Pairwise dataset interaction: does training two datasets jointly help or hurt?

Every dataset is cut down to the size of the smallest one, trained alone and
in every pairwise union. The joint loss is compared to the mean of the two
solo losses:

    LA_ij = (loss_i + loss_j) / 2,   delta_ij = LC_ij - LA_ij

and turned into a distance that is below 1 for synergy and above 1 for
conflict. Average-linkage clustering on that distance groups datasets that
train well together.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .bagging import merge_or_identity
from .checkpoint import Checkpoint
from .merge import TASK_VECTOR, MergeRecipe
from .synth import Corpus
from .trainer import TrainConfig, TrainingError, init_params, train_many

LINKAGES = ("average", "single", "complete")


class InteractionError(ValueError):
    pass


def distance_from_delta(delta: float, la: float) -> float:
    """-delta/LA for synergy (delta < 0), 1 + delta/LA otherwise."""
    if delta < 0:
        return -delta / la
    return 1.0 + delta / la


@dataclass(eq=False)
class InteractionMatrix:
    names: list
    individual_loss: np.ndarray
    combined_loss: np.ndarray
    delta: np.ndarray
    distance: np.ndarray
    n_least: int = 0

    @classmethod
    def from_losses(cls, names, individual, combined, n_least=0) -> "InteractionMatrix":
        """Fill delta and distance from solo losses and the joint-loss matrix."""
        ind = np.asarray(individual, dtype=np.float64)
        lc = np.array(combined, dtype=np.float64)
        n = len(names)
        if ind.shape != (n,) or lc.shape != (n, n):
            raise InteractionError("loss shapes do not match the dataset list")
        if np.any(ind <= 0):
            raise InteractionError("individual losses must be positive")
        np.fill_diagonal(lc, ind)
        delta = np.zeros((n, n))
        dist = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                la = (ind[i] + ind[j]) / 2.0
                delta[i, j] = delta[j, i] = lc[i, j] - la
                dist[i, j] = dist[j, i] = distance_from_delta(delta[i, j], la)
        return cls(list(names), ind, lc, delta, dist, int(n_least))

    def pair(self, a: str, b: str) -> tuple[float, float]:
        i, j = self.names.index(a), self.names.index(b)
        return float(self.delta[i, j]), float(self.distance[i, j])

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "n_least": self.n_least,
            "individual_loss": self.individual_loss.tolist(),
            "combined_loss": self.combined_loss.tolist(),
            "delta": self.delta.tolist(),
            "distance": self.distance.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "InteractionMatrix":
        m = cls.from_losses(doc["names"], doc["individual_loss"], doc["combined_loss"],
                            doc.get("n_least", 0))
        return m

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def distance_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([""] + list(self.names))
        for name, row in zip(self.names, self.distance):
            w.writerow([name] + [repr(float(x)) for x in row])
        return buf.getvalue()


def equalize_subsets(corpus: Corpus, seed: int) -> Corpus:
    """Subsample every dataset, without replacement, to the smallest dataset's size."""
    if len(corpus) == 0:
        raise InteractionError("corpus is empty")
    n_least = min(len(d) for d in corpus.datasets)
    out = []
    for i, d in enumerate(corpus.datasets):
        perm = np.random.default_rng([seed, 53, i]).permutation(len(d))
        out.append(d.take(np.sort(perm[:n_least])))
    return corpus.with_datasets(out)


def compute_interaction(corpus: Corpus, cfg: TrainConfig, seed: int | None = None,
                        workers: int = 1) -> InteractionMatrix:
    """N solo runs plus N(N-1)/2 joint runs, all batch-shuffled on equalized data.

    Losses are mean step losses. ``seed`` drives the equalizing subsample and
    defaults to ``cfg.seed``.
    """
    if len(corpus) < 2:
        raise InteractionError("need at least two datasets")
    cfg = replace(cfg, strategy="batch_shuffle")
    eq = equalize_subsets(corpus, cfg.seed if seed is None else seed)
    n = len(eq)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    labels = [(eq.names[i],) for i in range(n)] + [(eq.names[i], eq.names[j]) for i, j in pairs]
    jobs = [(eq.select(lab), cfg) for lab in labels]
    try:
        results = train_many(jobs, workers)
    except TrainingError:
        # find the failing run so the error names it
        for lab, job in zip(labels, jobs):
            try:
                train_many([job])
            except TrainingError as e:
                what = "solo run" if len(lab) == 1 else "joint run"
                raise TrainingError(f"{what} {lab}: {e}") from e
        raise
    losses = [log.mean_step_loss for _, log in results]
    lc = np.zeros((n, n))
    for (i, j), loss in zip(pairs, losses[n:]):
        lc[i, j] = lc[j, i] = loss
    return InteractionMatrix.from_losses(eq.names, losses[:n], lc, len(eq.datasets[0]))


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Merge:
    a: int
    b: int
    distance: float
    new_id: int
    size: int


@dataclass(frozen=True)
class Dendrogram:
    """Merge steps in order. Leaves are 0..n-1 and step s creates cluster n + s."""

    names: tuple
    merges: tuple
    linkage: str = "average"

    def members(self, cid: int) -> list[int]:
        n = len(self.names)
        if cid < n:
            return [cid]
        m = self.merges[cid - n]
        return sorted(self.members(m.a) + self.members(m.b))

    def linkage_matrix(self) -> np.ndarray:
        """The same merges in scipy's ``(a, b, distance, size)`` layout."""
        return np.array([[m.a, m.b, m.distance, m.size] for m in self.merges], dtype=np.float64).reshape(-1, 4)

    def to_dict(self) -> dict:
        return {"names": list(self.names), "linkage": self.linkage,
                "merges": [{"a": m.a, "b": m.b, "distance": m.distance, "id": m.new_id, "size": m.size}
                           for m in self.merges]}


def _check_distance(d) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise InteractionError(f"distance matrix must be square, got shape {d.shape}")
    if not np.all(np.isfinite(d)):
        raise InteractionError("distance matrix has non-finite entries")
    if not np.array_equal(d, d.T):
        raise InteractionError("distance matrix is not symmetric")
    if np.any(d < 0):
        raise InteractionError("distance matrix has negative entries")
    if np.any(np.diag(d) != 0):
        raise InteractionError("distance matrix diagonal must be zero")
    return d


def hierarchical_cluster(d, names: Sequence[str] | None = None, linkage: str = "average") -> Dendrogram:
    """Agglomerative clustering (average linkage by default).

    Exact distance ties go to the pair whose smallest members are
    lexicographically smallest, so the result does not depend on float
    accident in the search order.
    """
    if linkage not in LINKAGES:
        raise InteractionError(f"unknown linkage {linkage!r}")
    d = _check_distance(d)
    n = len(d)
    names = tuple(names) if names is not None else tuple(str(i) for i in range(n))
    if len(names) != n:
        raise InteractionError("names and matrix size differ")
    # active cluster id -> (smallest member, size); dist keyed by id pairs
    active = {i: (i, 1) for i in range(n)}
    dist = {(i, j): d[i, j] for i in range(n) for j in range(i + 1, n)}
    merges = []
    for step in range(n - 1):
        best = None
        for (a, b), x in dist.items():
            key = (x, *sorted((active[a][0], active[b][0])))
            if best is None or key < best[0]:
                best = (key, a, b)
        _, a, b = best
        new = n + step
        (ma, na), (mb, nb) = active[a], active[b]
        merges.append(Merge(min(a, b), max(a, b), float(dist[(a, b)]), new, na + nb))
        del active[a], active[b]
        for k in active:
            dka = dist.pop((min(k, a), max(k, a)))
            dkb = dist.pop((min(k, b), max(k, b)))
            if linkage == "average":
                dist[(k, new)] = (na * dka + nb * dkb) / (na + nb)
            elif linkage == "single":
                dist[(k, new)] = min(dka, dkb)
            else:
                dist[(k, new)] = max(dka, dkb)
        del dist[(a, b)]
        active[new] = (min(ma, mb), na + nb)
    return Dendrogram(names, tuple(merges), linkage)


def cut_threshold(dg: Dendrogram, t: float) -> list[list[str]]:
    """Clusters left after applying every merge with distance <= t.

    Clusters are listed by their first member, members in input order.
    """
    if t < 0:
        raise InteractionError("threshold must be non-negative")
    n = len(dg.names)
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for m in dg.merges:
        if m.distance <= t:
            ra, rb = find(dg.members(m.a)[0]), find(dg.members(m.b)[0])
            parent[max(ra, rb)] = min(ra, rb)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return [[dg.names[i] for i in g] for _, g in sorted(groups.items())]


def train_clusters(corpus: Corpus, cfg: TrainConfig, clusters, workers: int = 1) -> list[Checkpoint]:
    """One batch-shuffled model per cluster, trained on the cluster's full data."""
    cfg = replace(cfg, strategy="batch_shuffle")
    return [m for m, _ in train_many([(corpus.select(c), cfg) for c in clusters], workers)]


def cluster_merge_pipeline(corpus: Corpus, cfg: TrainConfig, recipe: MergeRecipe, t: float,
                           matrix: InteractionMatrix | None = None, workers: int = 1) -> Checkpoint:
    """Cluster datasets by interaction distance, train per cluster, merge the cluster models."""
    if matrix is None:
        matrix = compute_interaction(corpus, cfg, workers=workers)
    if sorted(matrix.names) != sorted(corpus.names):
        raise InteractionError("interaction matrix does not cover the corpus datasets")
    clusters = cut_threshold(hierarchical_cluster(matrix.distance, matrix.names), t)
    models = train_clusters(corpus, cfg, clusters, workers)
    if recipe.method in TASK_VECTOR and recipe.base is None:
        recipe = replace(recipe, base=init_params(cfg.arch, cfg.seed))
    return merge_or_identity(recipe, models)
