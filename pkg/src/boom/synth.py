"""Seeded synthetic multi-task corpora.

Every corpus shares one generating projection ``P = sqrt(d_in) * Q`` where
``Q`` has orthonormal columns, so cosine similarity between latent points is
preserved exactly by noiseless projection. Each dataset draws its latent
points from its own random subspace of the latent space (chosen by
``latent_seed``); inputs are ``P z + noise_sigma * eps``.

Task types differ in how examples are built:

* retrieval: a fresh latent point per example; hard negatives are nearby
  points in the same subspace.
* sts: a fresh latent point plus H+1 candidates at graded distances; the
  closest candidate becomes the positive.
* classification / clustering: shared class centers; query and positive are
  independent noisy draws of one center, negatives come from other classes.
"""
from __future__ import annotations

import json
import math
import os
import re
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

TASK_TYPES = ("classification", "clustering", "sts", "retrieval")
CORPUS_FORMAT = "boom-corpus"
CORPUS_VERSION = 1
RETRIEVAL_HARDNESS = 0.6


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    task_type: str
    size: int
    latent_seed: int
    noise_sigma: float = 0.5
    num_latent_classes: int = 8
    latent_rank: int | None = None
    nuisance_sigma: float = 0.0

    def __post_init__(self):
        if self.task_type not in TASK_TYPES:
            raise SynthError(f"{self.name}: unknown task type {self.task_type!r}")
        if self.size < 1:
            raise SynthError(f"{self.name}: size must be positive")
        if self.noise_sigma < 0 or self.nuisance_sigma < 0:
            raise SynthError(f"{self.name}: noise_sigma and nuisance_sigma must be non-negative")
        if self.num_latent_classes < 1:
            raise SynthError(f"{self.name}: num_latent_classes must be positive")


@dataclass(frozen=True)
class Example:
    dataset: str
    query: np.ndarray
    positive: np.ndarray
    hard_negatives: np.ndarray
    label: int = -1
    sims: np.ndarray | None = None


@dataclass(eq=False)
class Dataset:
    """Column-oriented storage for one dataset's examples.

    ``sims[i]`` holds the generator's latent cosine between query ``i`` and
    its positive (column 0) and each hard negative. ``labels`` is the query
    class for classification/clustering and -1 otherwise.
    """

    spec: DatasetSpec
    queries: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    labels: np.ndarray
    sims: np.ndarray

    def __post_init__(self):
        n = len(self.queries)
        if not (len(self.positives) == len(self.negatives) == len(self.labels) == len(self.sims) == n):
            raise SynthError(f"{self.name}: column lengths disagree")
        if self.spec.size != n:
            self.spec = replace(self.spec, size=n)

    @property
    def name(self):
        return self.spec.name

    @property
    def task_type(self):
        return self.spec.task_type

    @property
    def H(self):
        return self.negatives.shape[1]

    @property
    def d_in(self):
        return self.queries.shape[1]

    def __len__(self):
        return len(self.queries)

    def __getitem__(self, i) -> Example:
        return Example(self.name, self.queries[i], self.positives[i], self.negatives[i],
                       int(self.labels[i]), self.sims[i])

    def take(self, indices, name: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        spec = replace(self.spec, size=len(idx), name=name or self.name)
        return Dataset(spec, self.queries[idx], self.positives[idx], self.negatives[idx],
                       self.labels[idx], self.sims[idx])

    def renamed(self, name: str) -> "Dataset":
        return Dataset(replace(self.spec, name=name), self.queries, self.positives,
                       self.negatives, self.labels, self.sims)

    def records(self) -> np.ndarray:
        """Flat float32 records: query, positive, negatives, label, sims."""
        n = len(self)
        return np.concatenate([
            self.queries.reshape(n, -1), self.positives.reshape(n, -1),
            self.negatives.reshape(n, -1), self.labels.reshape(n, 1).astype(np.float32),
            self.sims.reshape(n, -1)], axis=1).astype("<f4")

    def equals(self, other: "Dataset") -> bool:
        return self.spec == other.spec and np.array_equal(self.records(), other.records())


@dataclass(eq=False)
class Corpus:
    datasets: list
    d_in: int
    d_latent: int
    H: int
    seed: int = 0

    def __post_init__(self):
        names = [d.name for d in self.datasets]
        if len(set(names)) != len(names):
            raise SynthError(f"dataset names must be unique: {names}")
        for d in self.datasets:
            if d.d_in != self.d_in or d.H != self.H:
                raise SynthError(f"{d.name}: expected d_in={self.d_in}, H={self.H}")

    @property
    def names(self):
        return [d.name for d in self.datasets]

    @property
    def specs(self):
        return [d.spec for d in self.datasets]

    def __len__(self):
        return len(self.datasets)

    def __iter__(self):
        return iter(self.datasets)

    def __getitem__(self, name) -> Dataset:
        for d in self.datasets:
            if d.name == name:
                return d
        raise KeyError(name)

    @property
    def num_examples(self) -> int:
        return sum(len(d) for d in self.datasets)

    def with_datasets(self, datasets) -> "Corpus":
        return Corpus(list(datasets), self.d_in, self.d_latent, self.H, self.seed)

    def select(self, names) -> "Corpus":
        return self.with_datasets([self[n] for n in names])

    def union(self, other: "Corpus") -> "Corpus":
        if (other.d_in, other.H) != (self.d_in, self.H):
            raise SynthError("cannot union corpora with different dimensions")
        return self.with_datasets(list(self.datasets) + list(other.datasets))

    def equals(self, other: "Corpus") -> bool:
        return ((self.d_in, self.d_latent, self.H, self.seed) == (other.d_in, other.d_latent, other.H, other.seed)
                and len(self) == len(other)
                and all(a.equals(b) for a, b in zip(self.datasets, other.datasets)))


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def generating_projection(d_in: int, d_latent: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0])
    q, _ = np.linalg.qr(rng.standard_normal((d_in, d_latent)))
    return math.sqrt(d_in) * q


def latent_basis(d_latent: int, rank: int, latent_seed: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 1, latent_seed])
    q, _ = np.linalg.qr(rng.standard_normal((d_latent, rank)))
    return q


def _rank(spec: DatasetSpec, d_latent: int) -> int:
    r = spec.latent_rank if spec.latent_rank is not None else max(1, d_latent // 2)
    if not 1 <= r <= d_latent:
        raise SynthError(f"{spec.name}: latent_rank {r} outside [1, {d_latent}]")
    return r


def _unit_rows(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _sample_latent(rng, basis, shape):
    g = rng.standard_normal(shape + (basis.shape[1],))
    return _unit_rows(g @ basis.T)


def _perturb(rng, z, basis, scale):
    g = rng.standard_normal(z.shape[:-1] + (basis.shape[1],)) @ basis.T
    scale = np.asarray(scale)[..., None] if np.ndim(scale) else scale
    return _unit_rows(z + scale * g)


def _generate_dataset(spec: DatasetSpec, proj, H, seed, stream) -> Dataset:
    d_in, d_latent = proj.shape
    basis = latent_basis(d_latent, _rank(spec, d_latent), spec.latent_seed, seed)
    rng = np.random.default_rng([seed, 2, spec.latent_seed, stream])
    n = spec.size
    labels = np.full(n, -1, dtype=np.int64)

    if spec.task_type in ("classification", "clustering"):
        c = spec.num_latent_classes
        crng = np.random.default_rng([seed, 3, spec.latent_seed])
        centers = _sample_latent(crng, basis, (c,))
        labels = rng.permutation(np.arange(n) % c)
        zq = centers[labels]
        zp = zq
        if H:
            if c < 2:
                raise SynthError(f"{spec.name}: negatives need at least 2 classes")
            offs = rng.integers(1, c, size=(n, H))
            neg_labels = (labels[:, None] + offs) % c
            zn = centers[neg_labels]
        else:
            zn = np.zeros((n, 0, d_latent))
    elif spec.task_type == "retrieval":
        zq = _sample_latent(rng, basis, (n,))
        zp = zq
        zn = _perturb(rng, np.repeat(zq[:, None, :], H, axis=1), basis, RETRIEVAL_HARDNESS)
    else:
        zq = _sample_latent(rng, basis, (n,))
        spread = rng.uniform(0.15, 1.5, size=(n, H + 1))
        cand = _perturb(rng, np.repeat(zq[:, None, :], H + 1, axis=1), basis, spread)
        cs = np.einsum("nk,nck->nc", zq, cand)
        order = np.argsort(-cs, axis=1, kind="stable")
        cand = np.take_along_axis(cand, order[..., None], axis=1)
        zp, zn = cand[:, 0], cand[:, 1:]

    sims = np.concatenate([np.einsum("nk,nk->n", zq, zp)[:, None],
                           np.einsum("nk,nhk->nh", zq, zn)], axis=1)
    sigma, nu = spec.noise_sigma, spec.nuisance_sigma
    complement = np.eye(d_latent) - basis @ basis.T

    def emit(z):
        if nu:
            z = z + nu * rng.standard_normal(z.shape) @ complement
        return (z @ proj.T + sigma * rng.standard_normal(z.shape[:-1] + (d_in,))).astype(np.float32)

    return Dataset(spec, emit(zq), emit(zp), emit(zn).reshape(n, H, d_in), labels,
                   sims.astype(np.float32))


def generate_corpus(specs: Sequence[DatasetSpec], d_in: int = 64, d_latent: int = 8,
                    H: int = 7, seed: int = 0) -> Corpus:
    if d_latent < 1 or d_in < d_latent:
        raise SynthError(f"need 1 <= d_latent <= d_in, got d_latent={d_latent}, d_in={d_in}")
    if H < 0:
        raise SynthError("H must be non-negative")
    for s in specs:
        if s.size < H + 1:
            raise SynthError(f"{s.name}: size {s.size} < H + 1 = {H + 1}")
    proj = generating_projection(d_in, d_latent, seed)
    datasets = [_generate_dataset(s, proj, H, seed, i) for i, s in enumerate(specs)]
    return Corpus(datasets, d_in, d_latent, H, seed)


def generate_conflicting_pair(base_spec: DatasetSpec, seed: int, d_in: int = 64,
                              d_latent: int = 8, H: int = 7) -> tuple[Dataset, Dataset]:
    """Dataset A and a copy A' whose positive and first hard negative are swapped."""
    if H == 0:
        raise SynthError("a conflicting pair needs at least one hard negative")
    a = generate_corpus([base_spec], d_in, d_latent, H, seed).datasets[0]
    pos = a.negatives[:, 0].copy()
    neg = a.negatives.copy()
    neg[:, 0] = a.positives
    sims = a.sims.copy()
    sims[:, [0, 1]] = sims[:, [1, 0]]
    flipped = Dataset(replace(a.spec, name=f"{a.name}_flip"), a.queries.copy(), pos, neg,
                      a.labels.copy(), sims)
    return a, flipped


class OODSplit(NamedTuple):
    train: Corpus
    held_out: Corpus
    ood: Corpus


def split_ood(corpus: Corpus, held_out_fraction: float, seed: int,
              ood_specs: Sequence[DatasetSpec] | None = None) -> OODSplit:
    """Per-dataset train/held-out partition plus an OOD suite from unseen latent seeds.

    Without ``ood_specs`` a single retrieval dataset is generated whose
    latent seed is larger than every training seed.
    """
    if not 0 < held_out_fraction < 1:
        raise SynthError("held_out_fraction must lie in (0, 1)")
    train, held = [], []
    for i, d in enumerate(corpus.datasets):
        n = len(d)
        k = int(round(held_out_fraction * n))
        if k == 0 or k == n:
            raise SynthError(f"{d.name}: fraction {held_out_fraction} leaves an empty split of {n}")
        perm = np.random.default_rng([seed, 4, i]).permutation(n)
        held.append(d.take(np.sort(perm[:k])))
        train.append(d.take(np.sort(perm[k:])))

    seen = {d.spec.latent_seed for d in corpus.datasets}
    if ood_specs is None:
        sizes = sorted(len(d) for d in corpus.datasets)
        sigmas = [d.spec.noise_sigma for d in corpus.datasets]
        ood_specs = [DatasetSpec("ood_retrieval", "retrieval", max(sizes[len(sizes) // 2], corpus.H + 1),
                                 max(seen) + 1000 + seed, float(np.mean(sigmas)))]
    for s in ood_specs:
        if s.latent_seed in seen:
            raise SynthError(f"OOD dataset {s.name} reuses training latent seed {s.latent_seed}")
    proj = generating_projection(corpus.d_in, corpus.d_latent, corpus.seed)
    ood = [_generate_dataset(s, proj, corpus.H, corpus.seed, 10_000 + seed * 101 + i)
           for i, s in enumerate(ood_specs)]
    return OODSplit(corpus.with_datasets(train), corpus.with_datasets(held), corpus.with_datasets(ood))


def reference_specs(scale: float = 1.0) -> list[DatasetSpec]:
    """Eight-dataset reference corpus, two per task type.

    Every dataset carries mild off-subspace nuisance jitter, so each one
    rewards invariance to directions the others need. That is what makes
    sequential schedules forget.
    """
    def n(x):
        return int(round(x * scale))
    rank, nu = 4, 0.2
    return [
        DatasetSpec("cls_a", "classification", n(640), 11, 0.8, 8, rank, nu),
        DatasetSpec("cls_b", "classification", n(512), 12, 0.8, 8, rank, nu),
        DatasetSpec("clu_a", "clustering", n(640), 13, 0.8, 16, rank, nu),
        DatasetSpec("clu_b", "clustering", n(512), 14, 0.8, 16, rank, nu),
        DatasetSpec("sts_a", "sts", n(640), 15, 0.4, 8, rank, nu),
        DatasetSpec("sts_b", "sts", n(512), 16, 0.4, 8, rank, nu),
        DatasetSpec("ret_a", "retrieval", n(768), 17, 0.3, 8, rank, nu),
        DatasetSpec("ret_b", "retrieval", n(640), 18, 0.3, 8, rank, nu),
    ]


REFERENCE_TRAIN = {"epochs": 12, "lr": 1e-3, "batch_size": 32, "temperature": 0.05, "seed": 0}
REFERENCE_HELD_OUT = 0.2


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _file_name(i, name):
    return f"{i:03d}_{re.sub(r'[^A-Za-z0-9_.-]+', '_', name)}.bin"


def save_corpus(corpus: Corpus, path) -> None:
    os.makedirs(path, exist_ok=True)
    entries = []
    for i, d in enumerate(corpus.datasets):
        fname = _file_name(i, d.name)
        with open(os.path.join(path, fname), "wb") as f:
            f.write(d.records().tobytes())
        entries.append({"spec": asdict(d.spec), "file": fname, "size": len(d)})
    doc = {
        "format": CORPUS_FORMAT, "version": CORPUS_VERSION,
        "d_in": corpus.d_in, "d_latent": corpus.d_latent, "H": corpus.H, "seed": corpus.seed,
        "record_layout": ["query[d_in]", "positive[d_in]", "hard_negatives[H*d_in]", "label[1]", "sims[H+1]"],
        "datasets": entries,
    }
    with open(os.path.join(path, "corpus.json"), "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_corpus(path) -> Corpus:
    with open(os.path.join(path, "corpus.json")) as f:
        doc = json.load(f)
    if doc.get("format") != CORPUS_FORMAT or doc.get("version") != CORPUS_VERSION:
        raise SynthError(f"{path}: not a {CORPUS_FORMAT} v{CORPUS_VERSION} directory")
    d_in, H = doc["d_in"], doc["H"]
    width = (H + 2) * d_in + 1 + (H + 1)
    datasets = []
    for e in doc["datasets"]:
        raw = np.fromfile(os.path.join(path, e["file"]), dtype="<f4")
        if raw.size != e["size"] * width:
            raise SynthError(f"{e['file']}: expected {e['size'] * width} values, found {raw.size}")
        rec = raw.reshape(e["size"], width).astype(np.float32)
        o = 0
        q = rec[:, o:o + d_in]; o += d_in
        p = rec[:, o:o + d_in]; o += d_in
        neg = rec[:, o:o + H * d_in].reshape(-1, H, d_in); o += H * d_in
        labels = rec[:, o].astype(np.int64); o += 1
        sims = rec[:, o:]
        datasets.append(Dataset(DatasetSpec(**e["spec"]), q.copy(), p.copy(), neg.copy(), labels, sims.copy()))
    return Corpus(datasets, d_in, doc["d_latent"], H, doc["seed"])
