"""Parameter-space merging: spherical, task-vector and Model Stock methods.

Every method works tensor by tensor. Spherical methods treat each named
tensor, flattened row-major, as a single vector. All arithmetic happens in
float64 and the result is rounded back to float32 once.
"""
from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import Checkpoint, IncompatibleError, check_compatible, digest

METHODS = ("slerp", "multislerp", "karcher", "task_arithmetic", "ties", "sce", "model_stock")
SPHERICAL = ("slerp", "multislerp", "karcher")
TASK_VECTOR = ("task_arithmetic", "ties", "sce", "model_stock")
WEIGHT_SCHEMES = ("equal", "size_proportional", "explicit")

DEFAULT_HYPER = {
    "ties_top_k_percent": 20.0,
    "karcher_tol": 1e-9,
    "karcher_max_iter": 100,
    "parallel_eps": 1e-8,
}


class MergeError(ValueError):
    pass


class DegenerateGeometryError(MergeError):
    """Zero-norm inputs, antipodal directions or a vanishing mean."""


class KarcherConvergenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class MergeRecipe:
    method: str
    weight_scheme: str = "equal"
    alphas: tuple | None = None
    base: Checkpoint | None = None
    hyper: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise MergeError(f"unknown merge method {self.method!r}; expected one of {METHODS}")
        if self.weight_scheme not in WEIGHT_SCHEMES:
            raise MergeError(f"unknown weight scheme {self.weight_scheme!r}")
        if self.weight_scheme == "explicit" and self.alphas is None:
            raise MergeError("explicit weight scheme needs alphas")
        if self.alphas is not None:
            alphas = tuple(float(a) for a in self.alphas)
            if any(a < 0 or not math.isfinite(a) for a in alphas):
                raise MergeError(f"alphas must be finite and non-negative: {alphas}")
            object.__setattr__(self, "alphas", alphas)
        given = dict(self.hyper or {})
        unknown = set(given) - set(DEFAULT_HYPER)
        if unknown:
            raise MergeError(f"unknown hyperparameters {sorted(unknown)}")
        hyper = {**DEFAULT_HYPER, **given}
        if not 0 < hyper["ties_top_k_percent"] <= 100:
            raise MergeError("ties_top_k_percent must be in (0, 100]")
        if hyper["karcher_tol"] <= 0 or hyper["parallel_eps"] <= 0:
            raise MergeError("karcher_tol and parallel_eps must be positive")
        if int(hyper["karcher_max_iter"]) < 1:
            raise MergeError("karcher_max_iter must be a positive integer")
        hyper["karcher_max_iter"] = int(hyper["karcher_max_iter"])
        object.__setattr__(self, "hyper", hyper)

    @classmethod
    def from_dict(cls, doc: Mapping, base: Checkpoint | None = None) -> "MergeRecipe":
        return cls(
            method=doc["method"],
            weight_scheme=doc.get("weight_scheme", "equal"),
            alphas=doc.get("alphas"),
            base=base,
            hyper=doc.get("hyper", {}),
        )

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "weight_scheme": self.weight_scheme,
            "alphas": list(self.alphas) if self.alphas is not None else None,
            "hyper": dict(self.hyper),
        }


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------

def resolve_weights(recipe: MergeRecipe, models: Sequence[Checkpoint]) -> list[float]:
    n = len(models)
    if n == 0:
        raise MergeError("no models to merge")
    if recipe.weight_scheme == "equal":
        return [1.0 / n] * n
    if recipe.weight_scheme == "size_proportional":
        counts = []
        for i, m in enumerate(models):
            c = m.train_examples
            if c <= 0:
                raise MergeError(f"model {i} has train_examples={c}; size-proportional weights need > 0")
            counts.append(c)
        total = sum(counts)
        return [c / total for c in counts]
    alphas = list(recipe.alphas)
    if len(alphas) != n:
        raise MergeError(f"got {len(alphas)} explicit alphas for {n} models")
    if recipe.method in SPHERICAL:
        total = sum(alphas)
        if total <= 0:
            raise MergeError("explicit alphas sum to zero")
        alphas = [a / total for a in alphas]
    return alphas


# ---------------------------------------------------------------------------
# sphere helpers
# ---------------------------------------------------------------------------

def _flat64(t) -> np.ndarray:
    return np.asarray(t, dtype=np.float64).reshape(-1)


def _unit(v, what="input"):
    n = np.linalg.norm(v)
    if n == 0 or not np.isfinite(n):
        raise DegenerateGeometryError(f"{what} has zero norm")
    return v / n, n


def _angle(x, y):
    return math.acos(min(1.0, max(-1.0, float(np.dot(x, y)))))


def sphere_log(x, y, parallel_eps=DEFAULT_HYPER["parallel_eps"]):
    """Tangent vector at unit ``x`` pointing to unit ``y`` with length d(x, y)."""
    theta = _angle(x, y)
    if theta > math.pi - parallel_eps:
        raise DegenerateGeometryError("direction is antipodal to the base point")
    perp = y - math.cos(theta) * x
    s = math.sin(theta)
    if s < parallel_eps:
        # first-order: log_x(y) ~ projection of y - x on the tangent space
        return perp
    return (theta / s) * perp


def sphere_exp(x, v):
    nv = float(np.linalg.norm(v))
    if nv == 0.0:
        return x.copy()
    return math.cos(nv) * x + (math.sin(nv) / nv) * v


def geodesic_distance(x, y):
    xu, _ = _unit(_flat64(x))
    yu, _ = _unit(_flat64(y))
    return _angle(xu, yu)


# ---------------------------------------------------------------------------
# spherical methods (tensor level)
# ---------------------------------------------------------------------------

def slerp(a, b, alpha: float, parallel_eps: float = DEFAULT_HYPER["parallel_eps"]) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise MergeError(f"shape mismatch {a.shape} vs {b.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise MergeError(f"alpha must lie in [0, 1], got {alpha}")
    va, vb = _flat64(a), _flat64(b)
    ua, _ = _unit(va, "first input")
    ub, _ = _unit(vb, "second input")
    theta = _angle(ua, ub)
    if theta > math.pi - parallel_eps:
        raise DegenerateGeometryError("slerp inputs are antipodal")
    s = math.sin(theta)
    if s < parallel_eps:
        out = (1.0 - alpha) * va + alpha * vb
    else:
        out = (math.sin((1.0 - alpha) * theta) / s) * va + (math.sin(alpha * theta) / s) * vb
    return out.reshape(a.shape).astype(np.float32)


def _unit_stack(tensors, alphas):
    if len(tensors) < 2:
        raise MergeError(f"need at least 2 tensors, got {len(tensors)}")
    if len(alphas) != len(tensors):
        raise MergeError(f"{len(alphas)} weights for {len(tensors)} tensors")
    shape = np.shape(tensors[0])
    for t in tensors:
        if np.shape(t) != shape:
            raise MergeError(f"shape mismatch {np.shape(t)} vs {shape}")
    units, norms = [], []
    for i, t in enumerate(tensors):
        u, n = _unit(_flat64(t), f"input {i}")
        units.append(u)
        norms.append(n)
    alphas = np.asarray(alphas, dtype=np.float64)
    if abs(alphas.sum() - 1.0) > 1e-9:
        raise MergeError(f"spherical weights must sum to 1, got {alphas.sum()}")
    return shape, units, np.asarray(norms), alphas


def _weighted_sum(alphas, vectors):
    out = np.zeros_like(vectors[0])
    for a, v in zip(alphas, vectors):
        out += a * v
    return out


def mean_direction(units, alphas):
    m = _weighted_sum(alphas, units)
    n = np.linalg.norm(m)
    if n < 1e-12:
        raise DegenerateGeometryError("weighted mean direction vanishes")
    return m / n


def multislerp(tensors: Sequence, alphas: Sequence[float],
               parallel_eps: float = DEFAULT_HYPER["parallel_eps"]) -> np.ndarray:
    """Barycentric spherical interpolation of N tensors.

    Inputs are projected to the unit sphere, pulled into the tangent space at
    their normalized weighted mean direction, averaged there, mapped back and
    rescaled by the weighted mean of the input norms.
    """
    shape, units, norms, alphas = _unit_stack(tensors, alphas)
    m = mean_direction(units, alphas)
    tangent = _weighted_sum(alphas, [sphere_log(m, u, parallel_eps) for u in units])
    x = sphere_exp(m, tangent)
    return (float(alphas @ norms) * x).reshape(shape).astype(np.float32)


@dataclass(frozen=True)
class KarcherResult:
    tensor: np.ndarray
    iterations: int
    tangent_norm: float
    converged: bool


def karcher_mean(tensors: Sequence, alphas: Sequence[float],
                 tol: float = DEFAULT_HYPER["karcher_tol"],
                 max_iter: int = DEFAULT_HYPER["karcher_max_iter"],
                 parallel_eps: float = DEFAULT_HYPER["parallel_eps"]) -> KarcherResult:
    """Weighted Fréchet mean on the unit sphere by fixed-point iteration.

    Starts at the normalized chordal mean and repeats
    ``x <- exp_x(sum_i a_i log_x(u_i))`` until the tangent mean is shorter
    than ``tol``. The direction is rescaled by the weighted mean input norm.
    A :class:`KarcherConvergenceWarning` is emitted if ``max_iter`` runs out;
    the last iterate is still returned.
    """
    shape, units, norms, alphas = _unit_stack(tensors, alphas)
    x = mean_direction(units, alphas)
    it = 0
    while True:
        tangent = _weighted_sum(alphas, [sphere_log(x, u, parallel_eps) for u in units])
        gnorm = float(np.linalg.norm(tangent))
        if gnorm < tol or it >= max_iter:
            break
        x = sphere_exp(x, tangent)
        x /= np.linalg.norm(x)
        it += 1
    converged = gnorm < tol
    if not converged:
        warnings.warn(f"Karcher mean did not converge in {max_iter} iterations "
                      f"(tangent norm {gnorm:.3e})", KarcherConvergenceWarning, stacklevel=2)
    out = (float(alphas @ norms) * x).reshape(shape).astype(np.float32)
    return KarcherResult(out, it, gnorm, converged)


def karcher_objective(x, directions, alphas) -> float:
    """sum_i a_i d(x, u_i)^2 with geodesic distance d."""
    return float(sum(a * geodesic_distance(x, u) ** 2 for a, u in zip(alphas, directions)))


# ---------------------------------------------------------------------------
# task-vector methods (tensor level)
# ---------------------------------------------------------------------------

def _deltas(base, tensors):
    b = np.asarray(base, dtype=np.float64)
    return b, np.stack([np.asarray(t, dtype=np.float64) - b for t in tensors])


def task_arithmetic_tensor(base, tensors, alphas) -> np.ndarray:
    b, taus = _deltas(base, tensors)
    a = np.asarray(alphas, dtype=np.float64).reshape((-1,) + (1,) * b.ndim)
    return (b + (a * taus).sum(axis=0)).astype(np.float32)


def trim_top_k(tau: np.ndarray, top_k_percent: float) -> np.ndarray:
    """Keep the ceil(k% * numel) largest-magnitude entries of ``tau``.

    Equal magnitudes at the cut are resolved in favour of lower flat indices.
    """
    flat = tau.reshape(-1)
    keep = min(flat.size, math.ceil(top_k_percent * flat.size / 100.0))
    order = np.lexsort((np.arange(flat.size), -np.abs(flat)))
    out = np.zeros_like(flat)
    idx = order[:keep]
    out[idx] = flat[idx]
    return out.reshape(tau.shape)


def ties_tensor(base, tensors, alphas, top_k_percent=DEFAULT_HYPER["ties_top_k_percent"]) -> np.ndarray:
    if not 0 < top_k_percent <= 100:
        raise MergeError(f"top_k_percent must be in (0, 100], got {top_k_percent}")
    b, taus = _deltas(base, tensors)
    trimmed = np.stack([trim_top_k(t, top_k_percent) for t in taus])
    a = np.asarray(alphas, dtype=np.float64).reshape((-1,) + (1,) * b.ndim)
    consensus = np.sign((a * trimmed).sum(axis=0))
    mask = (np.sign(trimmed) == consensus) & (trimmed != 0)
    num = (a * trimmed * mask).sum(axis=0)
    den = (a * mask).sum(axis=0)
    delta = np.divide(num, den, out=np.zeros_like(num), where=den != 0)
    return (b + delta).astype(np.float32)


def sce_tensor(base, tensors, alphas) -> np.ndarray:
    b, taus = _deltas(base, tensors)
    pos = (taus > 0).any(axis=0)
    neg = (taus < 0).any(axis=0)
    # zeros neither veto nor establish agreement
    agree = pos ^ neg
    a = np.asarray(alphas, dtype=np.float64).reshape((-1,) + (1,) * b.ndim)
    num = (a * taus).sum(axis=0) * agree
    den = float(np.sum(alphas)) * agree
    delta = np.divide(num, den, out=np.zeros_like(num), where=den != 0)
    return (b + delta).astype(np.float32)


def model_stock_coefficient(cos_mean: float, n: int) -> float:
    denom = 1.0 + (n - 1) * cos_mean
    if abs(denom) < 1e-9:
        raise DegenerateGeometryError("Model Stock denominator 1 + (N-1)cos is zero")
    return n * cos_mean / denom


def model_stock_tensor(base, tensors) -> np.ndarray:
    n = len(tensors)
    if n < 2:
        raise MergeError("Model Stock needs at least 2 fine-tuned models")
    b, taus = _deltas(base, tensors)
    flat = taus.reshape(n, -1)
    norms = np.linalg.norm(flat, axis=1)
    if np.any(norms == 0):
        raise DegenerateGeometryError("zero task vector; cosine undefined")
    cos = [float(flat[i] @ flat[j]) / (norms[i] * norms[j])
           for i in range(n) for j in range(i + 1, n)]
    t = model_stock_coefficient(float(np.mean(cos)), n)
    w_mean = np.stack([np.asarray(x, dtype=np.float64) for x in tensors]).mean(axis=0)
    return (t * w_mean + (1.0 - t) * b).astype(np.float32)


# ---------------------------------------------------------------------------
# checkpoint level
# ---------------------------------------------------------------------------

def task_vectors(base: Checkpoint, model: Checkpoint) -> dict[str, np.ndarray]:
    """Elementwise ``model - base`` per tensor."""
    check_compatible([model], base)
    return {k: model[k].astype(np.float64) - base[k].astype(np.float64) for k in base.names}


def _combine(models, fn, workers=1, base=None):
    check_compatible(models, base)
    names = (base or models[0]).names

    def run(name):
        try:
            return fn(name)
        except MergeError as e:
            raise type(e)(f"tensor {name!r}: {e}") from e

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, names))
    else:
        results = [run(n) for n in names]
    return dict(zip(names, results))


def _carry_meta(models):
    first = models[0]
    return {
        "arch_id": first.meta["arch_id"],
        "seed": first.meta["seed"],
        "train_examples": str(sum(m.train_examples for m in models)),
    }


def task_arithmetic(base: Checkpoint, models: Sequence[Checkpoint], alphas) -> Checkpoint:
    out = _combine(models, lambda k: task_arithmetic_tensor(base[k], [m[k] for m in models], alphas), base=base)
    return Checkpoint(out, _carry_meta(models))


def ties_merge(base: Checkpoint, models: Sequence[Checkpoint], alphas,
               top_k_percent: float = DEFAULT_HYPER["ties_top_k_percent"]) -> Checkpoint:
    out = _combine(models, lambda k: ties_tensor(base[k], [m[k] for m in models], alphas, top_k_percent), base=base)
    return Checkpoint(out, _carry_meta(models))


def sce_merge(base: Checkpoint, models: Sequence[Checkpoint], alphas) -> Checkpoint:
    out = _combine(models, lambda k: sce_tensor(base[k], [m[k] for m in models], alphas), base=base)
    return Checkpoint(out, _carry_meta(models))


def model_stock(base: Checkpoint, models: Sequence[Checkpoint]) -> Checkpoint:
    out = _combine(models, lambda k: model_stock_tensor(base[k], [m[k] for m in models]), base=base)
    return Checkpoint(out, _carry_meta(models))


def _check_counts(recipe, n):
    m = recipe.method
    if m == "slerp" and n != 2:
        raise MergeError(f"slerp merges exactly 2 models, got {n}")
    if m in ("multislerp", "karcher", "model_stock") and n < 2:
        raise MergeError(f"{m} needs at least 2 models, got {n}")
    if n < 1:
        raise MergeError("no models to merge")
    if m in TASK_VECTOR and recipe.base is None:
        raise MergeError(f"{m} needs a base checkpoint")


def merge(recipe: MergeRecipe, models: Sequence[Checkpoint], workers: int = 1) -> Checkpoint:
    """Merge ``models`` according to ``recipe``.

    The output meta records the method, resolved weights, hyperparameters and
    the sha256 of every input, so a merge is reproducible from its artifacts.
    ``workers > 1`` evaluates tensors on a thread pool; the result does not
    depend on it.
    """
    models = list(models)
    _check_counts(recipe, len(models))
    check_compatible(models, recipe.base)
    alphas = resolve_weights(recipe, models)
    h = recipe.hyper
    base = recipe.base
    extra = {}

    if recipe.method == "slerp":
        fn = lambda k: slerp(models[0][k], models[1][k], alphas[1] / (alphas[0] + alphas[1]), h["parallel_eps"])
    elif recipe.method == "multislerp":
        fn = lambda k: multislerp([m[k] for m in models], alphas, h["parallel_eps"])
    elif recipe.method == "karcher":
        info = {}

        def fn(k):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", KarcherConvergenceWarning)
                r = karcher_mean([m[k] for m in models], alphas, h["karcher_tol"],
                                 h["karcher_max_iter"], h["parallel_eps"])
            info[k] = (r.iterations, r.tangent_norm, r.converged)
            return r.tensor
    elif recipe.method == "task_arithmetic":
        fn = lambda k: task_arithmetic_tensor(base[k], [m[k] for m in models], alphas)
    elif recipe.method == "ties":
        fn = lambda k: ties_tensor(base[k], [m[k] for m in models], alphas, h["ties_top_k_percent"])
    elif recipe.method == "sce":
        fn = lambda k: sce_tensor(base[k], [m[k] for m in models], alphas)
    else:
        fn = lambda k: model_stock_tensor(base[k], [m[k] for m in models])

    tensors = _combine(models, fn, workers=workers, base=base)
    if recipe.method == "karcher":
        unconverged = sorted(k for k, v in info.items() if not v[2])
        if unconverged:
            warnings.warn(f"Karcher mean did not converge for {unconverged}", KarcherConvergenceWarning)
        extra["merge_karcher"] = json.dumps(
            {k: {"iterations": info[k][0], "tangent_norm": info[k][1]} for k in sorted(info)},
            sort_keys=True)

    meta = _carry_meta(models)
    meta.update({
        "merge_method": recipe.method,
        "merge_weight_scheme": recipe.weight_scheme,
        "merge_alphas": json.dumps(alphas),
        "merge_hyper": json.dumps(dict(h), sort_keys=True),
        "merge_inputs": json.dumps([digest(m) for m in models]),
    })
    if base is not None:
        meta["merge_base"] = digest(base)
    meta.update(extra)
    return Checkpoint(tensors, meta)


def with_base(recipe: MergeRecipe, base: Checkpoint | None) -> MergeRecipe:
    return replace(recipe, base=base)


__all__ = [
    "MergeRecipe", "MergeError", "DegenerateGeometryError", "KarcherConvergenceWarning",
    "KarcherResult", "IncompatibleError", "resolve_weights", "slerp", "multislerp", "karcher_mean",
    "karcher_objective", "task_arithmetic", "ties_merge", "sce_merge", "model_stock", "merge",
    "task_vectors", "trim_top_k", "sphere_log", "sphere_exp", "geodesic_distance", "with_base",
]
