"""JSON config documents: schemas, validation and default filling.

``validate_config(doc, schema_id)`` rejects unknown keys, reports every
problem with its key path, and returns a copy of the document with every
default filled in, so a saved config records the effective values.
"""
from __future__ import annotations

import copy
from dataclasses import asdict

from jsonschema import Draft202012Validator

from .merge import DEFAULT_HYPER, METHODS, WEIGHT_SCHEMES
from .synth import REFERENCE_HELD_OUT, REFERENCE_TRAIN, TASK_TYPES, reference_specs
from .trainer import STRATEGIES


class ConfigValidationError(ValueError):
    def __init__(self, schema_id: str, errors: list[str]):
        self.schema_id = schema_id
        self.errors = errors
        super().__init__(f"invalid {schema_id} config:\n  " + "\n  ".join(errors))


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False,
            "required": list(required), "default": {}}


_INT = {"type": "integer"}
_SEED = {"type": "integer", "minimum": 0, "default": 0}

ARCH = _obj({
    "d_in": {**_INT, "minimum": 1, "default": 64},
    "d_hidden": {**_INT, "minimum": 1, "default": 64},
    "d_out": {**_INT, "minimum": 1, "default": 16},
})

TRAIN = _obj({
    "arch": ARCH,
    "lr": {"type": "number", "exclusiveMinimum": 0, "default": 1e-3},
    "batch_size": {**_INT, "minimum": 1, "default": 32},
    "epochs": {**_INT, "minimum": 0, "default": 3},
    "temperature": {"type": "number", "exclusiveMinimum": 0, "default": 0.05},
    "strategy": {"enum": list(STRATEGIES), "default": "batch_shuffle"},
    "seed": _SEED,
    "two_stage_retrieval_sample_ratio": {"type": "number", "exclusiveMinimum": 0, "maximum": 1,
                                         "default": 0.25},
})

HYPER = _obj({
    "ties_top_k_percent": {"type": "number", "exclusiveMinimum": 0, "maximum": 100,
                           "default": DEFAULT_HYPER["ties_top_k_percent"]},
    "karcher_tol": {"type": "number", "exclusiveMinimum": 0, "default": DEFAULT_HYPER["karcher_tol"]},
    "karcher_max_iter": {**_INT, "minimum": 1, "default": DEFAULT_HYPER["karcher_max_iter"]},
    "parallel_eps": {"type": "number", "exclusiveMinimum": 0, "default": DEFAULT_HYPER["parallel_eps"]},
})


def _recipe(method="multislerp", scheme="equal") -> dict:
    s = _obj({
        "method": {"enum": list(METHODS), "default": method},
        "weight_scheme": {"enum": list(WEIGHT_SCHEMES), "default": scheme},
        "alphas": {"type": ["array", "null"], "items": {"type": "number", "minimum": 0}, "default": None},
        "hyper": HYPER,
    })
    return s


RECIPE = _recipe()

PLAN = _obj({
    "ratios": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
               "minItems": 1, "default": [0.2, 0.4, 0.6, 0.8, 1.0]},
    "variant": {"enum": ["ratio_set", "fifty_and_remainder"], "default": "ratio_set"},
    "recipe": _recipe("multislerp", "size_proportional"),
    "train": TRAIN,
    "seed": _SEED,
    "replacement": {"type": "boolean", "default": False},
})

INCREMENTAL = _obj({
    "core_ratio": {"type": "number", "exclusiveMinimum": 0, "maximum": 1, "default": 0.4},
    "recipe": _recipe("multislerp", "equal"),
    "train": TRAIN,
    "seed": _SEED,
})

DATASET = _obj({
    "name": {"type": "string", "minLength": 1},
    "task_type": {"enum": list(TASK_TYPES)},
    "size": {**_INT, "minimum": 1},
    "latent_seed": {**_INT, "minimum": 0},
    "noise_sigma": {"type": "number", "minimum": 0, "default": 0.5},
    "num_latent_classes": {**_INT, "minimum": 1, "default": 8},
    "latent_rank": {"type": ["integer", "null"], "minimum": 1, "default": None},
    "nuisance_sigma": {"type": "number", "minimum": 0, "default": 0.0},
}, required=("name", "task_type", "size", "latent_seed"))
del DATASET["default"]

SYNTH = _obj({
    "datasets": {"type": "array", "items": DATASET, "minItems": 1,
                 "default": [asdict(s) for s in reference_specs()]},
    "d_in": {**_INT, "minimum": 1, "default": 64},
    "d_latent": {**_INT, "minimum": 1, "default": 8},
    "H": {**_INT, "minimum": 0, "default": 7},
    "seed": _SEED,
    "held_out_fraction": {"type": ["number", "null"], "exclusiveMinimum": 0, "exclusiveMaximum": 1,
                          "default": None},
    "ood_datasets": {"type": ["array", "null"], "items": DATASET, "default": None},
})

PIPELINE = _obj({
    "kind": {"enum": ["train", "bag"]},
    "config": {"type": "object", "default": {}},
}, required=("kind",))
del PIPELINE["default"]


def _reference_pipelines() -> dict:
    train = dict(REFERENCE_TRAIN)
    rows = {s: {"kind": "train", "config": {**train, "strategy": s}} for s in STRATEGIES}
    rows["boom_fifty_and_remainder"] = {"kind": "bag", "config": {"variant": "fifty_and_remainder",
                                                                  "train": train, "seed": train["seed"]}}
    rows["boom_ratio_set"] = {"kind": "bag", "config": {"train": train, "seed": train["seed"]}}
    return rows


def _experiments() -> dict:
    synth = copy.deepcopy(SYNTH)
    synth["default"] = {"held_out_fraction": REFERENCE_HELD_OUT}
    synth["type"] = ["object", "null"]
    return _obj({
        "synth": synth,
        "corpus": {"type": ["object", "null"], "additionalProperties": False, "required": ["train", "ind"],
                   "properties": {"train": {"type": "string"}, "ind": {"type": "string"},
                                  "ood": {"type": ["string", "null"], "default": None}},
                   "default": None},
        "k": {**_INT, "minimum": 1, "default": 10},
        "pipelines": {"type": "object", "additionalProperties": PIPELINE, "minProperties": 1,
                      "default": _reference_pipelines()},
    })


SCHEMAS = {
    "train": TRAIN,
    "recipe": RECIPE,
    "plan": PLAN,
    "incremental": INCREMENTAL,
    "synth": SYNTH,
    "experiments": _experiments(),
}
PIPELINE_SCHEMA = {"train": "train", "bag": "plan"}


def _fill(schema: dict, doc):
    """Copy of ``doc`` with schema defaults filled in, recursively."""
    if isinstance(doc, dict) and schema.get("type") in ("object", ["object", "null"]):
        out = dict(doc)
        for key, sub in schema.get("properties", {}).items():
            if key not in out and "default" in sub:
                out[key] = copy.deepcopy(sub["default"])
            if key in out:
                out[key] = _fill(sub, out[key])
        extra = schema.get("additionalProperties")
        if isinstance(extra, dict):
            for key in out:
                if key not in schema.get("properties", {}):
                    out[key] = _fill(extra, out[key])
        return out
    if isinstance(doc, list) and isinstance(schema.get("items"), dict):
        return [_fill(schema["items"], x) for x in doc]
    return doc


def _errors(schema, doc, prefix=()) -> list[str]:
    v = Draft202012Validator(schema)
    errs = sorted(v.iter_errors(doc), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    return [f"{'/'.join(map(str, [*prefix, *e.absolute_path])) or '<root>'}: {e.message}" for e in errs]


def validate_config(doc, schema_id: str) -> dict:
    """Validate ``doc`` against a named schema and return it with defaults filled in.

    Raises :class:`ConfigValidationError` listing every problem by key path.
    """
    if schema_id not in SCHEMAS:
        raise KeyError(f"unknown schema {schema_id!r}; expected one of {sorted(SCHEMAS)}")
    schema = SCHEMAS[schema_id]
    errors = _errors(schema, doc)
    if errors:
        raise ConfigValidationError(schema_id, errors)
    if schema_id == "experiments":
        if doc.get("corpus") is not None and doc.get("synth") is not None:
            raise ConfigValidationError(schema_id, ["<root>: give either synth or corpus, not both"])
        if doc.get("corpus") is not None:
            doc = {**doc, "synth": None}
    out = _fill(schema, doc)
    if schema_id == "experiments":
        for name, row in out["pipelines"].items():
            sub = SCHEMAS[PIPELINE_SCHEMA[row["kind"]]]
            errors += _errors(sub, row["config"], prefix=("pipelines", name, "config"))
            row["config"] = _fill(sub, row["config"])
        if errors:
            raise ConfigValidationError(schema_id, errors)
    return out
