"""``boom`` command line: synth, train, merge, bag, update, interact, eval, compare.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure. Every
successful run writes ``<out>.manifest.json`` next to its main output with
the resolved config, input and output hashes, the seed and the wall time.
Logs go to stderr as one JSON object per line.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .bagging import BaggingPlan, IncrementalPlan, run_incremental, run_static
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigValidationError, validate_config
from .evalkit import compare_strategies, eval_model
from .interaction import compute_interaction, cut_threshold, hierarchical_cluster
from .merge import MergeRecipe, merge
from .synth import DatasetSpec, generate_corpus, load_corpus, save_corpus, split_ood
from .trainer import TrainConfig, train

log = logging.getLogger("boom")


class UsageError(Exception):
    pass


class _JsonLines(logging.Formatter):
    def format(self, record):
        doc = {"ts": round(record.created, 3), "level": record.levelname.lower(), "msg": record.getMessage()}
        doc.update(getattr(record, "fields", {}))
        return json.dumps(doc, sort_keys=True)


def _setup_logging(verbose: bool):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonLines())
    log.handlers[:] = [handler]
    log.setLevel(logging.DEBUG if verbose else logging.INFO)
    log.propagate = False


def _info(msg, **fields):
    log.info(msg, extra={"fields": fields})


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def sha256_path(path) -> str:
    """sha256 of a file, or of a directory's (relative path, file hash) listing."""
    p = Path(path)
    if p.is_file():
        return hashlib.sha256(p.read_bytes()).hexdigest()
    h = hashlib.sha256()
    for f in sorted(x for x in p.rglob("*") if x.is_file() and not x.name.endswith(".manifest.json")):
        h.update(f"{f.relative_to(p).as_posix()}\0{sha256_path(f)}\n".encode())
    return h.hexdigest()


def _write_text(path, text: str):
    path = Path(path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _dump(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _read_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: not valid JSON ({e})") from None


def _load_config(path, schema_id, seed):
    doc = _read_json(path) if path else {}
    cfg = validate_config(doc, schema_id)
    if seed is not None:
        cfg = _override_seeds(cfg, seed)
    return cfg


def _override_seeds(doc, seed):
    if isinstance(doc, dict):
        return {k: (seed if k == "seed" else _override_seeds(v, seed)) for k, v in doc.items()}
    if isinstance(doc, list):
        return [_override_seeds(v, seed) for v in doc]
    return doc


def _manifest_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


def write_manifest(sub, config, inputs, outputs, seed, started, anchor=None):
    """Record the run beside ``anchor`` (default: the first output)."""
    doc = {
        "subcommand": sub,
        "version": __version__,
        "config": config,
        "inputs": {str(p): sha256_path(p) for p in inputs},
        "outputs": {str(p): sha256_path(p) for p in outputs},
        "seed": seed,
        "duration_s": round(time.perf_counter() - started, 6),
    }
    path = _manifest_path(anchor if anchor is not None else outputs[0])
    _write_text(path, _dump(doc))
    _info("manifest written", path=str(path))
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _specs(docs):
    return [DatasetSpec(**d) for d in docs]


def cmd_synth(args, started):
    cfg = _load_config(args.spec, "synth", args.seed)
    corpus = generate_corpus(_specs(cfg["datasets"]), cfg["d_in"], cfg["d_latent"], cfg["H"], cfg["seed"])
    out = Path(args.out)
    if cfg["held_out_fraction"] is None:
        save_corpus(corpus, out)
        outputs = [out]
    else:
        ood = _specs(cfg["ood_datasets"]) if cfg["ood_datasets"] else None
        split = split_ood(corpus, cfg["held_out_fraction"], cfg["seed"], ood)
        outputs = []
        for name, part in zip(("train", "ind", "ood"), split):
            save_corpus(part, out / name)
            outputs.append(out / name)
    _info("corpus written", out=str(out), datasets=len(corpus), examples=corpus.num_examples)
    write_manifest("synth", cfg, [args.spec] if args.spec else [], outputs, cfg["seed"], started, anchor=out)


def cmd_train(args, started):
    cfg = _load_config(args.config, "train", args.seed)
    corpus = load_corpus(args.corpus)
    model, tlog = train(corpus, TrainConfig.from_dict(cfg))
    save_checkpoint(model, args.out)
    outputs = [Path(args.out)]
    if args.log:
        _write_text(args.log, _dump({"config": cfg, **tlog.to_dict()}))
        outputs.append(Path(args.log))
    _info("model trained", out=args.out, steps=len(tlog.steps), mean_step_loss=tlog.mean_step_loss)
    write_manifest("train", cfg, [args.corpus] + ([args.config] if args.config else []), outputs,
                   cfg["seed"], started)


def cmd_merge(args, started):
    cfg = _load_config(args.recipe, "recipe", args.seed)
    base = load_checkpoint(args.base) if args.base else None
    recipe = MergeRecipe.from_dict(cfg, base)
    models = [load_checkpoint(p) for p in args.models]
    merged = merge(recipe, models, workers=args.workers)
    save_checkpoint(merged, args.out)
    _info("models merged", out=args.out, method=recipe.method, inputs=len(models))
    inputs = list(args.models) + ([args.base] if args.base else []) + ([args.recipe] if args.recipe else [])
    write_manifest("merge", cfg, inputs, [Path(args.out)], args.seed, started)


def cmd_bag(args, started):
    cfg = _load_config(args.plan, "plan", args.seed)
    corpus = load_corpus(args.corpus)
    result = run_static(corpus, BaggingPlan.from_dict(cfg), workers=args.workers)
    save_checkpoint(result.model, args.out)
    _write_text(args.report, _dump(result.report))
    _info("bagging done", out=args.out, constituents=len(result.constituents))
    write_manifest("bag", cfg, [args.corpus] + ([args.plan] if args.plan else []),
                   [Path(args.out), Path(args.report)], cfg["seed"], started)


def cmd_update(args, started):
    cfg = _load_config(args.config, "incremental", args.seed)
    if args.core_ratio is not None:
        cfg = validate_config({**cfg, "core_ratio": args.core_ratio}, "incremental")
    plan = IncrementalPlan(
        base_model=load_checkpoint(args.base),
        old_corpus=load_corpus(args.old_corpus),
        new_corpus=load_corpus(args.new_corpus),
        core_ratio=cfg["core_ratio"],
        recipe=MergeRecipe.from_dict(cfg["recipe"]),
        train_cfg=TrainConfig.from_dict(cfg["train"]),
        seed=cfg["seed"],
    )
    result = run_incremental(plan, workers=args.workers)
    save_checkpoint(result.model, args.out)
    _write_text(args.report, _dump(result.report))
    _info("incremental update done", out=args.out, cost_ratio=result.report["cost_ratio"])
    inputs = [args.base, args.old_corpus, args.new_corpus] + ([args.config] if args.config else [])
    write_manifest("update", cfg, inputs, [Path(args.out), Path(args.report)], cfg["seed"], started)


def cmd_interact(args, started):
    cfg = _load_config(args.config, "train", args.seed)
    corpus = load_corpus(args.corpus)
    matrix = compute_interaction(corpus, TrainConfig.from_dict(cfg), workers=args.workers)
    doc = matrix.to_dict()
    if args.cluster:
        dg = hierarchical_cluster(matrix.distance, matrix.names, args.linkage)
        doc["dendrogram"] = dg.to_dict()
        doc["threshold"] = args.threshold
        doc["clusters"] = cut_threshold(dg, args.threshold)
    _write_text(args.out, _dump(doc))
    outputs = [Path(args.out)]
    if args.csv:
        _write_text(args.csv, matrix.distance_csv())
        outputs.append(Path(args.csv))
    _info("interaction computed", out=args.out, datasets=len(matrix.names))
    write_manifest("interact", cfg, [args.corpus] + ([args.config] if args.config else []), outputs,
                   cfg["seed"], started)


def cmd_eval(args, started):
    model = load_checkpoint(args.model)
    suite = load_corpus(args.suite)
    report = eval_model(model, suite, args.k)
    _write_text(args.out, report.to_json())
    for name, score in report.scores.items():
        print(f"{name:24s} {report.task_types[name]:15s} {100 * score:7.2f}")
    print(f"{'Mean(Task)':40s} {100 * report.mean_task:7.2f}")
    write_manifest("eval", {"k": args.k}, [args.model, args.suite], [Path(args.out)], args.seed, started)


def _rel(base: Path, p):
    p = Path(p)
    return p if p.is_absolute() else base / p


def cmd_compare(args, started):
    cfg = _load_config(args.spec, "experiments", args.seed)
    inputs = [args.spec] if args.spec else []
    if cfg["synth"] is not None:
        s = cfg["synth"]
        if s["held_out_fraction"] is None:
            raise UsageError("synth.held_out_fraction must be set to build IND/OOD suites")
        corpus = generate_corpus(_specs(s["datasets"]), s["d_in"], s["d_latent"], s["H"], s["seed"])
        ood = _specs(s["ood_datasets"]) if s["ood_datasets"] else None
        train_c, ind, ood_c = split_ood(corpus, s["held_out_fraction"], s["seed"], ood)
    else:
        here = Path(args.spec).parent if args.spec else Path(".")
        paths = {k: _rel(here, v) for k, v in cfg["corpus"].items() if v is not None}
        train_c, ind = load_corpus(paths["train"]), load_corpus(paths["ind"])
        ood_c = load_corpus(paths["ood"]) if "ood" in paths else None
        inputs += list(paths.values())
    pipelines = {}
    for name, row in cfg["pipelines"].items():
        c = row["config"]
        pipelines[name] = TrainConfig.from_dict(c) if row["kind"] == "train" else BaggingPlan.from_dict(c)
    table = compare_strategies(train_c, pipelines, {"ind": ind, "ood": ood_c}, cfg["k"], args.workers)
    _write_text(args.out, table.to_json())
    sys.stdout.write(table.to_text())
    write_manifest("compare", cfg, inputs, [Path(args.out)], args.seed, started)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p, top=False):
    d = None if top else argparse.SUPPRESS
    p.add_argument("--workers", type=int, default=1 if top else d, metavar="N",
                   help="parallel worker count (default 1, fully sequential)")
    p.add_argument("--seed", type=int, default=d, help="override every seed in the config")
    p.add_argument("-v", "--verbose", action="store_true", default=False if top else d)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="boom", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"boom {__version__}")
    _common(ap, top=True)
    sub = ap.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic multi-task corpus")
    p.add_argument("--spec", help="synth config JSON (default: the reference corpus)")
    p.add_argument("--out", required=True, metavar="DIR")

    p = sub.add_parser("train", help="train an encoder on a corpus")
    p.add_argument("--corpus", required=True, metavar="DIR")
    p.add_argument("--config", help="train config JSON")
    p.add_argument("--out", required=True, metavar="CKPT")
    p.add_argument("--log", help="write the training log as JSON")

    p = sub.add_parser("merge", help="merge checkpoints with a recipe")
    p.add_argument("--recipe", help="merge recipe JSON (default: multislerp, equal weights)")
    p.add_argument("--base", help="base checkpoint for task-vector methods")
    p.add_argument("--out", required=True, metavar="CKPT")
    p.add_argument("models", nargs="+", metavar="CKPT")

    p = sub.add_parser("bag", help="static BOOM: train on sampled subsets and merge")
    p.add_argument("--corpus", required=True, metavar="DIR")
    p.add_argument("--plan", help="bagging plan JSON")
    p.add_argument("--out", required=True, metavar="CKPT")
    p.add_argument("--report", required=True)

    p = sub.add_parser("update", help="incremental BOOM: core replay plus merge")
    p.add_argument("--base", required=True, metavar="CKPT")
    p.add_argument("--old-corpus", required=True, metavar="DIR")
    p.add_argument("--new-corpus", required=True, metavar="DIR")
    p.add_argument("--core-ratio", type=float)
    p.add_argument("--config", help="incremental config JSON")
    p.add_argument("--out", required=True, metavar="CKPT")
    p.add_argument("--report", required=True)

    p = sub.add_parser("interact", help="pairwise dataset interaction matrix")
    p.add_argument("--corpus", required=True, metavar="DIR")
    p.add_argument("--config", help="train config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--cluster", action="store_true", help="add a dendrogram and threshold clusters")
    p.add_argument("--threshold", type=float, default=1.0)
    p.add_argument("--linkage", choices=("average", "single", "complete"), default="average")
    p.add_argument("--csv", help="also write the distance matrix as CSV")

    p = sub.add_parser("eval", help="score a model on a suite")
    p.add_argument("--model", required=True, metavar="CKPT")
    p.add_argument("--suite", required=True, metavar="DIR")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", required=True)

    p = sub.add_parser("compare", help="train and score several pipelines side by side")
    p.add_argument("--spec", help="experiments JSON (default: the reference comparison)")
    p.add_argument("--out", required=True)

    for p in sub.choices.values():
        _common(p)
    return ap


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "merge": cmd_merge, "bag": cmd_bag,
    "update": cmd_update, "interact": cmd_interact, "eval": cmd_eval, "compare": cmd_compare,
}


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    _setup_logging(args.verbose)
    if args.workers < 1:
        print("boom: error: --workers must be at least 1", file=sys.stderr)
        return 1
    if getattr(args, "k", 1) < 1:
        print("boom: error: --k must be at least 1", file=sys.stderr)
        return 1
    started = time.perf_counter()
    _info("start", command=args.command, workers=args.workers, seed=args.seed)
    try:
        COMMANDS[args.command](args, started)
    except (UsageError, ConfigValidationError) as e:
        log.error(str(e), extra={"fields": {"command": args.command, "kind": "usage"}})
        return 1
    except Exception as e:
        log.error(f"{type(e).__name__}: {e}", extra={"fields": {"command": args.command, "kind": "runtime"}})
        return 2
    _info("done", command=args.command, seconds=round(time.perf_counter() - started, 3))
    return 0


if __name__ == "__main__":
    sys.exit(main())
