"""Command-line entry point.

Every command reads an optional JSON run config (validated against the
bundled schema), applies flag overrides (flags > file > defaults), writes a
config snapshot next to its outputs and exits with 0 on success, 2 on config
errors, 3 on data errors, 4 on numerical failures and 1 otherwise. Failures
print a JSON error document on stderr.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from . import evalkit
from .backbone import NumericalError, iter_leaves
from .coder import CoderConfigError
from .graph import (Graph, GraphDataError, Split, generate_er, generate_sbm_pair,
                    generate_snapshots, load_graph_bundle, make_split, save_graph_bundle)
from .trainer import (CheckpointMismatch, TrainConfig, attach_data, init_state, load_checkpoint,
                      params_hash, pretrain_state, save_checkpoint, write_metrics)

logger = logging.getLogger("currigraph")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3, 4
DATA_ENV = "CURRIGRAPH_DATA_DIR"
PKG_PREFIX = "pkg:"


class ConfigError(ValueError):
    def __init__(self, message: str, errors: list[dict] | None = None):
        super().__init__(message)
        self.errors = errors or []


class DataError(RuntimeError):
    pass


# -- config ------------------------------------------------------------------

def load_schema() -> dict:
    text = resources.files("currigraph").joinpath("schema/run_config.schema.json").read_text()
    return json.loads(text)


def schema_errors(doc: dict) -> list[dict]:
    import jsonschema

    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: [str(p) for p in e.absolute_path])
    return [{"field": ".".join(str(p) for p in e.absolute_path) or "<root>", "message": e.message}
            for e in errors]


def validate_config(doc: dict) -> None:
    """Raise :class:`ConfigError` listing every schema violation."""
    items = schema_errors(doc)
    if items:
        raise ConfigError(f"{len(items)} config error(s)", items)


def data_root() -> Path:
    return Path(os.environ.get(DATA_ENV, "."))


def resolve_path(value: str) -> Path:
    """``pkg:<rel>`` points into the bundled data; relative paths use $CURRIGRAPH_DATA_DIR."""
    if value.startswith(PKG_PREFIX):
        return Path(str(resources.files("currigraph").joinpath("data", value[len(PKG_PREFIX):])))
    p = Path(value).expanduser()
    return p if p.is_absolute() else data_root() / p


def load_config(path: str | None, needs: tuple[str, ...] = ()) -> dict:
    doc: dict = {"schema_version": 1}
    if path is not None:
        try:
            src = resolve_path(path) if path.startswith(PKG_PREFIX) else Path(path)
            doc = json.loads(src.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}",
                              [{"field": "--config", "message": f"no such file {path}"}]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}",
                              [{"field": "--config", "message": str(exc)}]) from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object", [{"field": "<root>",
                                                                "message": "not an object"}])
    problems = schema_errors(doc)
    problems += [{"field": f, "message": f"'{f}' is required for this command"}
                 for f in needs if f not in doc]
    for field in ("sources", "snapshots"):
        for i, p in enumerate(doc.get(field, [])):
            if isinstance(p, str) and not resolve_path(p).is_dir():
                problems.append({"field": f"{field}.{i}", "message": f"no bundle directory at {resolve_path(p)}"})
    if isinstance(doc.get("target"), str) and not resolve_path(doc["target"]).is_dir():
        problems.append({"field": "target", "message": f"no bundle directory at {resolve_path(doc['target'])}"})
    if "train" in doc and not any(e["field"].startswith("train") for e in problems):
        try:
            TrainConfig.from_dict(doc["train"])
        except ValueError as exc:
            problems.append({"field": "train", "message": str(exc)})
    if problems:
        raise ConfigError(f"{len(problems)} config error(s)", problems)
    return doc


def apply_overrides(doc: dict, args: argparse.Namespace) -> dict:
    doc = copy.deepcopy(doc)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.out is not None:
        doc["output_dir"] = args.out
    seed = doc.get("seed")
    if seed is not None:
        doc.setdefault("train", {})["seed"] = seed
        doc.setdefault("finetune", {})["seed"] = seed
        doc.setdefault("split", {}).setdefault("seed", seed)
    doc.setdefault("output_dir", "runs/default")
    return doc


def train_config(doc: dict) -> TrainConfig:
    return TrainConfig.from_dict(doc.get("train", {}))


def finetune_config(doc: dict) -> evalkit.FinetuneConfig:
    return evalkit.FinetuneConfig(**doc.get("finetune", {}))


def load_graphs(paths: list[str]) -> list[Graph]:
    return [load_graph_bundle(resolve_path(p)) for p in paths]


def outdir(doc: dict) -> Path:
    out = Path(doc["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def snapshot(doc: dict, out: Path, command: str) -> None:
    write_json(out / "config.json", dict(doc, mode=doc.get("mode", command)))


# -- classifier artifacts ----------------------------------------------------

def save_classifier(result: evalkit.FinetuneResult, split: Split, target: Graph, path: Path,
                    checkpoint_hash: str | None, config_hash: str | None) -> None:
    tdir = path / "tensors"
    tdir.mkdir(parents=True, exist_ok=True)
    clf = result.classifier
    tensors = []
    for name, t in iter_leaves(clf.params()):
        fname = f"{name}.npy"
        np.save(tdir / fname, t.detach().numpy())
        tensors.append({"name": name, "shape": list(t.shape), "file": fname})
    np.save(path / "inputs.npy", clf.inputs.numpy())
    write_json(path / "split.json", split.to_dict())
    write_json(path / "manifest.json", {
        "kind": clf.kind, "activation": clf.activation, "target": target.name,
        "num_classes": target.num_classes, "best_epoch": result.best_epoch,
        "checkpoint_params_hash": checkpoint_hash, "config_hash": config_hash,
        "tensors": tensors})
    with open(path / "curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        fields = ["epoch", "train_loss", "train_acc", "val_acc", "val_loss"]
        w.writerow(fields)
        for row in result.curve:
            w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in fields])


def load_classifier(path: Path, target: Graph) -> tuple[evalkit.Classifier, Split]:
    for name in ("manifest.json", "inputs.npy", "split.json"):
        if not (path / name).is_file():
            raise DataError(f"missing fine-tune artifact {path / name}; run 'finetune' first "
                            f"(or pass --finetuned pointing at its output)")
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest["target"] != target.name:
        raise ConfigError(f"classifier was fine-tuned on {manifest['target']!r}, not {target.name!r}",
                          [{"field": "target", "message": "target does not match the classifier"}])
    values = {}
    for entry in manifest["tensors"]:
        f = path / "tensors" / entry["file"]
        if not f.is_file():
            raise DataError(f"missing fine-tune artifact {f}")
        values[entry["name"]] = torch.from_numpy(np.load(f))
    inputs = torch.from_numpy(np.load(path / "inputs.npy"))
    A = torch.as_tensor(target.dense_adjacency(), dtype=inputs.dtype)
    if manifest["kind"] == "gcn":
        from .backbone import normalize_adjacency
        A = normalize_adjacency(A)
    layers = sorted({int(k.split(".")[1]) for k in values if k.startswith("backbone.")})
    skeleton = {"backbone": [{k.split(".")[2]: None for k in values if k.startswith(f"backbone.{i}.")}
                             for i in layers],
                "head": {k.split(".")[1]: None for k in values if k.startswith("head.")}}
    skeleton = _fill(skeleton, values)
    split = Split.from_dict(json.loads((path / "split.json").read_text()))
    return evalkit.Classifier(manifest["kind"], A, inputs, skeleton["backbone"], skeleton["head"],
                              manifest["activation"]), split


def _fill(tree, values: dict, prefix: str = ""):
    if isinstance(tree, dict):
        return {k: _fill(v, values, f"{prefix}.{k}" if prefix else k) for k, v in tree.items()}
    if isinstance(tree, list):
        return [_fill(v, values, f"{prefix}.{i}") for i, v in enumerate(tree)]
    return values[prefix]


# -- commands ----------------------------------------------------------------

def cmd_pretrain(args) -> dict:
    doc = apply_overrides(load_config(args.config, ("sources", "target")), args)
    out = outdir(doc)
    snapshot(doc, out, "pretrain")
    cfg = train_config(doc)
    sources, target = load_graphs(doc["sources"]), load_graph_bundle(resolve_path(doc["target"]))
    state = init_state(sources, target, cfg)
    ckpt = out / "checkpoint"
    pretrain_state(state, checkpoint_dir=ckpt)
    save_checkpoint(state, ckpt)
    write_metrics(state.history, out / "metrics.csv")
    result = {"command": "pretrain", "episodes": state.episode, "checkpoint": str(ckpt),
              "config_hash": cfg.config_hash(), "params_hash": params_hash(state.params),
              "final": state.history[-1]}
    write_json(out / "result.json", result)
    return result


def _checkpoint_state(doc: dict, args, sources: list[Graph], target: Graph):
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(doc["output_dir"]) / "checkpoint"
    if not (ckpt / "manifest.json").is_file():
        raise DataError(f"missing checkpoint manifest {ckpt / 'manifest.json'}; run 'pretrain' first "
                        "or pass --checkpoint")
    cfg = train_config(doc) if "train" in doc else None
    try:
        state = load_checkpoint(ckpt, cfg)
    except CheckpointMismatch as exc:
        raise ConfigError(f"refusing checkpoint {ckpt}: {exc}",
                          [{"field": "train", "message": str(exc)}]) from exc
    try:
        attach_data(state, sources, [target])
    except CheckpointMismatch as exc:
        raise ConfigError(str(exc), [{"field": "sources", "message": str(exc)}]) from exc
    return state


def cmd_finetune(args) -> dict:
    doc = apply_overrides(load_config(args.config, ("target",)), args)
    out = outdir(doc)
    snapshot(doc, out, "finetune")
    target = load_graph_bundle(resolve_path(doc["target"]))
    split_cfg = doc.get("split", {})
    split = make_split(target, tuple(split_cfg.get("ratios", (0.04, 0.16, 0.80))),
                       split_cfg.get("seed", 0))
    ft = finetune_config(doc)
    if args.baseline:
        state, ckpt_hash, cfg_hash = None, None, None
    else:
        if "sources" not in doc:
            raise ConfigError("fine-tuning from a checkpoint needs the source bundles",
                              [{"field": "sources", "message": "required for this command"}])
        state = _checkpoint_state(doc, args, load_graphs(doc["sources"]), target)
        ckpt_hash, cfg_hash = params_hash(state.params), state.cfg.config_hash()
    result = evalkit.finetune(state, target, split, ft)
    fdir = out / "finetune"
    save_classifier(result, split, target, fdir, ckpt_hash, cfg_hash)
    summary = {"command": "finetune", "best_epoch": result.best_epoch,
               "val_acc": result.curve[result.best_epoch]["val_acc"],
               "train_acc": evalkit.evaluate_accuracy(result.classifier, target, split.train),
               "baseline": bool(args.baseline)}
    write_json(fdir / "result.json", summary)
    return summary


def cmd_eval(args) -> dict:
    doc = apply_overrides(load_config(args.config, ("target",)), args)
    out = outdir(doc)
    target = load_graph_bundle(resolve_path(doc["target"]))
    fdir = Path(args.finetuned) if args.finetuned else out / "finetune"
    clf, split = load_classifier(fdir, target)
    ids = getattr(split, args.ids)
    acc = evalkit.evaluate_accuracy(clf, target, ids)
    snapshot(doc, out, "eval")
    result = {"command": "eval", "accuracy": acc, "ids": args.ids, "count": len(ids),
              "target": target.name}
    write_json(out / "result.json", result)
    print(f"accuracy ({args.ids}, {len(ids)} nodes): {acc:.4f}")
    return result


def _experiment_config(doc: dict, section: str = "experiment") -> evalkit.ExperimentConfig:
    exp = doc.get(section, {})
    kw = {"train": train_config(doc), "finetune": finetune_config(doc)}
    if "ratios" in exp:
        kw["ratios"] = tuple(exp["ratios"])
    if "variants" in exp:
        kw["variants"] = list(exp["variants"])
    if "n_runs" in exp:
        kw["n_runs"] = exp["n_runs"]
    return evalkit.ExperimentConfig(**kw)


def cmd_experiment(args) -> dict:
    doc = apply_overrides(load_config(args.config, ("sources", "target")), args)
    out = outdir(doc)
    snapshot(doc, out, "experiment")
    cfg = _experiment_config(doc)
    sources, target = load_graphs(doc["sources"]), load_graph_bundle(resolve_path(doc["target"]))
    base = doc.get("seed", 0)
    seeds = [base + i for i in range(cfg.n_runs)]
    results = evalkit.run_experiment(sources, target, cfg, seeds=seeds, jobs=args.jobs,
                                     partial_path=out / "partial.json")
    payload = {v: r.to_dict() for v, r in results.items()}
    write_json(out / "experiment.json", payload)
    evalkit.emit_report(results, out)
    summary = {v: {"mean": r.mean, "std": r.std, "n_runs": r.n_runs} for v, r in results.items()}
    write_json(out / "result.json", {"command": "experiment", "variants": summary})
    return summary


def cmd_sweep(args) -> dict:
    doc = apply_overrides(load_config(args.config, ("sources", "target")), args)
    out = outdir(doc)
    snapshot(doc, out, "sweep")
    sw = doc.get("sweep", {})
    cfg = _experiment_config(doc)
    sources, target = load_graphs(doc["sources"]), load_graph_bundle(resolve_path(doc["target"]))
    rows = evalkit.lambda_sweep(sw.get("lambda1", [0.2]), sw.get("lambda2", [1.0]), sources, target,
                                cfg, n_runs=sw.get("n_runs", 1))
    evalkit.emit_report([], out, sweep=rows)
    result = {"command": "sweep", "cells": len(rows)}
    write_json(out / "result.json", result)
    return result


def cmd_scale(args) -> dict:
    doc = apply_overrides(load_config(args.config), args)
    out = outdir(doc)
    snapshot(doc, out, "scale")
    sc = doc.get("scale", {})
    if args.sizes:
        sc["sizes"] = [int(x) for x in args.sizes.split(",")]
    if args.episodes:
        sc["episodes"] = args.episodes
    seed = doc.get("seed", 0)
    if "sources" in doc:
        source = load_graphs(doc["sources"][:1])[0]
    else:
        source = generate_sbm_pair([70, 70, 70], [70, 70, 70], 0.15, 0.02, 0.5, seed)[0]
    train = dict(doc.get("train", {}), dtype=sc.get("dtype", "float32"))
    result = evalkit.scalability_run(
        source, sorted(sc.get("sizes", [500, 1000, 2000, 4000])), p=sc.get("p"),
        depths=sc.get("depths", [3]), episodes=sc.get("episodes", 100), seed=seed,
        p_scale=sc.get("p_scale", 10.0), train=TrainConfig.from_dict(train),
        level_base=sc.get("level_base", 64), repeats=sc.get("repeats", 1))
    evalkit.emit_report([], out, scale=result)
    summary = {"command": "scale", "rows": result.rows,
               "slopes": {str(k): v for k, v in result.slopes.items()}}
    write_json(out / "result.json", summary)
    return summary


def cmd_gen(args) -> dict:
    out = Path(args.out or "generated")
    seed = 0 if args.seed is None else args.seed
    written = []
    if args.kind == "er":
        g = generate_er(args.n, args.p, seed, feature_dim=args.feature_dim)
        save_graph_bundle(g, out, feature_format=args.feature_format)
        written.append(str(out))
    elif args.kind == "sbm":
        sizes = [int(x) for x in args.blocks.split(",")]
        s, t = generate_sbm_pair(sizes, sizes, args.p_in, args.p_out, args.noise, seed,
                                 feature_dim=args.feature_dim)
        for role, g in (("source", s), ("target", t)):
            save_graph_bundle(g, out / role, feature_format=args.feature_format)
            written.append(str(out / role))
    else:
        sizes = [int(x) for x in args.blocks.split(",")]
        for g in generate_snapshots(sizes, args.steps, args.p_in, args.p_out, seed=seed,
                                    feature_dim=args.feature_dim):
            save_graph_bundle(g, out / g.name, feature_format=args.feature_format)
            written.append(str(out / g.name))
    params = {k: v for k, v in sorted(vars(args).items()) if k not in ("config", "jobs", "log_level", "out")}
    write_json(out / "gen_config.json", dict(params, seed=seed))
    return {"command": "gen", "bundles": written}


def cmd_report(args) -> dict:
    out = Path(args.out or "report")
    results, sweep, metrics, scale = [], None, None, None
    for d in map(Path, args.inputs):
        if not d.is_dir():
            raise DataError(f"report input {d} is not a directory")
        if (d / "experiment.json").is_file():
            for v in json.loads((d / "experiment.json").read_text()).values():
                results.append(evalkit.ExperimentResult(v["variant"], v["seeds"], v["accuracies"],
                                                        v["wall_times"], v["config"], v.get("extras", [])))
        if (d / "grid.csv").is_file():
            sweep = (sweep or []) + _read_rows(d / "grid.csv")
        if (d / "metrics.csv").is_file():
            metrics = _read_rows(d / "metrics.csv")
        if (d / "scale.csv").is_file():
            rows = _read_rows(d / "scale.csv")
            slopes = {int(r["depth"]): r["slope"] for r in _read_rows(d / "scale_slopes.csv")}
            scale = evalkit.ScaleResult(rows, slopes)
    files = evalkit.emit_report(results, out, sweep=sweep, metrics=metrics, scale=scale)
    write_json(out / "config.json", {"mode": "report", "inputs": [str(d) for d in args.inputs]})
    return {"command": "report", "files": [str(f) for f in files]}


def _read_rows(path: Path) -> list[dict]:
    def conv(v: str):
        if v == "":
            return None
        for cast in (int, float):
            try:
                return cast(v)
            except ValueError:
                pass
        return v
    with open(path, newline="") as fh:
        return [{k: conv(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def cmd_temporal(args) -> dict:
    doc = apply_overrides(load_config(args.config), args)
    out = outdir(doc)
    snapshot(doc, out, "temporal")
    tcfg = doc.get("temporal", {})
    if "snapshots" in doc:
        snaps = load_graphs(doc["snapshots"])
    else:
        snaps = generate_snapshots(tcfg.get("block_sizes", [20, 20, 20]),
                                   tcfg.get("synthetic_steps", 5), 0.3, 0.02, seed=doc.get("seed", 0))
    result = evalkit.run_temporal(snaps, train_config(doc), out)
    summary = {"command": "temporal",
               "train_pairs": [[s.name, t.name] for s, t in result.pairs.train],
               "held_out": [result.pairs.test[0].name, result.pairs.test[1].name],
               "train_empty": result.pairs.train_empty, "portions": result.portions,
               "files": [str(f) for f in result.files]}
    write_json(out / "result.json", summary)
    return summary


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; SUPPRESS keeps a
    # subcommand's unset flag from clobbering one given before it
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON run config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="overrides the config seed")
    common.add_argument("--out", default=argparse.SUPPRESS,
                        help="output directory (overrides output_dir)")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS,
                        help="parallel seeds / grid cells")
    common.add_argument("--log-level", default=argparse.SUPPRESS,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="currigraph", parents=[common],
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("pretrain", parents=[common], help="pre-train on source(s) -> target")
    p = sub.add_parser("finetune", parents=[common], help="fine-tune a classifier on the target")
    p.add_argument("--checkpoint", help="checkpoint directory (default <out>/checkpoint)")
    p.add_argument("--baseline", action="store_true", help="skip pre-training (raw-feature GNN)")
    p = sub.add_parser("eval", parents=[common], help="accuracy of a fine-tuned classifier")
    p.add_argument("--finetuned", help="fine-tune output (default <out>/finetune)")
    p.add_argument("--ids", choices=["test", "val", "train"], default="test")
    sub.add_parser("experiment", parents=[common], help="repeated runs with ablations")
    sub.add_parser("sweep", parents=[common], help="lambda1 x lambda2 grid")
    p = sub.add_parser("scale", parents=[common], help="runtime vs. target size")
    p.add_argument("--sizes", help="comma-separated target sizes")
    p.add_argument("--episodes", type=int)
    p = sub.add_parser("gen", parents=[common], help="write synthetic graph bundles")
    p.add_argument("kind", choices=["er", "sbm", "snapshots"])
    p.add_argument("--n", type=int, default=100, help="er: node count")
    p.add_argument("--p", type=float, default=0.05)
    p.add_argument("--blocks", default="60,60,60", help="sbm/snapshots: comma-separated block sizes")
    p.add_argument("--p-in", type=float, default=0.15)
    p.add_argument("--p-out", type=float, default=0.02)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--steps", type=int, default=5, help="snapshots: number of snapshots")
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--feature-format", choices=["csv", "bin"], default="csv")
    p = sub.add_parser("report", parents=[common], help="tables and plots from run directories")
    p.add_argument("inputs", nargs="*", help="run directories to collect")
    sub.add_parser("temporal", parents=[common], help="snapshot-pair reconstruction run")
    return parser


GLOBAL_DEFAULTS = {"config": None, "seed": None, "out": None, "jobs": 1, "log_level": "WARNING"}

COMMANDS = {"pretrain": cmd_pretrain, "finetune": cmd_finetune, "eval": cmd_eval,
            "experiment": cmd_experiment, "sweep": cmd_sweep, "scale": cmd_scale,
            "gen": cmd_gen, "report": cmd_report, "temporal": cmd_temporal}


def _fail(code: int, kind: str, exc: BaseException, errors: list[dict] | None = None) -> int:
    doc = {"status": "error", "exit_code": code, "kind": kind, "message": str(exc)}
    if errors:
        doc["errors"] = errors
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    for name, value in GLOBAL_DEFAULTS.items():
        if not hasattr(args, name):
            setattr(args, name, value)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        result = COMMANDS[args.command](args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc, exc.errors)
    except (CoderConfigError, CheckpointMismatch) as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except (GraphDataError, DataError, FileNotFoundError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except NumericalError as exc:
        return _fail(EXIT_NUMERICAL, "numerical", exc)
    except Exception as exc:  # noqa: BLE001 - reported as a machine-readable error
        logger.debug("unhandled error", exc_info=True)
        return _fail(EXIT_OTHER, type(exc).__name__, exc)
    print(json.dumps(result, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
