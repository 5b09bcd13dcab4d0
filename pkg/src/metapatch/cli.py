"""Command-line front end: ``metapatch {train,attack,report,synth-data}``.

Runs are described by one JSON config (see ``CONFIG_SCHEMA``); ``--set
dotted.key=value`` overrides scalars.  Relative output directories resolve
under ``$METAPATCH_OUTPUT_ROOT`` when it is set.  Exit codes: 0 success,
1 runtime failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from .attacks import AttackConfig
from .data import export_folder, load_folder, synth_dataset
from .evaluation import FAMILIES, desk_grid, emit_report, grid_eval, load_report, paper_grid
from .meta import MetaSet
from .model import Architecture, Classifier, load_checkpoint, save_checkpoint
from .perturbation import PerturbationSpec
from .training import METHODS, TrainConfig, train, write_history

OUTPUT_ROOT_ENV = "METAPATCH_OUTPUT_ROOT"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

_PAIR = {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2, "maxItems": 2}
_NUM = {"type": "number"}

ATTACK_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "init": {"enum": ["random", "data"]},
        "steps": {"type": "integer", "minimum": 0},
        "step_size": {"type": "number", "exclusiveMinimum": 0},
        "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "total_decay": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "cutoff": {"type": ["number", "null"], "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "target": {"type": ["integer", "null"], "minimum": 0},
        "data_candidates": {"type": "integer", "minimum": 1},
    },
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["train"],
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "source": {"enum": ["synthetic", "folder"]},
                "path": {"type": "string"},
                "n_per_class": {"type": "integer", "minimum": 1},
                "num_classes": {"type": "integer", "minimum": 2, "maximum": 8},
                "resolution": _PAIR,
                "seed": {"type": "integer", "minimum": 0},
                "eval_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "threat": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["patch", "additive"]},
                "patch_size": _PAIR,
                "max_translation": _PAIR,
                "epsilon": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "widths": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2},
                "groups": {"type": "integer", "minimum": 1},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "required": ["method"],
            "properties": {
                "method": {"enum": list(METHODS)},
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "weight_decay": {"type": "number", "minimum": 0},
                "sigma": {"type": "number", "minimum": 0, "maximum": 1},
                "K": {"type": "integer", "minimum": 0},
                "P": {"type": "integer", "minimum": 0},
                "F": {"type": "integer", "minimum": 1},
                "init_mode": {"enum": ["random", "data"]},
                "alpha": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "targeted": {"type": "boolean"},
                "transfer": {"oneOf": [{"type": "null"}, ATTACK_SCHEMA]},
                "transfer_restart_every": {"type": "integer", "minimum": 0},
            },
        },
        "attack": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "grid": {"oneOf": [{"enum": ["desk", "paper"]}, {"type": "array", "items": ATTACK_SCHEMA, "minItems": 1}]},
                "steps": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
    },
}

DEFAULTS = {
    "name": "run",
    "seed": 0,
    "data": {"source": "synthetic", "n_per_class": 125, "num_classes": 4, "resolution": [32, 32], "seed": 0,
             "eval_fraction": 0.2},
    "threat": {"mode": "patch", "patch_size": [8, 8], "max_translation": [8, 8]},
    "model": {"widths": [16, 32, 64], "groups": 8},
    "attack": {"grid": "desk"},
}


class ConfigError(ValueError):
    """Invalid configuration or usage; maps to exit code 2."""


# -- config handling ------------------------------------------------------------


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _apply_overrides(raw: dict, overrides: list[str]) -> dict:
    raw = copy.deepcopy(raw)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value  # bare strings need no quoting
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {p!r} is not an object")
        node[parts[-1]] = parsed
    return raw


def _schema_errors(raw) -> list[str]:
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    return [f"{'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in errors]


def load_config(path, overrides=(), seed: int | None = None) -> dict:
    """Read, override, validate and fill defaults.  Raises ConfigError."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    raw = _apply_overrides(raw, list(overrides))
    if seed is not None:
        raw["seed"] = seed
    errors = _schema_errors(raw)
    if errors:
        raise ConfigError(f"{path}: invalid config:\n  " + "\n  ".join(errors))
    cfg = _merge(DEFAULTS, raw)
    # build every typed object once so semantic errors surface before any work
    try:
        _threat(cfg)
        _train_config(cfg).validate()
        _grid(cfg)
        _arch(cfg)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if cfg["data"]["source"] == "folder" and "path" not in cfg["data"]:
        raise ConfigError(f"{path}: data.path is required for folder datasets")
    return cfg


def config_hash(cfg: dict) -> str:
    """Hash of the resolved config, excluding where outputs go."""
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


def _threat(cfg) -> PerturbationSpec:
    t = cfg["threat"]
    r = cfg["data"]["resolution"]
    shape = (3, r[0], r[1])
    if t.get("mode", "patch") == "additive":
        if "epsilon" not in t:
            raise ValueError("threat.epsilon is required for additive mode")
        return PerturbationSpec.additive(shape, t["epsilon"])
    return PerturbationSpec.patch(shape, t.get("patch_size", (8, 8)), t.get("max_translation", (0, 0)))


def _train_config(cfg) -> TrainConfig:
    t = dict(cfg["train"])
    method = t.pop("method")
    if t.get("transfer") is not None:
        t["transfer"] = AttackConfig.from_dict(t["transfer"])
    return TrainConfig.for_method(method, **t)


def _arch(cfg, num_classes=None) -> Architecture:
    r = cfg["data"]["resolution"]
    return Architecture(widths=tuple(cfg["model"]["widths"]), groups=cfg["model"]["groups"],
                        num_classes=num_classes or cfg["data"].get("num_classes", 4), input_shape=(3, r[0], r[1]))


def _grid(cfg) -> list[AttackConfig]:
    a = cfg["attack"]
    spec = _threat(cfg)
    grid = a.get("grid", "desk")
    if grid == "desk":
        size = spec.patch_size if spec.mode == "patch" else spec.image_shape[1:]
        configs = desk_grid(tuple(size))
    elif grid == "paper":
        size = spec.patch_size if spec.mode == "patch" else spec.image_shape[1:]
        configs = paper_grid(cutoff=min(size) / 2)
    else:
        configs = [AttackConfig.from_dict(c) for c in grid]
    scalars = {k: a[k] for k in ("steps", "batch_size") if k in a}
    if scalars:
        configs = [AttackConfig.from_dict({**c.to_dict(), **scalars}) for c in configs]
    return configs


def _output_dir(cfg, override=None) -> Path:
    out = Path(override or cfg.get("output_dir") or Path("runs") / cfg["name"])
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def _dataset(cfg):
    d = cfg["data"]
    if d["source"] == "folder":
        ds = load_folder(d["path"], tuple(d["resolution"]))
    else:
        ds = synth_dataset(d["n_per_class"], d["num_classes"], tuple(d["resolution"]), d["seed"])
    return ds.split(cfg["seed"], d["eval_fraction"])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- commands -------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    h = config_hash(cfg)
    out = _output_dir(cfg, args.output_dir)
    if args.dry_run:
        print(f"config ok ({h}); would write to {out}")
        return EXIT_OK
    tr, ev = _dataset(cfg)
    spec = _threat(cfg)
    tc = _train_config(cfg)
    arch = _arch(cfg, tr.num_classes)

    def progress(epoch, params, meta, record):
        if not args.quiet:
            acc = record.get("clean_accuracy")
            print(f"epoch {epoch:3d}  loss {record['train_loss']:.4f}" + (f"  clean {acc:.3f}" if acc is not None else ""),
                  file=sys.stderr)

    params, meta, history = train(tr, tc, spec, cfg["seed"], arch=arch, eval_data=ev, on_epoch=progress)
    out.mkdir(parents=True, exist_ok=True)
    prov = {"config_hash": h, "method": tc.method, "seed": cfg["seed"]}
    _write_json(out / "config.json", {**cfg, "config_hash": h})
    tr.write_manifest(out / "data.json")
    save_checkpoint(params, out / "model.json", extra=prov)
    if meta is not None:
        meta.save(out / "meta", extra=prov)
    write_history([{**r, "config_hash": h} for r in history], out / "history.jsonl")
    print(out / "model.json")
    return EXIT_OK


def _transfer_accuracies(checkpoint: Path) -> list[float]:
    hist = checkpoint.parent / "history.jsonl"
    if not hist.exists():
        return []
    accs = []
    for line in hist.read_text().splitlines():
        for a in json.loads(line).get("transfer", []):
            if a.get("accuracy") is not None:
                accs.append(a["accuracy"])
    return accs


def cmd_attack(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    h = config_hash(cfg)
    run_dir = _output_dir(cfg, args.output_dir)
    ckpt = Path(args.checkpoint) if args.checkpoint else run_dir / "model.json"
    if not ckpt.with_suffix(".json").exists():
        raise ConfigError(f"checkpoint {ckpt} not found")
    grid = _grid(cfg)
    if args.family:
        grid = [c for c in grid if c.family == args.family]
        if not grid:
            raise ConfigError(f"no configs of family {args.family} in the grid")
    out = Path(args.out) if args.out else run_dir / "attack"
    if args.dry_run:
        print(f"config ok ({h}); {len(grid)} attack configs; would write to {out}")
        return EXIT_OK
    try:
        params = load_checkpoint(ckpt)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load checkpoint {ckpt}: {exc}") from None
    tr, ev = _dataset(cfg)
    spec = _threat(cfg)
    jobs = 1 if args.deterministic else args.jobs
    seed = cfg["attack"].get("seed", cfg["seed"])
    report, results = grid_eval(Classifier(params), tr, ev, spec, grid, seed=seed,
                                transfer_accuracies=_transfer_accuracies(ckpt), jobs=jobs,
                                label=cfg["train"]["method"], model_id=params.digest())
    report.provenance = {"config_hash": h, "checkpoint": ckpt.name, "seed": cfg["seed"]}
    out.mkdir(parents=True, exist_ok=True)
    emit_report(report, out, results, export_patches=True)
    (out / "results").mkdir(exist_ok=True)
    for cid, res in sorted(results.items()):
        _write_json(out / "results" / f"{cid}.json", {**res.to_dict(), "config_hash": h})
    failed = [r for r in report.rows if r["error"]]
    for r in failed:
        print(f"config {r['config_id']} failed: {r['error']}", file=sys.stderr)
    print(f"clean {report.clean_accuracy:.3f}  min {report.overall_min:.3f}  -> {out}")
    return EXIT_RUNTIME if len(failed) == len(report.rows) else EXIT_OK


def _find_report(path: Path) -> Path:
    for cand in (path / "report.json", path / "attack" / "report.json", path):
        if cand.is_file():
            return cand
    raise ConfigError(f"{path}: no report.json found")


def summary_table(reports) -> tuple[list[str], list[list]]:
    """Rows of (label, seed, clean, one column per family, Min) for each report."""
    fams = [f for f in FAMILIES if any(f in r.family_min for r in reports)]
    header = ["method", "seed", "clean"] + fams + ["Min"]
    rows = []
    for r in reports:
        vals = [r.family_min.get(f) for f in fams]
        present = [v for v in vals if v is not None]
        rows.append([r.label, r.seed, r.clean_accuracy] + vals + [min(present) if present else None])
    return header, rows


def _fmt(v) -> str:
    if v is None:
        return "-"
    return f"{v:.3f}" if isinstance(v, float) else str(v)


def cmd_report(args) -> int:
    reports = []
    for d in args.dirs:
        path = _find_report(Path(d))
        try:
            reports.append(load_report(path))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    header, rows = summary_table(reports)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else v for v in row])
    widths = [max(len(_fmt(x)) for x in col) for col in zip(header, *rows)]
    text = "\n".join("  ".join(_fmt(x).rjust(n) for x, n in zip(line, widths)) for line in [header] + rows) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.csv").write_text(buf.getvalue())
        (out / "summary.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_synth_data(args) -> int:
    res = tuple(args.resolution)
    ds = synth_dataset(args.n_per_class, args.classes, res, args.seed)
    out = Path(args.out)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    if out.exists() and any(out.iterdir()):
        raise ConfigError(f"{out} exists and is not empty")
    export_folder(ds, out)
    ds.write_manifest(out / "manifest.json")
    print(f"{len(ds)} images -> {out}")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="metapatch", description="Meta adversarial training against universal patches.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("config", help="run config (JSON)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. train.epochs=5 (repeatable)")
        sp.add_argument("--seed", type=int, help="override the run seed")
        sp.add_argument("--output-dir", help="override output_dir")
        sp.add_argument("--dry-run", action="store_true", help="validate and exit without writing files")

    t = sub.add_parser("train", help="train a model; writes checkpoint, meta-set and history")
    common(t)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attack", help="run the attack grid against a checkpoint")
    common(a)
    a.add_argument("--checkpoint", help="defaults to <output_dir>/model.json")
    a.add_argument("--out", help="report directory (default <output_dir>/attack)")
    a.add_argument("--family", choices=[f for f in FAMILIES if f != "Tr"], help="only run one attack family")
    a.add_argument("--jobs", type=int, default=1, help="parallel attack configs")
    a.add_argument("--deterministic", action="store_true", help="force sequential execution")
    a.set_defaults(func=cmd_attack)

    r = sub.add_parser("report", help="merge attack reports into a method x family table")
    r.add_argument("dirs", nargs="+", help="run or report directories")
    r.add_argument("--out", help="write summary.csv and summary.txt here")
    r.set_defaults(func=cmd_report)

    s = sub.add_parser("synth-data", help="write the synthetic shapes dataset as a class-folder tree")
    s.add_argument("--out", required=True)
    s.add_argument("--n-per-class", type=int, default=125)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--resolution", type=int, nargs=2, default=[32, 32], metavar=("H", "W"))
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth_data)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "jobs", 1) < 1:
            raise ConfigError("--jobs must be >= 1")
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure: report, never a traceback dump
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
