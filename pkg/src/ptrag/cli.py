"""Command-line entry point: ``ptrag gen|train|eval|compare|sweep|jaccard|report``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or invocation.
Every command writes into a temporary sibling directory that is renamed onto
``--out`` only after all artifacts are complete.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from dataclasses import asdict, fields, replace
from pathlib import Path

from .metrics import HIGHER_IS_BETTER, METRIC_GROUPS, MetricsReport
from .nn import load_checkpoint, save_checkpoint
from .synthdata import SyntheticConfig, generate, read_dataset, split_fewshot, write_dataset
from .trainer import (RunRecord, TrainConfig, compare, evaluate, jaccard_analysis, restore_model,
                      sweep, train, training_pca)

SCHEMA_VERSION = 1
SPLIT_KEYS = {"target_cell_type": str, "fewshot_fraction": float, "val_fraction": float,
              "split_seed": int}
SPLIT_DEFAULTS = {"target_cell_type": "T3", "fewshot_fraction": 0.3, "val_fraction": 0.5,
                  "split_seed": 0}
TOP_LEVEL_KEYS = {"schema_version", "data", "dataset", "train", "models", "seeds", "reference",
                  "alpha", "sweep", "jaccard"}

log = logging.getLogger("ptrag")


class ConfigError(ValueError):
    """Invalid configuration; maps to exit code 2."""


# -- configuration -----------------------------------------------------------


def _typed(section: str, key: str, value, kind):
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is bool:
        ok = isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ConfigError(f"{section}.{key}: expected {kind.__name__}, got {value!r}")
    if kind is float and not math.isfinite(value):
        raise ConfigError(f"{section}.{key}: must be finite")
    return value


_TYPE_NAMES = {"int": int, "float": float, "str": str, "bool": bool}


def _check_section(section: str, d, types: dict) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"{section}: expected an object")
    unknown = sorted(set(d) - set(types))
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}: unknown key")
    return {k: _typed(section, k, v, types[k]) for k, v in d.items()}


def _dataclass_from(section: str, cls, d, extra: dict | None = None) -> dict:
    types = {f.name: _TYPE_NAMES.get(f.type, f.type) for f in fields(cls)}
    return _check_section(section, d, {**types, **(extra or {})})


def parse_train(section: str, d: dict) -> TrainConfig:
    values = _dataclass_from(section, TrainConfig, d)
    if "lr" in values and not values["lr"] > 0:
        raise ConfigError(f"{section}.lr: must satisfy lr > 0, got {values['lr']}")
    cfg = TrainConfig(**values)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"{section}.{exc}") from None
    return cfg


def parse_data(d: dict) -> tuple[SyntheticConfig, dict]:
    values = _dataclass_from("data", SyntheticConfig, d, SPLIT_KEYS)
    split = {**SPLIT_DEFAULTS, **{k: values.pop(k) for k in list(values) if k in SPLIT_KEYS}}
    cfg = SyntheticConfig(**values)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"data.{exc}") from None
    if not 0.0 < split["fewshot_fraction"] < 1.0:
        raise ConfigError("data.fewshot_fraction: must satisfy 0 < fewshot_fraction < 1")
    if not 0.0 <= split["val_fraction"] <= 1.0:
        raise ConfigError("data.val_fraction: must satisfy 0 <= val_fraction <= 1")
    return cfg, split


def load_config(path: str | None) -> tuple[dict, Path]:
    if path is None:
        return {"schema_version": SCHEMA_VERSION}, Path.cwd()
    p = Path(path)
    try:
        raw = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {p} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be an object")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: must equal {SCHEMA_VERSION}, got {raw.get('schema_version')!r}")
    unknown = sorted(set(raw) - TOP_LEVEL_KEYS)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown top-level key")
    return raw, p.parent


def load_data(raw: dict, base: Path):
    """Dataset with split labels, either regenerated from ``data`` or read from ``dataset``."""
    if "dataset" in raw:
        if "data" in raw:
            raise ConfigError("dataset: give either 'dataset' or 'data', not both")
        samples, db, manifest = read_dataset(base / raw["dataset"])
        return samples, db, manifest
    syn, split = parse_data(raw.get("data", {}))
    samples, db, _ = generate(syn)
    samples = split_fewshot(samples, split["target_cell_type"], split["fewshot_fraction"],
                            split["val_fraction"], split["split_seed"])
    return samples, db, {"config": asdict(syn), "split": split}


def _train_config(raw: dict, seed: int | None) -> TrainConfig:
    cfg = parse_train("train", raw.get("train", {}))
    return replace(cfg, seed=seed) if seed is not None else cfg


# -- files -------------------------------------------------------------------


def dump_json(obj) -> str:
    # repr-based float rendering round-trips every f64
    return json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False, allow_nan=False) + "\n"


def write_json(path: Path, obj) -> None:
    path.write_text(dump_json(obj), encoding="utf-8")


def read_json(path: Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


class AtomicDir:
    """Build a directory under a temporary name and rename it into place."""

    def __init__(self, out: Path, force: bool):
        self.out = Path(out)
        self.force = force
        self.tmp: Path | None = None

    def __enter__(self) -> Path:
        if self.out.exists() and not self.force:
            raise ConfigError(f"output directory {self.out} exists; pass --force to overwrite")
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.out.name}.", dir=self.out.parent))
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(self.tmp, 0o777 & ~umask)
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.out.exists():
            shutil.rmtree(self.out)
        os.replace(self.tmp, self.out)
        return False


def save_run(run_dir: Path, record: RunRecord, n_genes: int, extra_meta: dict | None = None) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    write_json(run_dir / "config.json", {"schema_version": SCHEMA_VERSION,
                                         "train": asdict(record.config)})
    meta = {"train": asdict(record.config), "n_genes": n_genes,
            "dataset_checksum": record.dataset_checksum, **(extra_meta or {})}
    save_checkpoint(run_dir / "checkpoint.bin", sorted(record.state.items()), meta)
    write_json(run_dir / "metrics.json", record.metrics.to_dict())
    write_json(run_dir / "run.json", record.summary())


def load_model(checkpoint: str, db):
    path = Path(checkpoint)
    if path.is_dir():
        path = path / "checkpoint.bin"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    params, meta = load_checkpoint(path)
    cfg = parse_train("checkpoint.train", meta["train"])
    model = restore_model(cfg, dict(params), db, int(meta["n_genes"]))
    return model, cfg, meta


# -- commands ----------------------------------------------------------------


def cmd_gen(args, raw, base) -> None:
    if "dataset" in raw:
        raise ConfigError("dataset: gen builds a dataset from 'data'; remove 'dataset'")
    syn, split = parse_data(raw.get("data", {}))
    if args.seed is not None:
        syn = replace(syn, seed=args.seed)
    samples, db, truth = generate(syn)
    samples = split_fewshot(samples, split["target_cell_type"], split["fewshot_fraction"],
                            split["val_fraction"], split["split_seed"])
    with AtomicDir(args.out, args.force) as tmp:
        write_dataset(tmp, samples, truth.pert_ids, truth.raw_embeddings, syn, {"split": split})


def cmd_train(args, raw, base) -> None:
    cfg = _train_config(raw, args.seed)
    samples, db, _ = load_data(raw, base)
    with AtomicDir(args.out, args.force) as tmp:
        record = train(cfg, samples, db)
        save_run(tmp, record, samples[0].x_ctrl.shape[1])


def cmd_eval(args, raw, base) -> None:
    if not args.checkpoint:
        raise ConfigError("--checkpoint: required for eval")
    samples, db, _ = load_data(raw, base)
    model, cfg, meta = load_model(args.checkpoint, db)
    report = evaluate(model, samples, db, args.split, training_pca(samples), cfg)
    with AtomicDir(args.out, args.force) as tmp:
        write_json(tmp / "metrics.json", report.to_dict())


def _model_configs(raw: dict) -> list[TrainConfig]:
    models = raw.get("models")
    if models is None:
        base = raw.get("train", {})
        models = [dict(base, model_kind=k) for k in ("state", "state_genept", "vanilla_rag", "pt_rag")]
    if not isinstance(models, list) or len(models) < 2:
        raise ConfigError("models: must list at least 2 model configs")
    return [parse_train(f"models[{i}]", m) for i, m in enumerate(models)]


def cmd_compare(args, raw, base) -> None:
    configs = _model_configs(raw)
    seeds = raw.get("seeds", [0, 1, 2, 3, 4])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds: must be a non-empty list of integers")
    if args.seed is not None:
        seeds = [args.seed]
    alpha = _typed("compare", "alpha", raw.get("alpha", 0.05), float)
    samples, db, _ = load_data(raw, base)
    n_genes = samples[0].x_ctrl.shape[1]
    with AtomicDir(args.out, args.force) as tmp:
        report, runs = compare(configs, samples, db, seeds, raw.get("reference"), alpha)
        write_json(tmp / "significance.json", report)
        for cfg in configs:
            pooled = []
            for seed in seeds:
                rec = runs[(cfg.label, seed)]
                save_run(tmp / "runs" / cfg.label / f"seed{seed}", rec, n_genes)
                pooled.extend(rec.metrics.rows)
            first = runs[(cfg.label, seeds[0])].metrics
            header = {**first.header, "seed": None, "seeds": list(seeds)}
            write_json(tmp / "runs" / cfg.label / "metrics.json",
                       MetricsReport(pooled, first.pca_q, header).to_dict())


def cmd_sweep(args, raw, base) -> None:
    cfg = _train_config(raw, args.seed)
    plan = raw.get("sweep")
    if not isinstance(plan, dict) or "axis" not in plan or "values" not in plan:
        raise ConfigError("sweep: needs an object with 'axis' and 'values'")
    if plan["axis"] not in ("lambda", "K"):
        raise ConfigError(f"sweep.axis: must be 'lambda' or 'K', got {plan['axis']!r}")
    values = plan["values"]
    if not isinstance(values, list) or not values:
        raise ConfigError("sweep.values: must be a non-empty list")
    kind = int if plan["axis"] == "K" else float
    values = [_typed("sweep", "values", v, kind) for v in values]
    if plan["axis"] == "K" and min(values) < 1 or plan["axis"] == "lambda" and min(values) < 0:
        raise ConfigError("sweep.values: K values must be >= 1 and lambda values >= 0")
    samples, db, _ = load_data(raw, base)
    with AtomicDir(args.out, args.force) as tmp:
        report, records = sweep(cfg, plan["axis"], values, samples, db)
        write_json(tmp / "sweep.json", report)
        for v, rec in zip(values, records):
            save_run(tmp / "runs" / f"{plan['axis']}={v}", rec, samples[0].x_ctrl.shape[1])


def cmd_jaccard(args, raw, base) -> None:
    opts = _check_section("jaccard", raw.get("jaccard", {}),
                          {"top_n": int, "passes": int, "split": str, "noise_seeds": list})
    top_n = opts.get("top_n")
    passes = opts.get("passes", 64)
    if passes < 1 or (top_n is not None and top_n < 1):
        raise ConfigError("jaccard.top_n/passes: must be >= 1")
    seeds = opts.get("noise_seeds", [0, 1])
    if len(seeds) != 2 or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("jaccard.noise_seeds: must be two integers")
    cfg = None if args.checkpoint else _train_config(raw, args.seed)
    if cfg is not None and cfg.model_kind != "pt_rag":
        raise ConfigError("train.model_kind: jaccard analysis needs pt_rag")
    samples, db, _ = load_data(raw, base)
    with AtomicDir(args.out, args.force) as tmp:
        if cfg is None:
            model, cfg, _ = load_model(args.checkpoint, db)
            if cfg.model_kind != "pt_rag":
                raise ConfigError("checkpoint: jaccard analysis needs a pt_rag model")
        else:
            record, model = train(cfg, samples, db, return_model=True)
            save_run(tmp, record, samples[0].x_ctrl.shape[1])
        n = top_n if top_n is not None else max(1, round(10 * cfg.K / 32))
        res = jaccard_analysis(model, samples, db, cfg, n, opts.get("split", "test"), tuple(seeds),
                               passes)
        write_json(tmp / "jaccard.json", {**res.to_dict(), "passes": passes,
                                          "noise_seeds": list(seeds)})


# -- report ------------------------------------------------------------------


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def build_report(run_dirs: list[str], significance: str | None = None) -> tuple[str, str]:
    """Text table (best value in ``**bold**``) and CSV with the same cells."""
    columns, values = [], []
    sig = None
    for d in run_dirs:
        p = Path(d)
        if not (p / "metrics.json").exists():
            raise FileNotFoundError(f"{p}: no metrics.json")
        rep = read_json(p / "metrics.json")
        columns.append(rep["header"].get("model") or p.name)
        values.append({m: s["mean"] for m, s in rep["aggregate"]["overall"].items()})
        if sig is None and significance is None:
            for cand in (p / "significance.json", p.parent / "significance.json",
                         p.parent.parent / "significance.json"):
                if cand.exists():
                    sig = read_json(cand)
                    break
    if significance is not None:
        sig = read_json(Path(significance))
    if len(set(columns)) != len(columns):
        columns = [f"{c} ({Path(d).name})" for c, d in zip(columns, run_dirs)]

    def marker(col: str, metric: str) -> str:
        if not sig:
            return ""
        test = sig.get("tests", {}).get(f"{sig.get('reference')} vs {col}", {}).get(metric)
        return test["marker"] if test else ""

    table_rows, csv_rows = [], [["group", "metric"] + columns]
    for group, metrics in METRIC_GROUPS:
        table_rows.append((group, None))
        for m in metrics:
            vals = [v.get(m) for v in values]
            present = [(i, x) for i, x in enumerate(vals) if x is not None]
            best = None
            if len(vals) > 1 and present:
                pick = max if m in HIGHER_IS_BETTER else min
                target = pick(x for _, x in present)
                best = next(i for i, x in present if x == target)  # ties: first column
            cells = [_fmt(x) + marker(c, m) for c, x in zip(columns, vals)]
            arrow = "↑" if m in HIGHER_IS_BETTER else "↓"
            shown = [f"**{c}**" if i == best else c for i, c in enumerate(cells)]
            table_rows.append((f"  {m} {arrow}", shown))
            csv_rows.append([group, m] + cells)
    width = max(len(r[0]) for r in table_rows)
    colw = [max(len(c) + 4, 12) for c in columns]
    lines = [" " * width + " | " + " | ".join(c.rjust(w) for c, w in zip(columns, colw))]
    lines.append("-" * len(lines[0]))
    for label, cells in table_rows:
        if cells is None:
            lines.append(label)
        else:
            lines.append(label.ljust(width) + " | " + " | ".join(c.rjust(w) for c, w in zip(cells, colw)))
    if sig:
        lines.append("")
        lines.append(f"markers vs {sig.get('reference')}: † FDR p < 0.01, †† < 0.05, ††† < 0.1")
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(csv_rows)
    return "\n".join(lines) + "\n", buf.getvalue()


def cmd_report(args, raw, base) -> None:
    if not args.run_dirs:
        raise ConfigError("report: give at least one run directory")
    text, table_csv = build_report(args.run_dirs, args.significance)
    if args.out:
        with AtomicDir(args.out, args.force) as tmp:
            (tmp / "report.txt").write_text(text, encoding="utf-8")
            (tmp / "report.csv").write_text(table_csv, encoding="utf-8")
    if not args.quiet:
        sys.stdout.write(text)


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "compare": cmd_compare,
            "sweep": cmd_sweep, "jaccard": cmd_jaccard, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ptrag", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", required=name != "report", help="output directory")
        p.add_argument("--seed", type=int, help="override the seed")
        p.add_argument("--force", action="store_true", help="overwrite an existing output directory")
        p.add_argument("--quiet", action="store_true", help="only log warnings and errors")
        if name in ("eval", "jaccard"):
            p.add_argument("--checkpoint", help="run directory or checkpoint.bin")
        if name == "eval":
            p.add_argument("--split", default="test", choices=("train", "val", "test"))
        if name == "report":
            p.add_argument("run_dirs", nargs="*")
            p.add_argument("--significance", help="significance.json to take markers from")
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        raw, base = load_config(args.config)
        COMMANDS[args.command](args, raw, base)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures surface verbatim
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
