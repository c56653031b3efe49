"""Command-line entry point: gen-data, train, eval, link, execute.

Every command that takes ``--out`` writes the resolved ``run_config.json``
there, so a run can be repeated with ``--config out/run_config.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .content_matcher import select_cells
from .data_model import DomainError, SQLQuery, parse_sql, token_texts, tokenize
from .dataset_io import SPLITS, BundleError, DatasetBundle, bundle_from_wikisql, load_bundle, load_tables
from .dataset_io import save_bundle
from .experiment import desk_meta_config, desk_model_config, train_parser
from .meta_trainer import EpisodeConfigError, MetaConfig
from .parser import CheckpointError, Parser
from .sql_eval import ExecutionError, evaluate, execute, write_report
from .submodules import ModelConfig
from .synthetic import SynthConfig, SynthConfigError, generate_synthetic

logger = logging.getLogger("mcsql")

COMMANDS = ("gen-data", "train", "eval", "link", "execute")
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    out: str | None = None
    data: str | None = None
    tables: str | None = None
    examples: dict = field(default_factory=dict)  # split -> path
    checkpoint: str | None = None
    no_tc: bool = False
    no_vl: bool = False
    no_ml: bool = False
    train_fraction: float = 1.0
    split: str = "dev"
    pipeline: bool = False
    model: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise UsageError(f"unknown command {self.command!r}")
        if not 0 < self.train_fraction <= 1:
            raise UsageError("--train-fraction must lie in (0, 1]")
        if self.split not in SPLITS:
            raise UsageError(f"--split must be one of {SPLITS}")

    def model_config(self) -> ModelConfig:
        base = desk_model_config(self.seed, self.no_tc, self.no_vl)
        raw = dict(self.model)
        enc = replace(base.encoder, **raw.pop("encoder", {}))
        return replace(base, encoder=enc, **{**raw, "seed": self.seed, "no_tc": self.no_tc, "no_vl": self.no_vl})

    def meta_config(self) -> MetaConfig:
        return desk_meta_config(**{**self.meta, "seed": self.seed})

    def synth_config(self) -> SynthConfig:
        return SynthConfig(**{**self.synth, "seed": self.seed})

    def to_dict(self) -> dict:
        return asdict(self)

    def echo(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "run_config.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def build_arg_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file with RunConfig fields; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="bundle directory written by gen-data")
    common.add_argument("--tables", help="tables file (line-delimited JSON)")
    for split in SPLITS:
        common.add_argument(f"--examples-{split}", dest=f"examples_{split}", help=f"{split} examples file")
    common.add_argument("--checkpoint", help="model checkpoint (eval)")
    common.add_argument("--no-tc", action="store_true", default=None, help="drop table content inputs")
    common.add_argument("--no-vl", action="store_true", default=None, help="drop value-linking tags")
    common.add_argument("--no-ml", action="store_true", default=None, help="mini-batch instead of meta training")
    common.add_argument("--train-fraction", type=float)
    common.add_argument("--gamma", type=float)
    common.add_argument("--n", type=int, help="tables per episode half")
    common.add_argument("--k", type=int, help="examples per table")
    common.add_argument("--tasks", type=int, help="number of training steps")
    common.add_argument("--sigma", type=float, help="cell similarity threshold")

    ap = argparse.ArgumentParser(prog="mcsql", description="Content-enhanced text-to-SQL toolkit")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic benchmark bundle")
    sub.add_parser("train", parents=[common], help="train a parser and write checkpoint + log")
    ev = sub.add_parser("eval", parents=[common], help="print a sub-task grid with the zero-shot slice")
    ev.add_argument("--split", choices=SPLITS)
    ev.add_argument("--pipeline", action="store_true", default=None,
                    help="score sub-tasks on the decoded query instead of teacher-forced")
    ln = sub.add_parser("link", parents=[common], help="show the cells linked to a question")
    ln.add_argument("--table-id", required=True)
    ln.add_argument("--question", required=True)
    ex = sub.add_parser("execute", parents=[common], help="run a query against a table")
    ex.add_argument("--table-id", required=True)
    ex.add_argument("--sql", required=True, help="e.g. SELECT COUNT(col1) WHERE col0 = 'x'")
    return ap


def resolve(args: argparse.Namespace) -> RunConfig:
    raw: dict = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from None
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
    raw["command"] = args.command
    for name in ("seed", "out", "data", "tables", "checkpoint", "no_tc", "no_vl", "no_ml", "train_fraction"):
        value = getattr(args, name, None)
        if value is not None:
            raw[name] = value
    for name in ("split", "pipeline"):
        if getattr(args, name, None) is not None:
            raw[name] = getattr(args, name)
    examples = dict(raw.get("examples", {}))
    for split in SPLITS:
        if getattr(args, f"examples_{split}") is not None:
            examples[split] = getattr(args, f"examples_{split}")
    raw["examples"] = examples
    meta = dict(raw.get("meta", {}))
    for flag, key in (("gamma", "gamma"), ("n", "n_way"), ("k", "k_shot"), ("tasks", "task_count")):
        if getattr(args, flag) is not None:
            meta[key] = getattr(args, flag)
    raw["meta"] = meta
    if args.sigma is not None:
        raw["model"] = {**raw.get("model", {}), "sigma": args.sigma}
    known = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    try:
        run = RunConfig(**raw)
        # fail fast on bad nested sections
        run.model_config()
        run.meta_config()
        if run.command == "gen-data":
            run.synth_config()
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid configuration: {e}") from None
    return run


def _load_data(run: RunConfig) -> DatasetBundle:
    if run.data:
        return load_bundle(run.data)
    if not run.tables or not run.examples:
        raise UsageError("give --data DIR or --tables with --examples-<split>")
    bundle, report = bundle_from_wikisql(run.tables, run.examples)
    if report.skipped:
        logger.warning("skipped %d malformed or dangling example lines", report.skipped)
    return bundle


def _require_out(run: RunConfig) -> Path:
    if not run.out:
        raise UsageError(f"{run.command} needs --out")
    return Path(run.out)


def cmd_gen_data(run: RunConfig) -> int:
    out = _require_out(run)
    bundle = generate_synthetic(run.synth_config())
    save_bundle(bundle, out)
    run.echo(out)
    sizes = ", ".join(f"{s}={len(bundle.examples[s])}" for s in SPLITS)
    print(f"wrote {len(bundle.tables)} tables ({sizes}) to {out}")
    return 0


def cmd_train(run: RunConfig) -> int:
    out = _require_out(run)
    bundle = _load_data(run)
    run.echo(out)
    outcome = train_parser(bundle, run.model_config(), run.meta_config(), no_ml=run.no_ml,
                           train_fraction=run.train_fraction, log_path=out / "train_log.jsonl")
    meta = {"no_tc": run.no_tc, "no_vl": run.no_vl, "no_ml": run.no_ml, "train_fraction": run.train_fraction,
            "seed": run.seed, "best_dev_lf": outcome.train.best_dev_lf, "steps": len(outcome.train.log)}
    outcome.parser.save(out / "model.pt", meta)
    if outcome.report is not None:
        write_report(outcome.report, out / "eval.jsonl", "dev")
        print(outcome.report.grid())
    print(f"checkpoint written to {out / 'model.pt'}")
    return 0


def cmd_eval(run: RunConfig) -> int:
    if not run.checkpoint:
        raise UsageError("eval needs --checkpoint")
    parser, meta = Parser.load(run.checkpoint)
    bundle = _load_data(run)
    tags = {k: meta[k] for k in ("no_tc", "no_vl", "no_ml", "train_fraction", "seed") if k in meta}
    report = evaluate(parser, bundle.examples[run.split], bundle.tables, bundle.zero_shot_ids.get(run.split, set()),
                      teacher_forced=not run.pipeline, tags=tags)
    print(report.grid())
    if run.out:
        run.echo(run.out)
        write_report(report, Path(run.out) / "eval.jsonl", run.split)
    return 0


def _table(run: RunConfig, table_id: str):
    if run.data:
        tables = load_bundle(run.data).tables
    elif run.tables:
        tables = load_tables(run.tables)
    else:
        raise UsageError("give --data DIR or --tables PATH")
    if table_id not in tables:
        raise KeyError(f"table {table_id!r} not found")
    return tables[table_id]


def cmd_link(run: RunConfig, table_id: str, question: str) -> int:
    table = _table(run, table_id)
    cfg = run.model_config()
    tokens = tokenize(question)
    link = select_cells(table, tokens, cfg.sigma, cfg.n_max)
    print(link.describe(table.headers, token_texts(tokens)))
    return 0


def cmd_execute(run: RunConfig, table_id: str, sql: str) -> int:
    table = _table(run, table_id)
    query: SQLQuery = parse_sql(sql, table.headers)
    result = execute(query, table)
    print(json.dumps(result if isinstance(result, (list, int, float)) else repr(result)))
    return 0


def configure_logging() -> None:
    name = os.environ.get("MCSQL_LOG_LEVEL", "warn").lower()
    level = LOG_LEVELS.get(name)
    if level is None:
        raise UsageError(f"MCSQL_LOG_LEVEL must be one of error, warn, info, debug (got {name!r})")
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv=None) -> int:
    ap = build_arg_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        configure_logging()
        run = resolve(args)
        if run.command == "gen-data":
            return cmd_gen_data(run)
        if run.command == "train":
            return cmd_train(run)
        if run.command == "eval":
            return cmd_eval(run)
        if run.command == "link":
            return cmd_link(run, args.table_id, args.question)
        return cmd_execute(run, args.table_id, args.sql)
    except UsageError as e:
        ap.print_usage(sys.stderr)
        print(f"mcsql: error: {e}", file=sys.stderr)
        return 2
    except (OSError, KeyError, DomainError, BundleError, CheckpointError, ExecutionError, EpisodeConfigError,
            SynthConfigError, ValueError) as e:
        print(f"mcsql: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
