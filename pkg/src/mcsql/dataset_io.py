"""WikiSQL-format ingestion, zero-shot splits, and bundle save/load.

Tables and examples are JSON lines in the layout of the public WikiSQL
release::

    tables:   {"id": ..., "header": [...], "types": ["text"|"real", ...], "rows": [[...], ...]}
    examples: {"question": ..., "table_id": ..., "sql": {"sel": int, "agg": int, "conds": [[col, op, value], ...]}}

A saved bundle is a directory holding ``tables.jsonl``, one ``<split>.jsonl``
per split, and a ``bundle.json`` manifest with the format version, line
counts and zero-shot table ids.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .data_model import DomainError, Example, SQLQuery, TableData, TableSchema, parse_number

logger = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")
BUNDLE_FORMAT = "mcsql-bundle"
BUNDLE_VERSION = 1


class BundleError(RuntimeError):
    """Fatal problem reading a bundle (version mismatch, truncation, bad record)."""


@dataclass
class LoadReport:
    malformed: list[tuple[str, int, str]] = field(default_factory=list)  # (file, line, reason)
    unknown_table: int = 0
    unlocatable_values: int = 0
    retyped_columns: list[tuple[str, int]] = field(default_factory=list)

    @property
    def skipped(self) -> int:
        return len(self.malformed) + self.unknown_table


@dataclass
class DatasetBundle:
    examples: dict[str, list[Example]]
    tables: dict[str, TableData]
    zero_shot_ids: dict[str, set[str]] = field(default_factory=dict)

    def __post_init__(self):
        for split in SPLITS:
            self.examples.setdefault(split, [])

    def __eq__(self, other):
        if not isinstance(other, DatasetBundle):
            return NotImplemented
        return (self.tables == other.tables and self.zero_shot_ids == other.zero_shot_ids
                and all(self.examples[s] == other.examples[s] for s in SPLITS))

    def train_table_ids(self) -> set[str]:
        return {ex.table_id for ex in self.examples["train"]}

    def check(self) -> None:
        for split, exs in self.examples.items():
            for ex in exs:
                if ex.table_id not in self.tables:
                    raise BundleError(f"{split} example references unknown table {ex.table_id!r}")
        train = self.train_table_ids()
        for split, ids in self.zero_shot_ids.items():
            if ids & train:
                raise BundleError(f"zero-shot tables of {split} occur in train: {sorted(ids & train)[:5]}")


def table_to_record(t: TableData) -> dict:
    return {"id": t.table_id, "header": list(t.headers), "types": list(t.schema.col_types),
            "rows": [list(r) for r in t.rows]}


def table_from_record(rec: dict, report: LoadReport | None = None) -> TableData:
    headers = [str(h) for h in rec["header"]]
    types = [str(t).lower() for t in rec.get("types", ["text"] * len(headers))]
    rows = [list(r) for r in rec.get("rows", [])]
    if report is not None:
        # real columns with unparseable cells are read as text
        for c, ctype in enumerate(types):
            if ctype == "real" and any(parse_number(r[c]) is None for r in rows if c < len(r)):
                types[c] = "text"
                report.retyped_columns.append((str(rec["id"]), c))
    return TableData(TableSchema(str(rec["id"]), tuple(headers), tuple(types)), tuple(tuple(r) for r in rows))


def example_to_record(ex: Example) -> dict:
    return {"question": ex.question, "table_id": ex.table_id, "sql": ex.gold.to_wikisql()}


def example_from_record(rec: dict) -> Example:
    return Example(str(rec["question"]), str(rec["table_id"]), SQLQuery.from_wikisql(rec["sql"]))


def _read_lines(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                yield lineno, line


def load_tables(path, report: LoadReport | None = None) -> dict[str, TableData]:
    report = report if report is not None else LoadReport()
    path = Path(path)
    tables = {}
    for lineno, line in _read_lines(path):
        try:
            t = table_from_record(json.loads(line), report)
        except (ValueError, KeyError, TypeError, DomainError) as e:
            report.malformed.append((path.name, lineno, str(e)))
            continue
        tables[t.table_id] = t
    return tables


def load_examples(path, tables: dict[str, TableData], report: LoadReport | None = None) -> list[Example]:
    report = report if report is not None else LoadReport()
    path = Path(path)
    out = []
    for lineno, line in _read_lines(path):
        try:
            ex = example_from_record(json.loads(line))
        except (ValueError, KeyError, TypeError, DomainError) as e:
            report.malformed.append((path.name, lineno, str(e)))
            continue
        if ex.table_id not in tables:
            report.unknown_table += 1
            logger.warning("%s:%d references unknown table %r; skipped", path.name, lineno, ex.table_id)
            continue
        if not ex.values_locatable():
            report.unlocatable_values += 1
        out.append(ex)
    return out


def load_wikisql(tables_path, examples_paths: dict[str, str | Path] | str | Path,
                 ) -> tuple[dict[str, list[Example]], dict[str, TableData], LoadReport]:
    """Read WikiSQL-layout files. ``examples_paths`` maps split name to file (or is one file for train)."""
    for p in [tables_path] + (list(examples_paths.values()) if isinstance(examples_paths, dict) else [examples_paths]):
        if not Path(p).exists():
            raise FileNotFoundError(p)
    if not isinstance(examples_paths, dict):
        examples_paths = {"train": examples_paths}
    report = LoadReport()
    tables = load_tables(tables_path, report)
    examples = {split: load_examples(p, tables, report) for split, p in examples_paths.items()}
    if report.malformed:
        logger.warning("skipped %d malformed lines", len(report.malformed))
    return examples, tables, report


def derive_zero_shot(bundle: DatasetBundle, splits: Iterable[str] = ("dev", "test")) -> dict[str, set[str]]:
    """Ids of evaluation-split tables never used by a training example."""
    train = bundle.train_table_ids()
    return {s: {ex.table_id for ex in bundle.examples.get(s, [])} - train for s in splits}


def bundle_from_wikisql(tables_path, examples_paths: dict[str, str | Path]) -> tuple[DatasetBundle, LoadReport]:
    examples, tables, report = load_wikisql(tables_path, examples_paths)
    bundle = DatasetBundle(examples, tables)
    bundle.zero_shot_ids = derive_zero_shot(bundle)
    return bundle, report


def _write_jsonl(path: Path, records) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
            n += 1
    return n


def save_bundle(bundle: DatasetBundle, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    counts = {"tables": _write_jsonl(path / "tables.jsonl",
                                     (table_to_record(bundle.tables[k]) for k in sorted(bundle.tables)))}
    for split in SPLITS:
        counts[split] = _write_jsonl(path / f"{split}.jsonl", map(example_to_record, bundle.examples[split]))
    manifest = {"format": BUNDLE_FORMAT, "version": BUNDLE_VERSION, "lines": counts,
                "zero_shot_ids": {s: sorted(ids) for s, ids in sorted(bundle.zero_shot_ids.items())}}
    (path / "bundle.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _strict_records(path: Path, expected: int):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.endswith("\n"):
                raise BundleError(f"{path.name}:{lineno}: truncated line")
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise BundleError(f"{path.name}:{lineno}: {e}") from None
    if len(records) != expected:
        raise BundleError(f"{path.name}: expected {expected} lines, found {len(records)} "
                          f"(truncated after line {len(records)})")
    return records


def load_bundle(path) -> DatasetBundle:
    path = Path(path)
    manifest_path = path / "bundle.json"
    if not manifest_path.exists():
        raise BundleError(f"{path} has no bundle.json manifest")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != BUNDLE_FORMAT or manifest.get("version") != BUNDLE_VERSION:
        raise BundleError(f"unsupported bundle format {manifest.get('format')!r} "
                          f"version {manifest.get('version')!r}; expected {BUNDLE_VERSION}")
    lines = manifest["lines"]
    tables = {}
    for lineno, rec in enumerate(_strict_records(path / "tables.jsonl", lines["tables"]), 1):
        try:
            t = table_from_record(rec)
        except (KeyError, TypeError, DomainError) as e:
            raise BundleError(f"tables.jsonl:{lineno}: {e}") from None
        tables[t.table_id] = t
    examples = {}
    for split in SPLITS:
        out = []
        for lineno, rec in enumerate(_strict_records(path / f"{split}.jsonl", lines[split]), 1):
            try:
                out.append(example_from_record(rec))
            except (KeyError, TypeError, ValueError, DomainError) as e:
                raise BundleError(f"{split}.jsonl:{lineno}: {e}") from None
        examples[split] = out
    bundle = DatasetBundle(examples, tables, {s: set(ids) for s, ids in manifest["zero_shot_ids"].items()})
    bundle.check()
    return bundle
