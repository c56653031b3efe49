"""Single-table SQL execution, LF/EX matching and the evaluation report."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .data_model import Agg, Example, Op, SQLQuery, TableData, normalize, parse_number

logger = logging.getLogger(__name__)

SUBTASKS = ("sc", "sa", "wn", "wc", "wo", "wv")


class _Null:
    """Result of MAX/MIN/SUM/AVG over zero rows; equal only to itself."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NULL"

    def __reduce__(self):
        return (_Null, ())


NULL = _Null()


class ExecutionError(ValueError):
    pass


class AggregationTypeError(ExecutionError):
    """SUM or AVG over a text column."""


class ConditionTypeError(ExecutionError):
    """GT/LT against a real column with a non-numeric value."""


def _holds(cell, col_type: str, op: Op, value: str) -> bool:
    if col_type == "real":
        number = parse_number(value)
        if number is None:
            return False
        if op is Op.EQ:
            return cell == number
        return cell > number if op is Op.GT else cell < number
    a, b = normalize(str(cell)), normalize(value)
    if op is Op.EQ:
        return a == b
    return a > b if op is Op.GT else a < b


def execute(query: SQLQuery, table: TableData):
    """Filter rows by every condition, project ``sel`` and aggregate.

    Returns a list (no aggregation), an int (COUNT), a number, or ``NULL``.
    """
    types = table.schema.col_types
    if query.agg in (Agg.SUM, Agg.AVG) and types[query.sel] != "real":
        raise AggregationTypeError(f"{query.agg.name} over text column {query.sel}")
    for c in query.conds:
        # a type error regardless of which rows survive earlier conditions
        if c.op is not Op.EQ and types[c.col] == "real" and parse_number(c.value) is None:
            raise ConditionTypeError(f"cannot compare real column {c.col} with {c.value!r}")
    rows = table.rows
    for c in query.conds:
        rows = [r for r in rows if _holds(r[c.col], types[c.col], c.op, c.value)]
    values = [r[query.sel] for r in rows]
    if query.agg is Agg.NONE:
        return values
    if query.agg is Agg.COUNT:
        return len(values)
    if not values:
        return NULL
    if types[query.sel] != "real":
        # MIN/MAX on text: lexicographic on normalized strings
        pick = max if query.agg is Agg.MAX else min
        return pick(values, key=lambda v: normalize(str(v)))
    if query.agg is Agg.MAX:
        return max(values)
    if query.agg is Agg.MIN:
        return min(values)
    total = math.fsum(values)
    return total if query.agg is Agg.SUM else total / len(values)


def _cond_key(c) -> tuple:
    return (int(c.col), int(c.op), normalize(c.value))


def lf_match(pred: SQLQuery, gold: SQLQuery) -> bool:
    """Equal select column and aggregation, conditions equal as normalized multisets."""
    return (pred.sel == gold.sel and pred.agg == gold.agg
            and Counter(map(_cond_key, pred.conds)) == Counter(map(_cond_key, gold.conds)))


def _scalar_equal(a, b) -> bool:
    if a is NULL or b is NULL:
        return a is b
    if isinstance(a, (int, float)) and isinstance(b, (int, float)):
        return math.isclose(a, b, rel_tol=1e-9, abs_tol=0.0) or a == b
    return normalize(str(a)) == normalize(str(b))


def _canon(v):
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return ("n", float(v))
    return ("s", normalize(str(v)))


def results_equal(a, b) -> bool:
    if isinstance(a, list) or isinstance(b, list):
        a = a if isinstance(a, list) else [a]
        b = b if isinstance(b, list) else [b]
        if len(a) != len(b):
            return False
        # multisets; numbers from the same column compare exactly after sorting
        xs, ys = sorted(map(_canon, a)), sorted(map(_canon, b))
        return all(_scalar_equal(x[1], y[1]) and x[0] == y[0] for x, y in zip(xs, ys))
    return _scalar_equal(a, b)


def ex_match(pred: SQLQuery, gold: SQLQuery, table: TableData) -> bool:
    try:
        expected = execute(gold, table)
    except ExecutionError as gold_err:
        try:
            execute(pred, table)
        except ExecutionError as pred_err:
            return type(pred_err) is type(gold_err)
        return False
    try:
        got = execute(pred, table)
    except ExecutionError:
        return False
    return results_equal(got, expected)


# ---------------------------------------------------------------------------
# reports

@dataclass
class SliceReport:
    count: int = 0
    lf: int = 0
    ex: int = 0
    subtasks: dict = field(default_factory=lambda: {k: 0 for k in SUBTASKS})

    def rate(self, n: int) -> float:
        return n / self.count if self.count else 0.0

    @property
    def lf_accuracy(self) -> float:
        return self.rate(self.lf)

    @property
    def ex_accuracy(self) -> float:
        return self.rate(self.ex)

    def subtask_accuracy(self) -> dict[str, float]:
        return {k: self.rate(v) for k, v in self.subtasks.items()}

    def to_dict(self) -> dict:
        return {"count": self.count, "lf_accuracy": self.lf_accuracy, "ex_accuracy": self.ex_accuracy,
                **{f"{k}_accuracy": v for k, v in self.subtask_accuracy().items()}}


@dataclass
class EvalReport:
    overall: SliceReport
    zero_shot: SliceReport | None = None
    missing_tables: int = 0
    teacher_forced: bool = True
    tags: dict = field(default_factory=dict)

    @property
    def lf_accuracy(self) -> float:
        return self.overall.lf_accuracy

    @property
    def ex_accuracy(self) -> float:
        return self.overall.ex_accuracy

    def subtask_accuracy(self) -> dict[str, float]:
        return self.overall.subtask_accuracy()

    def to_dict(self) -> dict:
        out = {"overall": self.overall.to_dict(), "missing_tables": self.missing_tables,
               "teacher_forced": self.teacher_forced, "tags": dict(self.tags)}
        if self.zero_shot is not None:
            out["zero_shot"] = self.zero_shot.to_dict()
        return out

    def grid(self) -> str:
        cols = [k.upper() for k in SUBTASKS] + ["LF", "EX"]
        lines = [f"{'slice':<10} {'n':>6} " + " ".join(f"{c:>6}" for c in cols)]
        for name, s in (("full", self.overall), ("zero-shot", self.zero_shot)):
            if s is None:
                continue
            vals = [s.subtask_accuracy()[k] for k in SUBTASKS] + [s.lf_accuracy, s.ex_accuracy]
            lines.append(f"{name:<10} {s.count:>6} " + " ".join(f"{100 * v:6.1f}" for v in vals))
        if self.tags:
            lines.append("tags: " + ", ".join(f"{k}={v}" for k, v in sorted(self.tags.items())))
        return "\n".join(lines)


def write_report(report: EvalReport, path, split: str = "dev") -> None:
    """Append one JSON line per slice."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        base = {"split": split, "teacher_forced": report.teacher_forced, "tags": report.tags}
        fh.write(json.dumps({**base, "slice": "full", **report.overall.to_dict()}, sort_keys=True) + "\n")
        if report.zero_shot is not None:
            fh.write(json.dumps({**base, "slice": "zero_shot", **report.zero_shot.to_dict()}, sort_keys=True) + "\n")


def subtask_hits(pred: Mapping, gold: SQLQuery) -> dict[str, bool]:
    """Score each sub-task prediction against the gold query.

    ``pred`` holds sc, sa, wn, wc (column list), wo and wv (per gold condition
    in gold order). WC is compared as a set, WO/WV are correct when every
    condition's operator / normalized value is.
    """
    gold_cols = [c.col for c in gold.conds]
    return {
        "sc": pred["sc"] == gold.sel,
        "sa": pred["sa"] == int(gold.agg),
        "wn": pred["wn"] == len(gold.conds),
        "wc": sorted(pred["wc"]) == sorted(gold_cols),
        "wo": list(pred["wo"]) == [int(c.op) for c in gold.conds],
        "wv": [normalize(v) for v in pred["wv"]] == [normalize(c.value) for c in gold.conds],
    }


def pipeline_subtasks(pred: SQLQuery, gold: SQLQuery) -> dict:
    """Sub-task view of a decoded query, aligning conditions to gold by column."""
    by_col = {c.col: c for c in pred.conds}
    ops, values = [], []
    for g in gold.conds:
        p = by_col.get(g.col)
        ops.append(int(p.op) if p else -1)
        values.append(p.value if p else "")
    return {"sc": pred.sel, "sa": int(pred.agg), "wn": len(pred.conds), "wc": [c.col for c in pred.conds],
            "wo": ops, "wv": values}


def evaluate(model, examples: Sequence[Example], tables: Mapping[str, TableData],
             zero_shot_ids=None, teacher_forced: bool = True, tags: dict | None = None) -> EvalReport:
    """Decode every example and score LF, EX and the six sub-tasks.

    ``model`` needs ``predict_batch``; teacher-forced sub-task scoring also
    uses ``predict_subtasks_batch`` when present, otherwise sub-tasks are read
    off the decoded query.
    """
    overall = SliceReport()
    zero = SliceReport() if zero_shot_ids is not None else None
    zero_shot_ids = set(zero_shot_ids or ())
    missing = [ex for ex in examples if ex.table_id not in tables]
    if missing:
        logger.warning("%d examples reference missing tables and count as wrong", len(missing))
    present = [ex for ex in examples if ex.table_id in tables]
    preds = model.predict_batch(present, tables) if present else []
    if teacher_forced and hasattr(model, "predict_subtasks_batch") and present:
        subs = model.predict_subtasks_batch(present, tables)
    else:
        subs = [pipeline_subtasks(p, ex.gold) for p, ex in zip(preds, present)]

    def add(s: SliceReport, lf: bool, ex_ok: bool, hits: dict):
        s.count += 1
        s.lf += lf
        s.ex += ex_ok
        for k in SUBTASKS:
            s.subtasks[k] += hits[k]

    for ex, pred, sub in zip(present, preds, subs):
        table = tables[ex.table_id]
        lf = lf_match(pred, ex.gold)
        ex_ok = lf or ex_match(pred, ex.gold, table)
        hits = subtask_hits(sub, ex.gold)
        add(overall, lf, ex_ok, hits)
        if zero is not None and ex.table_id in zero_shot_ids:
            add(zero, lf, ex_ok, hits)
    none = {k: False for k in SUBTASKS}
    for ex in missing:
        add(overall, False, False, none)
        if zero is not None and ex.table_id in zero_shot_ids:
            add(zero, False, False, none)
    return EvalReport(overall, zero, len(missing), teacher_forced, dict(tags or {}))


def report_as_json(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True)

