"""Core domain types: tables, tokenized questions, skeleton SQL queries."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence, Union

MAX_CONDS = 4

Cell = Union[str, float]


class DomainError(ValueError):
    """Raised when an input violates a domain precondition."""


class Agg(IntEnum):
    # codes follow the public WikiSQL release
    NONE = 0
    MAX = 1
    MIN = 2
    COUNT = 3
    SUM = 4
    AVG = 5


class Op(IntEnum):
    EQ = 0
    GT = 1
    LT = 2

    @property
    def symbol(self) -> str:
        return OP_SYMBOLS[self]


OP_SYMBOLS = {Op.EQ: "=", Op.GT: ">", Op.LT: "<"}


COL_TYPES = ("text", "real")

_WS = re.compile(r"\s+")


def normalize(text: str) -> str:
    """Lowercase and collapse whitespace runs to single spaces."""
    return _WS.sub(" ", str(text).lower()).strip()


def parse_number(value) -> float | None:
    """Parse ``value`` as a finite float, tolerating thousands separators."""
    if isinstance(value, bool):
        return None
    if isinstance(value, (int, float)):
        x = float(value)
    else:
        s = str(value).strip().replace(",", "")
        if not s:
            return None
        try:
            x = float(s)
        except ValueError:
            return None
    return x if math.isfinite(x) else None


def render_number(x: float) -> str:
    """Canonical text form of a number: no separators, integral values without '.0'."""
    if float(x).is_integer() and abs(x) < 1e16:
        return str(int(x))
    return repr(float(x))


# ---------------------------------------------------------------------------
# tokenization

@dataclass(frozen=True)
class Token:
    text: str  # lowercased form
    start: int
    end: int


def _split_chunk(chunk: str, offset: int) -> list[Token]:
    lead: list[Token] = []
    trail: list[Token] = []
    i, j = 0, len(chunk)
    while i < j and not chunk[i].isalnum():
        # a sign glued to a number stays with it
        if chunk[i] in "+-" and i + 1 < j and chunk[i + 1].isdigit():
            break
        lead.append(Token(chunk[i].lower(), offset + i, offset + i + 1))
        i += 1
    while j > i and not chunk[j - 1].isalnum():
        trail.append(Token(chunk[j - 1].lower(), offset + j - 1, offset + j))
        j -= 1
    core = [Token(chunk[i:j].lower(), offset + i, offset + j)] if i < j else []
    return lead + core + trail[::-1]


def tokenize(question: str) -> tuple[Token, ...]:
    """Split a question into lowercased tokens with character spans.

    Whitespace separates chunks; leading and trailing punctuation of each
    chunk becomes single-character tokens. Numbers such as ``3.5`` stay whole.
    """
    if not question or not question.strip():
        raise DomainError("cannot tokenize an empty question")
    tokens: list[Token] = []
    for m in re.finditer(r"\S+", question):
        tokens.extend(_split_chunk(m.group(), m.start()))
    return tuple(tokens)


def token_texts(tokens: Sequence[Token]) -> list[str]:
    return [t.text for t in tokens]


def locate_value(tokens: Sequence[Token], value: str) -> tuple[int, int] | None:
    """First inclusive token span (st, ed) whose tokens equal the tokenized value."""
    if not str(value).strip():
        return None
    target = token_texts(tokenize(str(value)))
    words = token_texts(tokens)
    n = len(target)
    for st in range(len(words) - n + 1):
        if words[st:st + n] == target:
            return st, st + n - 1
    return None


# ---------------------------------------------------------------------------
# tables

@dataclass(frozen=True)
class TableSchema:
    table_id: str
    headers: tuple[str, ...]
    col_types: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "headers", tuple(self.headers))
        object.__setattr__(self, "col_types", tuple(self.col_types))
        if not self.headers:
            raise DomainError(f"table {self.table_id!r} has no headers")
        if len(self.headers) != len(self.col_types):
            raise DomainError(f"table {self.table_id!r}: {len(self.headers)} headers but "
                              f"{len(self.col_types)} column types")
        bad = [t for t in self.col_types if t not in COL_TYPES]
        if bad:
            raise DomainError(f"table {self.table_id!r}: unknown column types {bad}")

    @property
    def n_cols(self) -> int:
        return len(self.headers)


@dataclass(frozen=True)
class TableData:
    schema: TableSchema
    rows: tuple[tuple[Cell, ...], ...] = ()

    def __post_init__(self):
        n = self.schema.n_cols
        rows = []
        for r, row in enumerate(self.rows):
            if len(row) != n:
                raise DomainError(f"table {self.table_id!r} row {r} has {len(row)} cells, expected {n}")
            cells = []
            for value, ctype in zip(row, self.schema.col_types):
                if ctype == "real":
                    x = parse_number(value)
                    if x is None:
                        raise DomainError(f"table {self.table_id!r} row {r}: {value!r} is not a number")
                    cells.append(x)
                else:
                    cells.append(str(value))
            rows.append(tuple(cells))
        object.__setattr__(self, "rows", tuple(rows))

    @property
    def table_id(self) -> str:
        return self.schema.table_id

    @property
    def headers(self) -> tuple[str, ...]:
        return self.schema.headers

    def column(self, col: int) -> list[Cell]:
        return [row[col] for row in self.rows]

    def cell_text(self, row: int, col: int) -> str:
        return cell_to_text(self.rows[row][col])


def cell_to_text(value: Cell) -> str:
    if isinstance(value, float):
        return render_number(value)
    return str(value)


# ---------------------------------------------------------------------------
# queries

@dataclass(frozen=True)
class Condition:
    col: int
    op: Op
    value: str

    def __post_init__(self):
        if isinstance(self.op, int) and not isinstance(self.op, Op) and 0 <= self.op < len(Op):
            object.__setattr__(self, "op", Op(self.op))


@dataclass(frozen=True)
class SQLQuery:
    sel: int
    agg: Agg = Agg.NONE
    conds: tuple[Condition, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "conds", tuple(self.conds))
        if isinstance(self.agg, int) and not isinstance(self.agg, Agg) and 0 <= self.agg < len(Agg):
            object.__setattr__(self, "agg", Agg(self.agg))

    def to_wikisql(self) -> dict:
        return {"sel": int(self.sel), "agg": int(self.agg),
                "conds": [[int(c.col), int(c.op), c.value] for c in self.conds]}

    @classmethod
    def from_wikisql(cls, sql: dict) -> "SQLQuery":
        agg = int(sql["agg"])
        if agg not in range(len(Agg)):
            raise DomainError(f"unknown aggregation code {agg}")
        conds = []
        for col, op, value in sql.get("conds", []):
            if int(op) not in range(len(Op)):
                raise DomainError(f"unknown operator code {op}")
            if not isinstance(value, str):
                value = render_number(value) if parse_number(value) is not None else str(value)
            conds.append(Condition(int(col), Op(int(op)), value))
        return cls(int(sql["sel"]), Agg(agg), tuple(conds))

    def to_text(self, headers: Sequence[str] | None = None) -> str:
        return format_sql(self, headers)


def validate_query(q: SQLQuery, t: TableSchema, max_conds: int = MAX_CONDS) -> list[str]:
    """Return every skeleton violation of ``q`` against schema ``t``; empty means ok."""
    problems = []
    n = t.n_cols
    if not isinstance(q.sel, int) or not 0 <= q.sel < n:
        problems.append(f"sel out of range: {q.sel}")
    if not isinstance(q.agg, Agg):
        problems.append(f"invalid aggregation: {q.agg!r}")
    if len(q.conds) > max_conds:
        problems.append(f"too many conditions: {len(q.conds)} > {max_conds}")
    for i, c in enumerate(q.conds):
        if not isinstance(c.col, int) or not 0 <= c.col < n:
            problems.append(f"condition {i}: col out of range: {c.col}")
        if not isinstance(c.op, Op):
            problems.append(f"condition {i}: invalid operator: {c.op!r}")
        if not isinstance(c.value, str):
            problems.append(f"condition {i}: value must be a string")
    return problems


# ---------------------------------------------------------------------------
# textual form:  SELECT COUNT(col1) WHERE col0 = 'b' AND col2 > '3'

_AGG_NAMES = {a.name: a for a in Agg}


def _quote(value: str) -> str:
    return "'" + value.replace("'", "''") + "'"


def format_sql(q: SQLQuery, headers: Sequence[str] | None = None) -> str:
    def ref(i: int) -> str:
        return f"col{i}" if headers is None else '"' + headers[i].replace('"', '""') + '"'

    target = ref(q.sel) if q.agg == Agg.NONE else f"{q.agg.name}({ref(q.sel)})"
    out = f"SELECT {target}"
    if q.conds:
        out += " WHERE " + " AND ".join(f"{ref(c.col)} {c.op.symbol} {_quote(c.value)}" for c in q.conds)
    return out


_SQL_TOKEN = re.compile(r"""\s*(?:
    (?P<str>'(?:[^']|'')*')
  | (?P<ident>"(?:[^"]|"")*")
  | (?P<op>[=<>(),])
  | (?P<word>[^\s=<>(),'"]+)
)""", re.VERBOSE)


def _lex(text: str) -> list[tuple[str, str]]:
    pos, out = 0, []
    text = text.rstrip().rstrip(";")
    while pos < len(text):
        m = _SQL_TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise DomainError(f"cannot parse SQL near {text[pos:pos + 20]!r}")
        pos = m.end()
        kind = m.lastgroup
        val = m.group(kind)
        if kind == "str":
            val = val[1:-1].replace("''", "'")
        elif kind == "ident":
            val = val[1:-1].replace('""', '"')
        out.append((kind, val))
    return out


def parse_sql(text: str, headers: Sequence[str] | None = None) -> SQLQuery:
    """Parse the skeleton textual form produced by :func:`format_sql`.

    Columns are ``colN`` references or, when ``headers`` is given, quoted or
    bare header names.
    """
    toks = _lex(text)
    pos = 0

    def peek():
        return toks[pos] if pos < len(toks) else (None, None)

    def take(kind=None, value=None):
        nonlocal pos
        k, v = peek()
        if k is None or (kind and k != kind) or (value and v.upper() != value):
            raise DomainError(f"expected {value or kind}, got {v!r} in {text!r}")
        pos += 1
        return v

    def column(kind, v) -> int:
        if kind == "word" and re.fullmatch(r"col\d+", v, re.IGNORECASE):
            return int(v[3:])
        if headers is not None:
            lowered = [normalize(h) for h in headers]
            if normalize(v) in lowered:
                return lowered.index(normalize(v))
        raise DomainError(f"unknown column {v!r}")

    take("word", "SELECT")
    k, v = peek()
    agg = Agg.NONE
    if k == "word" and v.upper() in _AGG_NAMES and pos + 1 < len(toks) and toks[pos + 1][1] == "(":
        agg = _AGG_NAMES[v.upper()]
        pos += 2
        sel = column(*peek())
        pos += 1
        take("op", ")")
    else:
        sel = column(k, v)
        pos += 1
    conds = []
    if peek()[0] is not None:
        take("word", "WHERE")
        while True:
            col = column(*peek())
            pos += 1
            sym = take("op")
            ops = {s: o for o, s in OP_SYMBOLS.items()}
            if sym not in ops:
                raise DomainError(f"unknown operator {sym!r}")
            kind, v = peek()
            if kind not in ("str", "word"):
                raise DomainError(f"expected a value after {sym!r}")
            pos += 1
            conds.append(Condition(col, ops[sym], v))
            if peek()[0] is None:
                break
            take("word", "AND")
    return SQLQuery(sel, agg, tuple(conds))


# ---------------------------------------------------------------------------
# examples

@dataclass(frozen=True)
class Example:
    question: str
    table_id: str
    gold: SQLQuery
    question_tokens: tuple[Token, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if not self.question_tokens:
            object.__setattr__(self, "question_tokens", tokenize(self.question))

    @property
    def words(self) -> list[str]:
        return token_texts(self.question_tokens)

    def value_spans(self) -> list[tuple[int, int] | None]:
        return [locate_value(self.question_tokens, c.value) for c in self.gold.conds]

    def values_locatable(self) -> bool:
        return all(span is not None for span in self.value_spans())
