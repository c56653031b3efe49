"""Desk-scale synthetic benchmark with guaranteed zero-shot tables.

Tables draw English headers from a themed catalog and fill text columns with
pronounceable pseudo-words (never substrings of any header) and real columns
with integers from column-specific, non-overlapping ranges. Questions come
from templates in which every condition value appears verbatim. Some
condition phrases name their column and some only give the value, so the
column must be recovered from table content.
"""

from __future__ import annotations

import random
from dataclasses import asdict, dataclass

from .data_model import MAX_CONDS, Agg, Condition, DomainError, Example, Op, SQLQuery, TableData, TableSchema
from .data_model import normalize, render_number, validate_query
from .dataset_io import DatasetBundle, derive_zero_shot


class SynthConfigError(ValueError):
    """The requested benchmark cannot be generated."""


# header -> (type, low, high); text columns ignore the range
CATALOG: dict[str, tuple[str, int, int]] = {
    "player": ("text", 0, 0), "team": ("text", 0, 0), "position": ("text", 0, 0),
    "nationality": ("text", 0, 0), "school": ("text", 0, 0), "club": ("text", 0, 0),
    "coach": ("text", 0, 0), "venue": ("text", 0, 0), "opponent": ("text", 0, 0),
    "city": ("text", 0, 0), "country": ("text", 0, 0), "region": ("text", 0, 0),
    "artist": ("text", 0, 0), "album": ("text", 0, 0), "label": ("text", 0, 0),
    "genre": ("text", 0, 0), "director": ("text", 0, 0), "film": ("text", 0, 0),
    "studio": ("text", 0, 0), "network": ("text", 0, 0), "host": ("text", 0, 0),
    "party": ("text", 0, 0), "candidate": ("text", 0, 0), "district": ("text", 0, 0),
    "author": ("text", 0, 0), "publisher": ("text", 0, 0), "title": ("text", 0, 0),
    "builder": ("text", 0, 0), "owner": ("text", 0, 0), "engine": ("text", 0, 0),
    "winner": ("text", 0, 0), "runner up": ("text", 0, 0), "captain": ("text", 0, 0),
    "home team": ("text", 0, 0), "away team": ("text", 0, 0), "song": ("text", 0, 0),
    "station": ("text", 0, 0), "operator": ("text", 0, 0), "manager": ("text", 0, 0),
    "county": ("text", 0, 0),
    "year": ("real", 1900, 2020), "points": ("real", 0, 99), "goals": ("real", 0, 60),
    "wins": ("real", 0, 40), "losses": ("real", 0, 40), "attendance": ("real", 2000, 90000),
    "rank": ("real", 1, 30), "round": ("real", 1, 12), "pick": ("real", 1, 250),
    "population": ("real", 100000, 9000000), "area": ("real", 100, 50000), "votes": ("real", 5000, 900000),
    "seats": ("real", 1, 400), "episodes": ("real", 1, 200), "season": ("real", 1, 40),
    "height": ("real", 150, 230), "weight": ("real", 50, 140), "age": ("real", 16, 45),
    "games": ("real", 1, 82), "laps": ("real", 10, 300), "grid": ("real", 1, 24),
    "viewers": ("real", 1000, 20000), "length": ("real", 300, 2000), "capacity": ("real", 10000, 99000),
    "tracks": ("real", 5, 30), "speed": ("real", 40, 400),
}

SELECT_TEMPLATES = {
    Agg.NONE: ("what is the {col}", "which {col}", "name the {col}", "what {col}"),
    Agg.MAX: ("what is the highest {col}", "what is the largest {col}", "name the maximum {col}"),
    Agg.MIN: ("what is the lowest {col}", "what is the smallest {col}", "name the minimum {col}"),
    Agg.COUNT: ("how many {col}", "what is the number of {col}", "count the {col}"),
    Agg.SUM: ("what is the total {col}", "what is the sum of {col}", "how many {col} in total"),
    Agg.AVG: ("what is the average {col}", "what is the mean {col}", "name the average {col}"),
}

# {col} is the header, {val} the value; the last EQ forms omit the header
COND_TEMPLATES = {
    Op.EQ: ("when {col} is {val}", "with {col} {val}", "where the {col} is {val}", "for {val}", "with {val}"),
    Op.GT: ("when {col} is greater than {val}", "with {col} more than {val}", "where {col} is above {val}"),
    Op.LT: ("when {col} is less than {val}", "with {col} fewer than {val}", "where {col} is below {val}"),
}

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kr", "st", "tr")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ou")
_CODAS = ("", "", "n", "r", "l", "s", "k", "m")


@dataclass
class SynthConfig:
    n_tables: int = 40
    rows_per_table: tuple[int, int] = (8, 20)
    headers_per_table: tuple[int, int] = (5, 7)
    real_fraction: float = 0.4
    examples_per_table: int = 50
    zero_shot_table_fraction: float = 0.25
    unseen_header_fraction: float = 0.2  # catalog share reserved for zero-shot tables
    cond_count_weights: tuple[float, ...] = (0.10, 0.45, 0.30, 0.10, 0.05)
    eval_fraction: float = 0.3  # share of a seen table's examples moved to dev/test
    seed: int = 0

    def __post_init__(self):
        self.rows_per_table = tuple(self.rows_per_table)
        self.headers_per_table = tuple(self.headers_per_table)
        self.cond_count_weights = tuple(self.cond_count_weights)
        if not 0 < self.zero_shot_table_fraction < 1:
            raise SynthConfigError("zero_shot_table_fraction must lie in (0, 1)")
        for name in ("n_tables", "examples_per_table"):
            if getattr(self, name) < 1:
                raise SynthConfigError(f"{name} must be >= 1")
        for name in ("rows_per_table", "headers_per_table"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise SynthConfigError(f"{name} must be a range 1 <= lo <= hi, got {(lo, hi)}")
        if not 0 <= self.real_fraction <= 1 or not 0 <= self.unseen_header_fraction < 1:
            raise SynthConfigError("fractions must lie in [0, 1)")
        if not 0 < self.eval_fraction < 1:
            raise SynthConfigError("eval_fraction must lie in (0, 1)")
        if len(self.cond_count_weights) > MAX_CONDS + 1 or sum(self.cond_count_weights) <= 0:
            raise SynthConfigError(f"cond_count_weights needs 1..{MAX_CONDS + 1} weights with a positive sum")
        n_zero = self.n_zero_shot
        if n_zero < 1 or n_zero >= self.n_tables:
            raise SynthConfigError(f"{self.n_tables} tables at fraction {self.zero_shot_table_fraction} "
                                   f"leave no zero-shot or no training table")
        if self.headers_per_table[1] > len(CATALOG):
            raise SynthConfigError(f"at most {len(CATALOG)} headers per table")

    @property
    def n_zero_shot(self) -> int:
        return max(1, round(self.n_tables * self.zero_shot_table_fraction))

    def to_dict(self) -> dict:
        return asdict(self)


def _pseudo_word(rng: random.Random) -> str:
    return "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) + rng.choice(_CODAS)
                   for _ in range(rng.choice((2, 2, 3))))


class _ValueSource:
    """Pseudo-word values, unique across the whole benchmark, never inside a header."""

    def __init__(self, rng: random.Random):
        self.rng = rng
        self.used: set[str] = set()
        self.forbidden = " ".join(CATALOG) + " " + " ".join(
            t for group in (SELECT_TEMPLATES, COND_TEMPLATES) for ts in group.values() for t in ts)

    def __call__(self) -> str:
        while True:
            n_words = 1 if self.rng.random() < 0.7 else 2
            value = " ".join(_pseudo_word(self.rng) for _ in range(n_words))
            if value in self.used or any(w in self.forbidden for w in value.split()):
                continue
            self.used.add(value)
            return value.title()


def _make_table(table_id: str, headers: list[str], n_rows: int, words: _ValueSource,
                rng: random.Random) -> TableData:
    types = tuple(CATALOG[h][0] for h in headers)
    columns = []
    for h, t in zip(headers, types):
        if t == "text":
            pool = [words() for _ in range(max(2, n_rows * 2 // 3))]
            columns.append([rng.choice(pool) for _ in range(n_rows)])
        else:
            lo, hi = CATALOG[h][1:]
            columns.append([float(rng.randint(lo, hi)) for _ in range(n_rows)])
    rows = tuple(zip(*columns))
    return TableData(TableSchema(table_id, tuple(headers), types), rows)


def _pick_headers(rng: random.Random, n: int, pool: list[str], real_fraction: float) -> list[str]:
    reals = [h for h in pool if CATALOG[h][0] == "real"]
    texts = [h for h in pool if CATALOG[h][0] == "text"]
    n_real = min(len(reals), max(1, round(n * real_fraction)))
    n_text = min(len(texts), n - n_real)
    n_real = min(len(reals), n - n_text)
    # real columns of one table must have non-overlapping ranges so values link to one column
    chosen_real: list[str] = []
    for h in rng.sample(reals, len(reals)):
        lo, hi = CATALOG[h][1:]
        if all(hi < CATALOG[o][1] or lo > CATALOG[o][2] for o in chosen_real):
            chosen_real.append(h)
        if len(chosen_real) == n_real:
            break
    headers = rng.sample(texts, n_text) + chosen_real
    rng.shuffle(headers)
    return headers


def _render(rng: random.Random, table: TableData, query: SQLQuery) -> str:
    sel_header = table.headers[query.sel]
    parts = [rng.choice(SELECT_TEMPLATES[query.agg]).format(col=sel_header)]
    phrases = []
    for c in query.conds:
        phrases.append(rng.choice(COND_TEMPLATES[c.op]).format(col=table.headers[c.col], val=c.value))
    if phrases:
        parts.append(" and ".join(phrases))
    return " ".join(parts) + " ?"


def _sample_query(rng: random.Random, table: TableData, n_conds: int) -> SQLQuery:
    n_cols = table.schema.n_cols
    types = table.schema.col_types
    real_cols = [c for c in range(n_cols) if types[c] == "real"]
    sel = rng.randrange(n_cols)
    if types[sel] == "real":
        agg = rng.choice(list(Agg))
    else:
        agg = rng.choice((Agg.NONE, Agg.NONE, Agg.COUNT))
    others = [c for c in range(n_cols) if c != sel]
    cols = rng.sample(others, min(n_conds, len(others)))
    row = rng.choice(table.rows)
    conds = []
    for c in cols:
        if c in real_cols:
            op = rng.choice((Op.EQ, Op.GT, Op.LT))
            value = render_number(row[c])
        else:
            op = Op.EQ
            value = row[c]
        conds.append(Condition(c, op, value))
    return SQLQuery(sel, agg, tuple(conds))


def _examples_for(rng: random.Random, table: TableData, count: int, weights) -> list[Example]:
    seen: set[str] = set()
    out = []
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > 50 * count:
            raise SynthConfigError(f"table {table.table_id}: only {len(out)} distinct questions found, "
                                   f"{count} requested; reduce examples_per_table or enlarge tables")
        n_conds = rng.choices(range(len(weights)), weights=weights)[0]
        query = _sample_query(rng, table, n_conds)
        question = _render(rng, table, query)
        if normalize(question) in seen:
            continue
        ex = Example(question, table.table_id, query)
        if validate_query(query, table.schema) or not ex.values_locatable():
            continue
        seen.add(normalize(question))
        out.append(ex)
    return out


def generate_synthetic(config: SynthConfig | None = None) -> DatasetBundle:
    """Deterministic benchmark: the last ``n_zero_shot`` tables occur only in dev and test."""
    config = config or SynthConfig()
    rng = random.Random(config.seed)
    names = sorted(CATALOG)
    held_out = set(rng.sample(names, round(len(names) * config.unseen_header_fraction)))
    seen_pool = [h for h in names if h not in held_out]
    words = _ValueSource(rng)
    n_zero = config.n_zero_shot
    n_seen = config.n_tables - n_zero
    tables: dict[str, TableData] = {}
    splits: dict[str, list[Example]] = {"train": [], "dev": [], "test": []}
    for i in range(config.n_tables):
        zero_shot = i >= n_seen
        table_id = f"{'z' if zero_shot else 's'}-{config.seed}-{i:03d}"
        n_headers = rng.randint(*config.headers_per_table)
        headers = _pick_headers(rng, n_headers, names if zero_shot else seen_pool, config.real_fraction)
        table = _make_table(table_id, headers, rng.randint(*config.rows_per_table), words, rng)
        tables[table_id] = table
        exs = _examples_for(rng, table, config.examples_per_table, config.cond_count_weights)
        if zero_shot:
            half = len(exs) // 2
            splits["dev"].extend(exs[:half])
            splits["test"].extend(exs[half:])
        else:
            n_eval = round(len(exs) * config.eval_fraction)
            n_dev = n_eval // 2
            splits["train"].extend(exs[n_eval:])
            splits["dev"].extend(exs[:n_dev])
            splits["test"].extend(exs[n_dev:n_eval])
    bundle = DatasetBundle(splits, tables)
    bundle.zero_shot_ids = derive_zero_shot(bundle)
    expected = {tid for tid in tables if tid.startswith("z-")}
    for split, ids in bundle.zero_shot_ids.items():
        if not ids <= expected:
            raise DomainError(f"zero-shot invariant broken in {split}: {sorted(ids - expected)}")
    bundle.check()
    return bundle


def subsample_train(bundle: DatasetBundle, fraction: float, seed: int) -> DatasetBundle:
    """Keep a seeded ``fraction`` of the training examples; evaluation splits are untouched."""
    if not 0 < fraction <= 1:
        raise ValueError("train fraction must lie in (0, 1]")
    train = bundle.examples["train"]
    keep = max(1, round(len(train) * fraction))
    idx = sorted(random.Random(seed).sample(range(len(train)), keep))
    examples = dict(bundle.examples)
    examples["train"] = [train[i] for i in idx]
    out = DatasetBundle(examples, bundle.tables)
    out.zero_shot_ids = derive_zero_shot(out)
    return out
