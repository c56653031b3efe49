"""Literal question/cell linking.

For every header the single cell most similar to some n-gram of the question is
kept; weak matches are replaced by the ``#None#`` sentinel, and question tokens
covered by a kept match are tagged MATCH for value linking.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data_model import DomainError, TableData, Token, cell_to_text, normalize

NONE_SENTINEL = "#None#"
MATCH, NOT_MATCH = 1, 0

DEFAULT_SIGMA = 0.9
DEFAULT_N_MAX = 6


@dataclass(frozen=True)
class NGram:
    start: int
    n: int
    surface: str

    @property
    def end(self) -> int:
        """Inclusive index of the last token."""
        return self.start + self.n - 1


@dataclass(frozen=True)
class CellLink:
    cell: str  # NONE_SENTINEL when nothing clears the threshold
    score: float
    ngram: NGram | None

    @property
    def retained(self) -> bool:
        return self.cell != NONE_SENTINEL


@dataclass(frozen=True)
class ContentLink:
    entries: tuple[CellLink, ...]  # one per header, in header order
    token_tags: tuple[int, ...]

    def cells(self) -> list[str]:
        return [e.cell for e in self.entries]

    def describe(self, headers: Sequence[str], tokens: Sequence[str]) -> str:
        lines = []
        for h, e in zip(headers, self.entries):
            span = f"  tokens {e.ngram.start}..{e.ngram.end} {e.ngram.surface!r}" if e.ngram else ""
            lines.append(f"{h!r:>28} -> {e.cell!r} score={e.score:.4f}{span}")
        tags = " ".join(f"{w}/{'M' if t else '-'}" for w, t in zip(tokens, self.token_tags))
        lines.append(f"tags: {tags}")
        return "\n".join(lines)


def _codes(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-32-le"), dtype=np.uint32)


def _run_lengths(q: np.ndarray, c: np.ndarray) -> np.ndarray:
    """best[i] = length of the longest common substring of q and c ending at q[i]."""
    runs = np.zeros((len(q), len(c)), dtype=np.int64)
    eq = q[:, None] == c[None, :]
    runs[:, 0] = eq[:, 0]
    for j in range(1, len(c)):
        runs[1:, j] = np.where(eq[1:, j], runs[:-1, j - 1] + 1, 0)
        runs[0, j] = eq[0, j]
    return runs.max(axis=1)


def lcs_len(a: str, b: str) -> int:
    """Length of the longest common substring of ``a`` and ``b`` after normalization."""
    a, b = normalize(a), normalize(b)
    if not a or not b:
        return 0
    return int(_run_lengths(_codes(a), _codes(b)).max())


class _Grams:
    """All word n-grams of one question as windows over its space-joined form."""

    def __init__(self, question_tokens, n_max: int):
        self.words = [normalize(t.text if isinstance(t, Token) else t) for t in question_tokens]
        self.joined = " ".join(self.words)
        self.codes = _codes(self.joined)
        offsets, pos = [], 0
        for w in self.words:
            offsets.append(pos)
            pos += len(w) + 1
        starts, ns, lo, hi = [], [], [], []
        for n in range(1, n_max + 1):
            for st in range(len(self.words) - n + 1):
                starts.append(st)
                ns.append(n)
                lo.append(offsets[st])
                hi.append(offsets[st + n - 1] + len(self.words[st + n - 1]))
        self.starts, self.ns = starts, ns
        self.lo, self.hi = np.array(lo, dtype=np.int64), np.array(hi, dtype=np.int64)
        self.length = self.hi - self.lo
        width = int(self.length.max()) if len(self.length) else 0
        offs = np.arange(width)
        self.pos = self.lo[:, None] + offs[None, :]
        self.valid = offs[None, :] < self.length[:, None]
        self.pos = np.where(self.valid, self.pos, 0)
        self.cap = offs[None, :] + 1  # a run ending inside the window cannot start before it

    def best(self, cell: str) -> tuple[float, NGram | None]:
        if not len(self.lo) or not self.joined:
            return 0.0, None
        c = normalize(cell)
        ends = _run_lengths(self.codes, _codes(c))
        lcs = np.where(self.valid, np.minimum(ends[self.pos], self.cap), 0).max(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            scores = np.where(self.length > 0, lcs / (2 * self.length) + lcs / (2 * len(c)), 0.0)
        # first maximum = shortest n-gram, then earliest start
        k = int(np.argmax(scores))
        st, n = self.starts[k], self.ns[k]
        return float(scores[k]), NGram(st, n, self.joined[self.lo[k]:self.hi[k]])


def literal_similarity(cell: str, question_tokens, n_max: int = DEFAULT_N_MAX) -> tuple[float, NGram | None]:
    """Best n-gram overlap score of ``cell`` against the question.

    For each word n-gram (n <= n_max) the score is
    ``lcs/(2*len(ngram)) + lcs/(2*len(cell))`` on normalized strings; the
    maximum is returned with its n-gram. Ties go to the shorter, then earlier
    n-gram.
    """
    if not normalize(cell):
        raise DomainError("cell must be non-empty")
    if not len(question_tokens):
        return 0.0, None
    return _Grams(question_tokens, n_max).best(cell)


def select_cells(table: TableData, question_tokens, sigma: float = DEFAULT_SIGMA,
                 n_max: int = DEFAULT_N_MAX) -> ContentLink:
    """Keep the best-matching cell per header, or the sentinel below ``sigma``."""
    n_tokens = len(question_tokens)
    tags = [NOT_MATCH] * n_tokens
    grams = _Grams(question_tokens, n_max) if n_tokens else None
    entries = []
    for col in range(table.schema.n_cols):
        seen = set()
        best_score, best_cell, best_gram = -1.0, None, None
        for row in table.rows:
            text = cell_to_text(row[col])
            key = normalize(text)
            if not key or key in seen:
                continue
            seen.add(key)
            score, gram = grams.best(text) if grams else (0.0, None)
            if score > best_score:
                best_score, best_cell, best_gram = score, text, gram
        if best_cell is None or best_score < sigma or best_gram is None:
            entries.append(CellLink(NONE_SENTINEL, max(best_score, 0.0), None))
            continue
        entries.append(CellLink(best_cell, best_score, best_gram))
        for i in range(best_gram.start, best_gram.start + best_gram.n):
            tags[i] = MATCH
    return ContentLink(tuple(entries), tuple(tags))


def token_type_ids(link: ContentLink) -> list[int]:
    return [MATCH if t == MATCH else NOT_MATCH for t in link.token_tags]
