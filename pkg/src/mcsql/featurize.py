"""Turn (example, table) pairs into padded tensors for the parser."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch

from .content_matcher import DEFAULT_N_MAX, DEFAULT_SIGMA, NONE_SENTINEL, ContentLink, select_cells, token_type_ids
from .data_model import MAX_CONDS, Example, TableData, normalize
from .encoder import Vocab, build_input, header_words

logger = logging.getLogger(__name__)


@dataclass
class Features:
    example: Example
    input_ids: list[int]
    positions: list[int]
    segments: list[int]
    question_span: list[int]
    header_spans: list[list[int]]
    question_chars: list[int]
    cell_chars: list[list[int]]
    type_ids: list[int]
    link: ContentLink
    # gold labels; spans are inclusive token indices
    sel: int
    agg: int
    cond_cols: list[int]
    cond_ops: list[int]
    cond_spans: list[tuple[int, int]]
    gold_ok: bool

    @property
    def n_tokens(self) -> int:
        return len(self.question_span)

    @property
    def n_headers(self) -> int:
        return len(self.header_spans)


class Featurizer:
    def __init__(self, words: Vocab, chars: Vocab, sigma: float = DEFAULT_SIGMA,
                 n_max: int = DEFAULT_N_MAX, max_len: int = 128, max_conds: int = MAX_CONDS,
                 header_positions: str = "restart"):
        self.words = words
        self.chars = chars
        self.sigma = sigma
        self.n_max = n_max
        self.max_len = max_len
        self.max_conds = max_conds
        self.header_positions = header_positions
        self._cache: dict[tuple, tuple[Example, TableData, Features]] = {}
        self.skipped = 0

    def char_ids(self, text: str) -> list[int]:
        if text == NONE_SENTINEL:
            return [self.chars.stoi[NONE_SENTINEL]]
        return self.chars.ids(normalize(text)) or [self.chars.unk]

    def __call__(self, example: Example, table: TableData) -> Features:
        key = (id(example), id(table))
        hit = self._cache.get(key)
        if hit is not None and hit[0] is example and hit[1] is table:
            return hit[2]
        feats = self._featurize(example, table)
        self._cache[key] = (example, table, feats)
        return feats

    def _featurize(self, ex: Example, table: TableData) -> Features:
        words = ex.words
        seq = build_input(words, [header_words(h) for h in table.headers], self.max_len, self.header_positions)
        n_q = len(seq.question_span)
        tokens = ex.question_tokens[:n_q]
        link = select_cells(table, tokens, self.sigma, self.n_max)
        gold = ex.gold
        spans = [span for span in ex.value_spans()]
        gold_ok = (all(s is not None and s[1] < n_q for s in spans)
                   and len(gold.conds) <= self.max_conds
                   and all(0 <= c.col < table.schema.n_cols for c in gold.conds)
                   and 0 <= gold.sel < table.schema.n_cols)
        if not gold_ok:
            self.skipped += 1
            logger.debug("gold value not locatable for %r", ex.question)
        return Features(
            example=ex,
            input_ids=self.words.ids(seq.tokens),
            positions=seq.positions,
            segments=seq.segments,
            question_span=seq.question_span,
            header_spans=seq.header_spans,
            question_chars=self.char_ids(" ".join(t.text for t in tokens)),
            cell_chars=[self.char_ids(c) for c in link.cells()],
            type_ids=token_type_ids(link),
            link=link,
            sel=gold.sel,
            agg=int(gold.agg),
            cond_cols=[c.col for c in gold.conds],
            cond_ops=[int(c.op) for c in gold.conds],
            cond_spans=[s if s is not None else (0, 0) for s in spans],
            gold_ok=gold_ok,
        )


def _pad(rows, fill=0):
    width = max((len(r) for r in rows), default=0)
    return [list(r) + [fill] * (width - len(r)) for r in rows]


@dataclass
class Batch:
    features: list[Features]
    ids: torch.Tensor  # B x L
    positions: torch.Tensor
    segments: torch.Tensor
    pad_mask: torch.Tensor  # True at padding
    q_index: torch.Tensor  # B x n (positions in the sequence)
    q_mask: torch.Tensor  # B x n
    h_index: torch.Tensor  # B x l x t
    h_tok_len: torch.Tensor  # B x l (0 for padded headers)
    h_mask: torch.Tensor  # B x l
    q_chars: torch.Tensor  # B x nc
    q_char_len: torch.Tensor  # B
    cell_chars: torch.Tensor  # B x l x m
    cell_len: torch.Tensor  # B x l
    type_ids: torch.Tensor  # B x n
    # gold
    sel: torch.Tensor
    agg: torch.Tensor
    wn: torch.Tensor
    wc: torch.Tensor  # B x l multi-hot
    cond_cols: torch.Tensor  # B x C
    cond_ops: torch.Tensor
    cond_st: torch.Tensor
    cond_ed: torch.Tensor
    cond_mask: torch.Tensor  # B x C
    valid: torch.Tensor  # B, gold usable for the loss

    def __len__(self):
        return len(self.features)


def collate(features: list[Features], max_conds: int = MAX_CONDS) -> Batch:
    long = lambda x: torch.tensor(x, dtype=torch.long)  # noqa: E731
    n_headers = max(f.n_headers for f in features)
    n_tok = max(max(f.n_tokens for f in features), 1)
    t_max = max(len(s) for f in features for s in f.header_spans)
    m_max = max(len(c) for f in features for c in f.cell_chars)
    C = max_conds

    h_index, h_len, cells, cell_len, wc = [], [], [], [], []
    cols, ops, st, ed, cmask = [], [], [], [], []
    for f in features:
        spans = f.header_spans + [[]] * (n_headers - f.n_headers)
        h_index.append(_pad([s + [0] * (t_max - len(s)) for s in spans]))
        h_len.append([len(s) for s in spans])
        cc = f.cell_chars + [[]] * (n_headers - f.n_headers)
        cells.append([c + [0] * (m_max - len(c)) for c in cc])
        cell_len.append([len(c) for c in cc])
        # unusable gold contributes no labels
        c_cols = f.cond_cols[:C] if f.gold_ok else []
        k = len(c_cols)
        hot = [0.0] * n_headers
        for c in c_cols:
            hot[c] = 1.0
        wc.append(hot)
        cols.append(c_cols + [0] * (C - k))
        ops.append(f.cond_ops[:k] + [0] * (C - k))
        st.append([s[0] for s in f.cond_spans][:k] + [0] * (C - k))
        ed.append([s[1] for s in f.cond_spans][:k] + [0] * (C - k))
        cmask.append([True] * k + [False] * (C - k))

    ids = _pad([f.input_ids for f in features])
    pad_mask = [[False] * len(f.input_ids) + [True] * (len(ids[0]) - len(f.input_ids)) for f in features]
    q_index = [f.question_span + [0] * (n_tok - f.n_tokens) for f in features]
    q_mask = [[True] * f.n_tokens + [False] * (n_tok - f.n_tokens) for f in features]
    return Batch(
        features=features,
        ids=long(ids),
        positions=long(_pad([f.positions for f in features])),
        segments=long(_pad([f.segments for f in features])),
        pad_mask=torch.tensor(pad_mask),
        q_index=long(q_index),
        q_mask=torch.tensor(q_mask),
        h_index=long(h_index),
        h_tok_len=long(h_len),
        h_mask=long(h_len) > 0,
        q_chars=long(_pad([f.question_chars for f in features])),
        q_char_len=long([len(f.question_chars) for f in features]),
        cell_chars=long(cells),
        cell_len=long(cell_len),
        type_ids=long([f.type_ids + [0] * (n_tok - f.n_tokens) for f in features]),
        sel=long([f.sel if f.gold_ok else 0 for f in features]),
        agg=long([f.agg for f in features]),
        wn=long([min(len(f.cond_cols), C) if f.gold_ok else 0 for f in features]),
        wc=torch.tensor(wc),
        cond_cols=long(cols),
        cond_ops=long(ops),
        cond_st=long(st),
        cond_ed=long(ed),
        cond_mask=torch.tensor(cmask, dtype=torch.bool).reshape(len(features), C),
        valid=torch.tensor([f.gold_ok for f in features]),
    )
