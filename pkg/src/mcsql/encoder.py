"""Contextual encoder over ``[CLS] question [SEP] h1 [SEP] ... hl [SEP]`` and
character embeddings for cells and questions.

The contextual encoder is a small trainable stand-in for a pre-trained
language model; anything exposing the same ``forward`` contract can replace it.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import torch
from torch import nn

from .content_matcher import NONE_SENTINEL
from .data_model import cell_to_text, normalize, token_texts, tokenize

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
WORD_SPECIALS = (PAD, UNK, CLS, SEP, NONE_SENTINEL)
CHAR_SPECIALS = (PAD, UNK, NONE_SENTINEL)

QUESTION_SEGMENT, HEADER_SEGMENT = 0, 1


@dataclass
class EncoderConfig:
    d: int = 100
    d_e: int = 128
    d_t: int = 32
    bilstm_layers: int = 2
    context_encoder: str = "transformer"  # or "bilstm"
    context_layers: int = 2
    context_heads: int = 4
    max_len: int = 128
    # "restart": every header block reuses the same position ids, so the
    # transformer is equivariant to header order; "absolute": running positions
    header_positions: str = "restart"

    def __post_init__(self):
        for name in ("d", "d_e", "d_t", "bilstm_layers", "context_layers", "context_heads", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d % 2:
            raise ValueError("d must be even (two LSTM directions of d/2)")
        if self.context_encoder not in ("transformer", "bilstm"):
            raise ValueError(f"unknown context encoder {self.context_encoder!r}")
        if self.context_encoder == "transformer" and self.d % self.context_heads:
            raise ValueError("d must be divisible by context_heads")
        if self.header_positions not in ("restart", "absolute"):
            raise ValueError(f"unknown header_positions {self.header_positions!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class Vocab:
    def __init__(self, itos: Sequence[str]):
        self.itos = list(itos)
        self.stoi = {s: i for i, s in enumerate(self.itos)}
        self.unk = self.stoi[UNK]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, s):
        return s in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, s: str) -> int:
        return self.stoi.get(s, self.unk)

    def ids(self, items: Iterable[str]) -> list[int]:
        return [self.stoi.get(s, self.unk) for s in items]

    @classmethod
    def build(cls, items: Iterable[str], specials: Sequence[str], min_count: int = 1) -> "Vocab":
        counts = Counter(items)
        kept = sorted(s for s, c in counts.items() if c >= min_count and s not in specials)
        return cls(list(specials) + kept)


def header_words(header: str) -> list[str]:
    return token_texts(tokenize(header)) if header.strip() else [UNK]


def build_vocabs(examples, table_store, min_count: int = 2) -> tuple[Vocab, Vocab]:
    """Word and character vocabularies from training examples and their tables."""
    words, chars = [], []
    seen_tables = set()
    for ex in examples:
        words.extend(ex.words)
        chars.extend(" ".join(ex.words))
        if ex.table_id in seen_tables:
            continue
        seen_tables.add(ex.table_id)
        table = table_store[ex.table_id]
        for h in table.headers:
            words.extend(header_words(h))
        for row in table.rows:
            for value in row:
                chars.extend(normalize(cell_to_text(value)))
    return Vocab.build(words, WORD_SPECIALS, min_count), Vocab.build(chars, CHAR_SPECIALS, 1)


@dataclass
class InputSequence:
    tokens: list[str]
    positions: list[int]
    segments: list[int]
    question_span: list[int]  # sequence positions of question tokens
    header_spans: list[list[int]]  # sequence positions of each header's tokens
    warnings: list[str] = field(default_factory=list)


def build_input(question_tokens: Sequence[str], headers: Sequence[Sequence[str] | str],
                max_len: int = 128, header_positions: str = "restart") -> InputSequence:
    """Lay out ``[CLS] q [SEP] h1 [SEP] ... hl [SEP]`` with a segment map.

    ``headers`` may be raw strings or pre-split word lists; an empty header
    occupies a single ``[UNK]`` slot. Over-long inputs lose header tails first.
    """
    if not headers:
        raise ValueError("build_input needs at least one header")
    q = list(question_tokens)
    hs = [header_words(h) if isinstance(h, str) else (list(h) or [UNK]) for h in headers]
    warnings = []
    total = lambda: 2 + len(q) + sum(len(h) + 1 for h in hs)  # noqa: E731
    full = total()
    while total() > max_len:
        longest = max(range(len(hs)), key=lambda i: (len(hs[i]), i))
        if len(hs[longest]) > 1:
            hs[longest] = hs[longest][:-1]
        elif len(q) > 1:
            q = q[:-1]
        else:
            raise ValueError(f"{len(hs)} headers cannot fit in max_len={max_len}")
    if total() < full:
        warnings.append(f"input truncated to {max_len} positions")
        logger.warning(warnings[-1])

    tokens = [CLS] + q + [SEP]
    positions = list(range(len(tokens)))
    segments = [QUESTION_SEGMENT] * len(tokens)
    question_span = list(range(1, 1 + len(q)))
    header_spans = []
    base = len(tokens)
    for h in hs:
        start = len(tokens)
        header_spans.append(list(range(start, start + len(h))))
        tokens.extend(h + [SEP])
        offset = base if header_positions == "restart" else start
        positions.extend(range(offset, offset + len(h) + 1))
        segments.extend([HEADER_SEGMENT] * (len(h) + 1))
    return InputSequence(tokens, positions, segments, question_span, header_spans, warnings)


class ContextEncoder(nn.Module):
    """Word, position and segment embeddings followed by a transformer or BiLSTM."""

    def __init__(self, config: EncoderConfig, vocab_size: int):
        super().__init__()
        d = config.d
        self.config = config
        self.word = nn.Embedding(vocab_size, d, padding_idx=0)
        self.position = nn.Embedding(config.max_len, d)
        self.segment = nn.Embedding(2, d)
        if config.context_encoder == "transformer":
            layer = nn.TransformerEncoderLayer(d, config.context_heads, dim_feedforward=2 * d,
                                               dropout=0.0, activation="gelu", batch_first=True)
            self.body = nn.TransformerEncoder(layer, config.context_layers, enable_nested_tensor=False)
        else:
            self.body = nn.LSTM(d, d // 2, num_layers=config.context_layers, bidirectional=True,
                                batch_first=True)
        for emb in (self.word, self.position, self.segment):
            nn.init.normal_(emb.weight, std=1.0 / math.sqrt(d))

    def forward(self, ids, positions, segments, pad_mask):
        """``pad_mask`` is True at padding. Returns B x L x d."""
        x = self.word(ids) + self.position(positions) + self.segment(segments)
        if isinstance(self.body, nn.LSTM):
            lengths = (~pad_mask).sum(1).cpu()
            packed = nn.utils.rnn.pack_padded_sequence(x, lengths, batch_first=True, enforce_sorted=False)
            out, _ = self.body(packed)
            out, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True, total_length=ids.shape[1])
            return out
        return self.body(x, src_key_padding_mask=pad_mask)


class CharEmbedder(nn.Module):
    """Learned character vectors shared by cells and the question."""

    def __init__(self, chars: Vocab, d_e: int):
        super().__init__()
        self.chars = chars
        self.table = nn.Embedding(len(chars), d_e, padding_idx=0)
        nn.init.normal_(self.table.weight, std=1.0 / math.sqrt(d_e))

    def char_ids(self, text: str) -> list[int]:
        if text == NONE_SENTINEL:
            return [self.chars.stoi[NONE_SENTINEL]]
        return self.chars.ids(text) or [self.chars.unk]

    def forward(self, ids):
        return self.table(ids)

    def embed_chars(self, text: str) -> torch.Tensor:
        """len(text) x d_e; the sentinel is a single dedicated row."""
        ids = torch.tensor(self.char_ids(text), dtype=torch.long, device=self.table.weight.device)
        return self.table(ids)


class Encoder(nn.Module):
    def __init__(self, config: EncoderConfig, words: Vocab, chars: Vocab):
        super().__init__()
        self.config = config
        self.words = words
        self.context = ContextEncoder(config, len(words))
        self.chars = CharEmbedder(chars, config.d_e)

    def encode_context(self, ids, positions, segments, pad_mask):
        return self.context(ids, positions, segments, pad_mask)

    def embed_chars(self, text: str) -> torch.Tensor:
        return self.chars.embed_chars(text)
