"""The six sketch heads (SC, SA, WN, WC, WO, WV), their loss and query decoding.

Every column-level head reads two streams:

* the *header* stream: BiLSTMs over contextual-encoder outputs, giving a
  header vector ``tau_hat`` and a header-aware question context ``mu_hat``;
* the *content* stream (WN, WC, WV only): BiLSTMs over character embeddings of
  the retained cell and of the question, giving ``tau`` and ``mu``.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .data_model import MAX_CONDS, Agg, Condition, Op, SQLQuery
from .encoder import Encoder, EncoderConfig, Vocab
from .featurize import Batch

N_AGG = len(Agg)
N_OP = len(Op)
HEADS = ("sc", "sa", "wn", "wc", "wo", "wv")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    max_conds: int = MAX_CONDS
    sigma: float = 0.9
    n_max: int = 6
    no_tc: bool = False  # drop every table-content input of WN, WC and WV
    no_vl: bool = False  # drop the match/not-match type embedding in WV
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        raw = dict(raw)
        enc = EncoderConfig(**raw.pop("encoder", {}))
        return cls(encoder=enc, **raw)


# ---------------------------------------------------------------------------
# building blocks

def masked_softmax(scores: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return scores.masked_fill(~mask, float("-inf")).softmax(-1)


def masked_max(x: torch.Tensor, mask: torch.Tensor, dim: int) -> torch.Tensor:
    return x.masked_fill(~mask.unsqueeze(-1), float("-inf")).max(dim).values


def length_mask(lengths: torch.Tensor, width: int) -> torch.Tensor:
    return torch.arange(width, device=lengths.device) < lengths.unsqueeze(-1)


class BiLSTM(nn.Module):
    """Bidirectional LSTM producing ``d`` features per step (d/2 per direction)."""

    def __init__(self, in_dim: int, d: int, layers: int, learned_init: bool = False):
        super().__init__()
        self.layers = layers
        self.half = d // 2
        self.lstm = nn.LSTM(in_dim, self.half, num_layers=layers, bidirectional=True, batch_first=True)
        if learned_init:
            self.h0 = nn.Parameter(torch.zeros(layers * 2, 1, self.half))
            self.c0 = nn.Parameter(torch.zeros(layers * 2, 1, self.half))
        else:
            self.h0 = self.c0 = None

    def state_from(self, s: torch.Tensor):
        """Split ``s`` (N x 2d) into first-layer (h, c) and repeat it for every layer."""
        n = s.shape[0]
        h, c = s.split(2 * self.half, dim=-1)
        h = h.reshape(n, 2, self.half).transpose(0, 1).repeat(self.layers, 1, 1)
        c = c.reshape(n, 2, self.half).transpose(0, 1).repeat(self.layers, 1, 1)
        return h.contiguous(), c.contiguous()

    def forward(self, x, lengths, state=None):
        n = x.shape[0]
        if state is None and self.h0 is not None:
            state = (self.h0.expand(-1, n, -1).contiguous(), self.c0.expand(-1, n, -1).contiguous())
        packed = nn.utils.rnn.pack_padded_sequence(x, lengths.clamp(min=1).cpu(), batch_first=True,
                                                   enforce_sorted=False)
        out, _ = self.lstm(packed, state)
        out, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])
        return out


@dataclass
class Inputs:
    """Per-batch tensors shared by all heads."""

    batch: Batch
    enc: torch.Tensor  # B x L x d contextual outputs
    q_chars: torch.Tensor  # B x nc x d_e
    cell_chars: torch.Tensor  # B x l x m x d_e

    @property
    def q_mask(self):
        return self.batch.q_mask

    @property
    def h_mask(self):
        return self.batch.h_mask

    @property
    def q_char_mask(self):
        return length_mask(self.batch.q_char_len, self.q_chars.shape[1])


class HeaderStream(nn.Module):
    """BiLSTM + max-pool over each header's encoder outputs; BiLSTM over the question's."""

    def __init__(self, d_in: int, d: int, layers: int, learned_init: bool):
        super().__init__()
        self.header_lstm = BiLSTM(d_in, d, layers, learned_init)
        self.question_lstm = BiLSTM(d_in, d, layers, learned_init)

    def headers(self, x: Inputs) -> torch.Tensor:
        b = x.batch
        B, l, t = b.h_index.shape
        rows = torch.arange(B).view(B, 1, 1)
        toks = x.enc[rows, b.h_index].reshape(B * l, t, -1)
        lengths = b.h_tok_len.reshape(-1).clamp(min=1)
        out = self.header_lstm(toks, lengths)
        return masked_max(out, length_mask(lengths, t), 1).reshape(B, l, -1)

    def question(self, x: Inputs, state=None) -> torch.Tensor:
        b = x.batch
        rows = torch.arange(len(b)).view(-1, 1)
        toks = x.enc[rows, b.q_index]
        return self.question_lstm(toks, b.q_mask.sum(1), state)

    def question_mask(self, x: Inputs):
        return x.q_mask


class ContentStream(nn.Module):
    """BiLSTM + max-pool over each retained cell's characters; BiLSTM over the question's."""

    def __init__(self, d_in: int, d: int, layers: int, learned_init: bool):
        super().__init__()
        self.cell_lstm = BiLSTM(d_in, d, layers, learned_init)
        self.question_lstm = BiLSTM(d_in, d, layers, learned_init)

    def headers(self, x: Inputs) -> torch.Tensor:
        B, l, m, de = x.cell_chars.shape
        lengths = x.batch.cell_len.reshape(-1).clamp(min=1)
        out = self.cell_lstm(x.cell_chars.reshape(B * l, m, de), lengths)
        return masked_max(out, length_mask(lengths, m), 1).reshape(B, l, -1)

    def question(self, x: Inputs, state=None) -> torch.Tensor:
        return self.question_lstm(x.q_chars, x.batch.q_char_len, state)

    def question_mask(self, x: Inputs):
        return x.q_char_mask


def _linear(d_in: int, d_out: int) -> nn.Linear:
    return nn.Linear(d_in, d_out, bias=False)


class ColumnAttention(nn.Module):
    """Per-header question context: ``mu^h = sum_i softmax_i(gamma_i W tau_h^T) gamma_i``."""

    def __init__(self, stream: nn.Module, d: int):
        super().__init__()
        self.stream = stream
        self.W_alpha = nn.Parameter(torch.empty(d, d))

    def forward(self, x: Inputs, trace: dict, prefix: str):
        tau = self.stream.headers(x)
        gamma = self.stream.question(x)
        scores = torch.einsum("bnd,de,ble->bln", gamma, self.W_alpha, tau)
        alpha = masked_softmax(scores, self.stream.question_mask(x).unsqueeze(1))
        mu = alpha @ gamma
        trace[prefix + "tau"] = tau
        trace[prefix + "gamma"] = gamma
        trace[prefix + "alpha_q"] = alpha
        trace[prefix + "mu"] = mu
        return tau, gamma, mu


def _gather_cols(t: torch.Tensor, cols: torch.Tensor) -> torch.Tensor:
    """t: B x l x F, cols: B x k -> B x k x F."""
    return t.gather(1, cols.unsqueeze(-1).expand(-1, -1, t.shape[-1]))


# ---------------------------------------------------------------------------
# heads

class WhereNumberHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        e = cfg.encoder
        d = e.d
        self.use_content = not cfg.no_tc
        self.hat = HeaderStream(d, d, e.bilstm_layers, learned_init=False)
        self.hat_att_h = _linear(d, 1)
        self.hat_W_s = _linear(d, 2 * d)
        self.hat_att_q = _linear(d, 1)
        if self.use_content:
            self.content = ContentStream(e.d_e, d, e.bilstm_layers, learned_init=False)
            self.att_h = _linear(d, 1)
            self.W_s = _linear(d, 2 * d)
            self.att_q = _linear(d, 1)
        self.W_mu = _linear(2 * d if self.use_content else d, d)
        self.W_o = _linear(d, cfg.max_conds + 1)

    @staticmethod
    def _summary(stream, att_h, W_s, att_q, x: Inputs, trace: dict, prefix: str):
        tau = stream.headers(x)
        alpha_h = masked_softmax(att_h(tau).squeeze(-1), x.h_mask)
        s = W_s((alpha_h.unsqueeze(-1) * tau).sum(1))
        lstm = stream.question_lstm
        gamma = stream.question(x, lstm.state_from(s))
        alpha_q = masked_softmax(att_q(gamma).squeeze(-1), stream.question_mask(x))
        mu = (alpha_q.unsqueeze(-1) * gamma).sum(1)
        trace.update({prefix + "tau": tau, prefix + "alpha_h": alpha_h, prefix + "s": s,
                      prefix + "gamma": gamma, prefix + "alpha_q": alpha_q, prefix + "mu": mu})
        return mu

    def forward(self, x: Inputs, trace: dict) -> torch.Tensor:
        mu_hat = self._summary(self.hat, self.hat_att_h, self.hat_W_s, self.hat_att_q, x, trace, "wn.hat_")
        if self.use_content:
            mu = self._summary(self.content, self.att_h, self.W_s, self.att_q, x, trace, "wn.")
            combined = torch.cat([mu_hat, mu], -1)
        else:
            combined = mu_hat
        logits = self.W_o(torch.tanh(self.W_mu(combined)))
        trace["wn.logits"] = logits
        return logits


class ColumnHead(nn.Module):
    """Shared context computation of the column-level heads."""

    def __init__(self, cfg: ModelConfig, use_content: bool):
        super().__init__()
        e = cfg.encoder
        self.use_content = use_content
        self.hat = ColumnAttention(HeaderStream(e.d, e.d, e.bilstm_layers, learned_init=True), e.d)
        if use_content:
            self.content = ColumnAttention(ContentStream(e.d_e, e.d, e.bilstm_layers, learned_init=True), e.d)

    def context(self, x: Inputs, trace: dict, name: str) -> dict:
        tau_hat, gamma_hat, mu_hat = self.hat(x, trace, name + ".hat_")
        ctx = {"tau_hat": tau_hat, "gamma_hat": gamma_hat, "mu_hat": mu_hat}
        if self.use_content:
            tau, gamma, mu = self.content(x, trace, name + ".")
            ctx.update(tau=tau, gamma=gamma, mu=mu)
        return ctx

    def column_features(self, ctx: dict) -> torch.Tensor:
        parts = [ctx["mu_hat"], ctx["tau_hat"]]
        if self.use_content:
            parts += [ctx["mu"], ctx["tau"]]
        return torch.cat(parts, -1)


class SelectColumnHead(ColumnHead):
    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg, use_content=False)
        self.W_o = _linear(2 * cfg.encoder.d, 1)

    def scores(self, ctx: dict) -> torch.Tensor:
        return self.W_o(torch.tanh(self.column_features(ctx))).squeeze(-1)


class SelectAggHead(ColumnHead):
    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg, use_content=False)
        self.W_o = _linear(2 * cfg.encoder.d, N_AGG)

    def scores(self, ctx: dict, sel: torch.Tensor) -> torch.Tensor:
        feats = _gather_cols(self.column_features(ctx), sel.unsqueeze(1)).squeeze(1)
        return self.W_o(torch.tanh(feats))


class WhereColumnHead(ColumnHead):
    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg, use_content=not cfg.no_tc)
        self.W_o = _linear((4 if self.use_content else 2) * cfg.encoder.d, 1)

    def scores(self, ctx: dict) -> torch.Tensor:
        return self.W_o(torch.tanh(self.column_features(ctx))).squeeze(-1)


class WhereOpHead(ColumnHead):
    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg, use_content=False)
        self.W_o = _linear(2 * cfg.encoder.d, N_OP)

    def scores(self, ctx: dict, cols: torch.Tensor) -> torch.Tensor:
        return self.W_o(torch.tanh(_gather_cols(self.column_features(ctx), cols)))


class WhereValueHead(ColumnHead):
    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg, use_content=not cfg.no_tc)
        e = cfg.encoder
        d = e.d
        self.use_types = self.use_content and not cfg.no_vl
        if self.use_types:
            self.type_emb = nn.Embedding(2, e.d_t)
        width = (4 if self.use_content else 2) * d + N_OP + d + (e.d_t if self.use_types else 0)
        self.W_v = _linear(width, d)
        self.W_st = _linear(d, 1)
        self.W_ed = _linear(d, 1)

    def token_features(self, ctx: dict, x: Inputs) -> torch.Tensor:
        xi = ctx["gamma_hat"]
        if self.use_types:
            xi = torch.cat([xi, self.type_emb(x.batch.type_ids)], -1)
        return xi

    def scores(self, ctx: dict, x: Inputs, cols: torch.Tensor, ops: torch.Tensor, trace: dict | None = None):
        """Start and end logits, each B x k x n, masked outside the question."""
        col = _gather_cols(self.column_features(ctx), cols)  # B x k x F
        eta = F.one_hot(ops, N_OP).to(col.dtype)
        xi = self.token_features(ctx, x)  # B x n x G
        k, n = cols.shape[1], xi.shape[1]
        per_col = torch.cat([col, eta], -1).unsqueeze(2).expand(-1, -1, n, -1)
        per_tok = xi.unsqueeze(1).expand(-1, k, -1, -1)
        hidden = torch.tanh(self.W_v(torch.cat([per_col, per_tok], -1)))
        mask = x.q_mask.unsqueeze(1)
        st = self.W_st(hidden).squeeze(-1).masked_fill(~mask, float("-inf"))
        ed = self.W_ed(hidden).squeeze(-1).masked_fill(~mask, float("-inf"))
        if trace is not None:
            trace["wv.xi"] = xi
        return st, ed


# ---------------------------------------------------------------------------
# full model

_COMPONENT_SEEDS = {"encoder": 0, "sc": 1, "sa": 2, "wn": 3, "wc": 4, "wo": 5, "wv": 6}


def _init_head(module: nn.Module, seed: int) -> None:
    """Initialize every parameter from a generator keyed by its name.

    Keying by name keeps a parameter's initial value independent of which
    other sub-layers exist, so ablation variants share all untouched weights.
    """
    for mod_name, m in module.named_modules():
        for p_name, p in m.named_parameters(recurse=False):
            full = f"{mod_name}.{p_name}" if mod_name else p_name
            gen = torch.Generator().manual_seed(seed * 1_000_003 + zlib.crc32(full.encode()))
            with torch.no_grad():
                if isinstance(m, nn.LSTM):
                    if p_name.startswith("weight"):
                        p.copy_(torch.rand(p.shape, generator=gen) * 0.16 - 0.08)
                    else:
                        p.zero_()
                elif isinstance(m, BiLSTM):  # learned initial states
                    p.copy_(torch.rand(p.shape, generator=gen) * 0.16 - 0.08)
                elif isinstance(m, nn.Linear):
                    p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(m.in_features))
                elif isinstance(m, ColumnAttention):
                    p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(p.shape[0]))
                elif isinstance(m, nn.Embedding):
                    p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(m.embedding_dim))
                else:
                    raise TypeError(f"no initializer for {full} in {type(m).__name__}")


def _seeded(seed: int, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


class MCSQL(nn.Module):
    """Encoder plus the six heads. ``forward(batch)`` returns the summed training loss."""

    def __init__(self, config: ModelConfig, words: Vocab, chars: Vocab):
        super().__init__()
        self.config = config
        base = config.seed * 7919

        def build(name, factory):
            def make():
                m = factory()
                if name != "encoder":
                    _init_head(m, base + _COMPONENT_SEEDS[name])
                return m
            return _seeded(base + _COMPONENT_SEEDS[name], make)

        self.encoder = build("encoder", lambda: Encoder(config.encoder, words, chars))
        self.heads = nn.ModuleDict({
            "sc": build("sc", lambda: SelectColumnHead(config)),
            "sa": build("sa", lambda: SelectAggHead(config)),
            "wn": build("wn", lambda: WhereNumberHead(config)),
            "wc": build("wc", lambda: WhereColumnHead(config)),
            "wo": build("wo", lambda: WhereOpHead(config)),
            "wv": build("wv", lambda: WhereValueHead(config)),
        })

    @property
    def dtype(self):
        return self.encoder.chars.table.weight.dtype

    def inputs(self, batch: Batch) -> Inputs:
        enc = self.encoder.encode_context(batch.ids, batch.positions, batch.segments, batch.pad_mask)
        return Inputs(batch, enc, self.encoder.chars(batch.q_chars), self.encoder.chars(batch.cell_chars))

    def contexts(self, batch: Batch, trace: dict | None = None) -> dict:
        """Run the encoder and every head's context computation once."""
        trace = {} if trace is None else trace
        x = self.inputs(batch)
        out = {"inputs": x, "trace": trace}
        for name in ("sc", "sa", "wc", "wo", "wv"):
            out[name] = self.heads[name].context(x, trace, name)
        out["wn_logits"] = self.heads["wn"](x, trace)
        return out

    # score functions; padded headers are masked to -inf
    def sc_scores(self, ctx):
        return self.heads["sc"].scores(ctx["sc"]).masked_fill(~ctx["inputs"].h_mask, float("-inf"))

    def sa_scores(self, ctx, sel):
        return self.heads["sa"].scores(ctx["sa"], sel)

    def wn_scores(self, ctx):
        return ctx["wn_logits"]

    def wc_scores(self, ctx):
        return self.heads["wc"].scores(ctx["wc"]).masked_fill(~ctx["inputs"].h_mask, float("-inf"))

    def wo_scores(self, ctx, cols):
        return self.heads["wo"].scores(ctx["wo"], cols)

    def wv_scores(self, ctx, cols, ops):
        return self.heads["wv"].scores(ctx["wv"], ctx["inputs"], cols, ops, ctx["trace"])

    def outputs(self, batch: Batch, trace: dict | None = None) -> dict:
        """Teacher-forced logits of every head."""
        ctx = self.contexts(batch, trace)
        st, ed = self.wv_scores(ctx, batch.cond_cols, batch.cond_ops)
        return {
            "sc": self.sc_scores(ctx),
            "sa": self.sa_scores(ctx, batch.sel),
            "wn": self.wn_scores(ctx),
            "wc": self.wc_scores(ctx),
            "wo": self.wo_scores(ctx, batch.cond_cols),
            "wv_st": st,
            "wv_ed": ed,
        }

    def forward(self, batch: Batch) -> torch.Tensor:
        return sum(head_losses(self.outputs(batch), batch).values())


def head_losses(out: dict, batch: Batch) -> dict:
    """Summed cross-entropies per head; WC is one-vs-rest over headers."""
    valid = batch.valid
    h_mask = batch.h_mask
    ce = lambda logits, target: F.cross_entropy(logits, target, reduction="none")  # noqa: E731
    wc = F.binary_cross_entropy_with_logits(out["wc"].masked_fill(~h_mask, 0.0), batch.wc.to(out["wc"].dtype),
                                            reduction="none")
    cm = batch.cond_mask
    B, C = cm.shape
    losses = {
        "sc": ce(out["sc"], batch.sel)[valid].sum(),
        "sa": ce(out["sa"], batch.agg)[valid].sum(),
        "wn": ce(out["wn"], batch.wn)[valid].sum(),
        "wc": (wc * h_mask)[valid].sum(),
    }
    if cm.any():
        losses["wo"] = ce(out["wo"][cm], batch.cond_ops[cm]).sum()
        losses["wv"] = (ce(out["wv_st"][cm], batch.cond_st[cm]).sum()
                        + ce(out["wv_ed"][cm], batch.cond_ed[cm]).sum())
    else:
        losses["wo"] = losses["wv"] = out["wo"].new_zeros(())
    return losses


# ---------------------------------------------------------------------------
# decoding

def best_span(st: torch.Tensor, ed: torch.Tensor) -> tuple[int, int]:
    """argmax of st[i] + ed[j] over j >= i; first maximum wins."""
    n = st.shape[0]
    joint = st.unsqueeze(1) + ed.unsqueeze(0)
    upper = torch.ones(n, n, dtype=torch.bool, device=st.device).triu()
    joint = joint.masked_fill(~upper, float("-inf"))
    k = int(torch.argmax(joint.reshape(-1)))
    return k // n, k % n


def _rank(scores: list[float]) -> list[int]:
    return sorted(range(len(scores)), key=lambda h: (-scores[h], h))


def _span_text(feat, st: int, ed: int) -> str:
    toks = feat.example.question_tokens
    return feat.example.question[toks[st].start:toks[ed].end]


@torch.no_grad()
def decode(model: MCSQL, batch: Batch) -> list[SQLQuery]:
    """Chain SC -> SA, WN -> WC -> WO -> WV on predicted labels."""
    ctx = model.contexts(batch)
    B = len(batch)
    C = model.config.max_conds
    sc = model.sc_scores(ctx).argmax(-1)
    sa = model.sa_scores(ctx, sc).argmax(-1)
    wn = model.wn_scores(ctx).argmax(-1)
    wc = model.wc_scores(ctx)
    cols = torch.zeros(B, C, dtype=torch.long)
    counts = []
    for b, f in enumerate(batch.features):
        n = min(int(wn[b]), f.n_headers)
        ranked = _rank(wc[b, :f.n_headers].tolist())[:n]
        cols[b, :n] = torch.tensor(ranked, dtype=torch.long)
        counts.append(n)
    ops = model.wo_scores(ctx, cols).argmax(-1)
    st, ed = model.wv_scores(ctx, cols, ops)
    queries = []
    for b, f in enumerate(batch.features):
        conds = []
        for k in range(counts[b]):
            i, j = best_span(st[b, k, :f.n_tokens], ed[b, k, :f.n_tokens])
            conds.append(Condition(int(cols[b, k]), Op(int(ops[b, k])), _span_text(f, i, j)))
        queries.append(SQLQuery(int(sc[b]), Agg(int(sa[b])), tuple(conds)))
    return queries


@torch.no_grad()
def teacher_forced_predictions(model: MCSQL, batch: Batch) -> list[dict]:
    """Per-sub-task predictions with every upstream label set to gold."""
    ctx = model.contexts(batch)
    gold_sel = torch.tensor([f.example.gold.sel if f.example.gold.sel < f.n_headers else 0
                             for f in batch.features])
    sc = model.sc_scores(ctx).argmax(-1)
    sa = model.sa_scores(ctx, gold_sel).argmax(-1)
    wn = model.wn_scores(ctx).argmax(-1)
    wc = model.wc_scores(ctx)
    C = model.config.max_conds
    B = len(batch)
    cols = torch.zeros(B, C, dtype=torch.long)
    ops = torch.zeros(B, C, dtype=torch.long)
    for b, f in enumerate(batch.features):
        conds = [c for c in f.example.gold.conds if c.col < f.n_headers][:C]
        for k, c in enumerate(conds):
            cols[b, k] = c.col
            ops[b, k] = int(c.op)
    wo = model.wo_scores(ctx, cols).argmax(-1)
    st, ed = model.wv_scores(ctx, cols, ops)
    preds = []
    for b, f in enumerate(batch.features):
        gold = f.example.gold
        k = min(len(gold.conds), C)
        ranked = _rank(wc[b, :f.n_headers].tolist())[:k]
        values = []
        for j in range(k):
            i, e = best_span(st[b, j, :f.n_tokens], ed[b, j, :f.n_tokens])
            values.append(_span_text(f, i, e))
        preds.append({"sc": int(sc[b]), "sa": int(sa[b]), "wn": int(wn[b]), "wc": sorted(ranked),
                      "wo": [int(o) for o in wo[b, :k]], "wv": values})
    return preds
