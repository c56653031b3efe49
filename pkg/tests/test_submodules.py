import math

import pytest
import torch

from mcsql.data_model import validate_query
from mcsql.submodules import HEADS, best_span, decode, head_losses

from conftest import tiny_parser
from gradcheck import check_parameters, randomized


def _batch(parser, examples, tables):
    return parser.batch(examples, tables)


def test_output_shapes(examples, tables):
    parser = tiny_parser()
    batch = _batch(parser, examples, tables)
    out = parser.model.outputs(batch)
    B, l, C, n = len(examples), 4, 4, batch.q_mask.shape[1]
    assert out["sc"].shape == (B, l)
    assert out["sa"].shape == (B, 6)
    assert out["wn"].shape == (B, C + 1)
    assert out["wc"].shape == (B, l)
    assert out["wo"].shape == (B, C, 3)
    assert out["wv_st"].shape == out["wv_ed"].shape == (B, C, n)


def test_trace_softmaxes_sum_to_one_and_activations_finite(examples, tables):
    parser = tiny_parser(seed=3)
    trace = {}
    parser.model.outputs(_batch(parser, examples, tables), trace)
    alphas = [k for k in trace if "alpha" in k]
    assert {"wn.hat_alpha_h", "wn.alpha_q", "wc.alpha_q", "sc.hat_alpha_q"} <= set(alphas)
    for k in alphas:
        sums = trace[k].sum(-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6), k
    for k, v in trace.items():
        assert torch.isfinite(v).all(), k


def test_uniform_logits_give_log_k(examples, tables):
    parser = tiny_parser()
    batch = _batch(parser, examples, tables)
    out = {k: torch.zeros_like(v).masked_fill(torch.isinf(v), float("-inf"))
           for k, v in parser.model.outputs(batch).items()}
    losses = head_losses(out, batch)
    B = len(examples)
    n_conds = int(batch.cond_mask.sum())
    n_tokens = batch.q_mask.sum(1)
    assert losses["sc"].item() == pytest.approx(B * math.log(4))
    assert losses["sa"].item() == pytest.approx(B * math.log(6))
    assert losses["wn"].item() == pytest.approx(B * math.log(5))
    assert losses["wc"].item() == pytest.approx(B * 4 * math.log(2))
    assert losses["wo"].item() == pytest.approx(n_conds * math.log(3))
    expected_wv = sum(2 * math.log(int(n_tokens[b])) for b in range(B) for _ in range(int(batch.cond_mask[b].sum())))
    assert losses["wv"].item() == pytest.approx(expected_wv)


def test_confident_correct_logits_give_near_zero_loss(examples, tables):
    parser = tiny_parser()
    batch = _batch(parser, examples, tables)
    out = parser.model.outputs(batch)
    big = 50.0
    out["sc"] = torch.full_like(out["sc"], -big).scatter(1, batch.sel[:, None], big)
    out["sa"] = torch.full_like(out["sa"], -big).scatter(1, batch.agg[:, None], big)
    out["wn"] = torch.full_like(out["wn"], -big).scatter(1, batch.wn[:, None], big)
    out["wc"] = (batch.wc * 2 - 1) * big
    out["wo"] = torch.full_like(out["wo"], -big).scatter(2, batch.cond_ops[..., None], big)
    st = torch.full_like(out["wv_st"], -big).scatter(2, batch.cond_st[..., None], big)
    ed = torch.full_like(out["wv_ed"], -big).scatter(2, batch.cond_ed[..., None], big)
    out["wv_st"], out["wv_ed"] = st, ed
    assert sum(head_losses(out, batch).values()).item() < 1e-6


@pytest.mark.parametrize("flags", [{}, {"no_tc": True}, {"no_vl": True}])
def test_sampled_parameters_pass_finite_differences(flags, examples, tables):
    # the acceptance suite checks every tensor; here every fourth one
    parser = randomized(tiny_parser(dtype=torch.float64, **flags), seed=1)
    batch = _batch(parser, examples[2:3], tables)
    names = [n for n, _ in parser.model.named_parameters()][::4]
    errs = check_parameters(parser.model, lambda: parser.model(batch), names=names, entries_per_tensor=2)
    bad = {k: v for k, v in errs.items() if v > 1e-4}
    assert not bad, bad


def test_every_head_parameter_receives_gradient(examples, tables):
    parser = tiny_parser(dtype=torch.float64)
    parser.model(_batch(parser, examples, tables)).backward()
    for name, p in parser.model.heads.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name


def _trace(flags, examples, tables):
    parser = tiny_parser(seed=5, **flags)
    trace = {}
    out = parser.model.outputs(_batch(parser, examples, tables), trace)
    return trace, out


def test_ablation_flags_change_only_their_computation(examples, tables):
    full, out_full = _trace({}, examples, tables)
    no_tc, out_tc = _trace({"no_tc": True}, examples, tables)
    no_vl, out_vl = _trace({"no_vl": True}, examples, tables)
    for out in (out_tc, out_vl):
        for k in ("sc", "sa", "wo"):
            assert torch.equal(out_full[k], out[k]), k
    # without table content the content streams of WN, WC and WV disappear
    content_keys = {k for k in full if k.split(".")[0] in ("wn", "wc", "wv") and ".hat_" not in k
                    and k not in ("wn.logits", "wv.xi")}
    assert content_keys and not content_keys & set(no_tc)
    for k in no_tc:
        if ".hat_" in k or k.split(".")[0] in ("sc", "sa", "wo"):
            assert torch.equal(full[k], no_tc[k]), k
    assert not torch.equal(out_full["wc"], out_tc["wc"])
    # without value linking only the WV token features change
    assert set(no_vl) == set(full)
    changed = {k for k in full if not torch.equal(full[k], no_vl[k])}
    assert changed == {"wv.xi"}
    assert torch.equal(out_full["wc"], out_vl["wc"]) and torch.equal(out_full["wn"], out_vl["wn"])


def test_no_tc_where_number_uses_header_summary_only():
    parser = tiny_parser(no_tc=True)
    wn = parser.model.heads["wn"]
    assert wn.W_mu.in_features == parser.config.encoder.d
    assert not hasattr(wn, "content")


def test_best_span_constrained():
    st = torch.tensor([0.0, 1.0, 5.0])
    ed = torch.tensor([4.0, 0.0, 1.0])
    # independent argmaxes would give the invalid span (2, 0)
    assert best_span(st, ed) == (2, 2)
    assert best_span(torch.zeros(3), torch.zeros(3)) == (0, 0)


@pytest.mark.parametrize("seed", range(5))
def test_decode_always_valid_and_deterministic(seed, examples, tables):
    parser = tiny_parser(seed=seed)
    batch = _batch(parser, examples, tables)
    preds = decode(parser.model, batch)
    assert preds == decode(parser.model, batch)
    for ex, q in zip(examples, preds):
        assert validate_query(q, tables["toy"].schema) == []
        cols = [c.col for c in q.conds]
        assert len(set(cols)) == len(cols)
        for c in q.conds:
            assert c.value and c.value in ex.question


def test_invalid_gold_is_masked(tables):
    from mcsql.data_model import Agg, Condition, Example, Op, SQLQuery
    parser = tiny_parser()
    bad = Example("which player ?", "toy", SQLQuery(0, Agg.NONE, (Condition(1, Op.EQ, "absent"),)))
    batch = parser.batch([bad], tables)
    assert not batch.valid.any()
    assert parser.model(batch).item() == 0.0
    assert parser.featurizer.skipped == 1


def test_heads_registry():
    parser = tiny_parser()
    assert tuple(parser.model.heads.keys()) == HEADS
