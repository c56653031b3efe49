import itertools
import math
import random

import numpy as np
import pytest
import torch

from mcsql.meta_trainer import (
    Episode, EpisodeConfigError, MetaConfig, make_optimizer, meta_step, minibatch_step, minibatch_stream,
    model_loss_fn, read_log, sample_episode, strip_timing, train_meta, train_minibatch,
)
from mcsql.parser import Parser
from mcsql.synthetic import SynthConfig, generate_synthetic

from conftest import tiny_config
from meta_toys import (
    CFG, FEATURES, Adam, LinearToy, flat, np_data, np_grad, np_hessian, toy_batch, toy_episode, toy_example,
)


@pytest.mark.parametrize("mode", ["first_order", "full"])
def test_meta_steps_match_hand_computed_adam(mode):
    config = MetaConfig(**CFG, gradient_mode=mode)
    model = LinearToy()
    opt = make_optimizer(model, config)
    loss_fn = model_loss_fn(model, toy_batch)
    alpha = np.array([config.alpha_encoder] * 2 + [config.alpha_sub] * 2)
    ref = Adam([config.beta_encoder] * 2 + [config.beta_sub] * 2)
    theta = flat(model)
    for step in range(3):
        ep = toy_episode(seed=step)
        g_s = np_grad(theta, ep.support)
        phi = theta - alpha * g_s
        g_q = np_grad(phi, ep.query)
        if mode == "full":
            g_q = (np.eye(4) - np_hessian(ep.support) * alpha[None, :]) @ g_q
        g = config.gamma * g_s + (1 - config.gamma) * g_q
        x, y = np_data(ep.support)
        l_s = 0.5 * ((x @ theta - y) ** 2).sum()
        res = meta_step(model, opt, ep, config, loss_fn)
        theta = ref.step(theta, g)
        np.testing.assert_allclose(flat(model), theta, rtol=0, atol=1e-10)
        assert res.L_S == pytest.approx(l_s, rel=1e-12)
        assert res.L == pytest.approx(config.gamma * res.L_S + (1 - config.gamma) * res.L_Q, rel=1e-12)


def test_alpha_zero_makes_gradient_modes_coincide():
    models = {}
    for mode in ("first_order", "full"):
        config = MetaConfig(**{**CFG, "alpha_encoder": 0.0, "alpha_sub": 0.0}, gradient_mode=mode)
        model = LinearToy()
        opt = make_optimizer(model, config)
        loss_fn = model_loss_fn(model, toy_batch)
        for step in range(5):
            meta_step(model, opt, toy_episode(seed=step), config, loss_fn)
        models[mode] = flat(model)
    np.testing.assert_allclose(models["first_order"], models["full"], rtol=0, atol=1e-12)


def test_zero_outer_rate_leaves_parameters_unchanged():
    config = MetaConfig(**{**CFG, "beta_encoder": 0.0, "beta_sub": 0.0})
    model = LinearToy()
    before = flat(model).copy()
    opt = make_optimizer(model, config)
    meta_step(model, opt, toy_episode(), config, model_loss_fn(model, toy_batch))
    assert np.array_equal(flat(model), before)


def test_optimizer_groups_split_on_encoder_prefix():
    opt = make_optimizer(LinearToy(), MetaConfig(**CFG))
    assert [g["name"] for g in opt.param_groups] == ["encoder", "sub"]
    assert [g["lr"] for g in opt.param_groups] == [0.01, 0.03]


def test_non_finite_loss_skips_update():
    model = LinearToy()
    config = MetaConfig(**CFG)
    opt = make_optimizer(model, config)
    before = flat(model).copy()
    ep = toy_episode()
    bad = ep.query[0].question
    FEATURES[bad] = (FEATURES[bad][0], float("nan"))
    res = meta_step(model, opt, ep, config, model_loss_fn(model, toy_batch))
    assert res.skipped and res.L is None and res.L_S is not None
    assert np.array_equal(flat(model), before)
    res = minibatch_step(model, opt, list(ep.query), model_loss_fn(model, toy_batch))
    assert res.skipped and np.array_equal(flat(model), before)


def test_config_validation():
    with pytest.raises(ValueError):
        MetaConfig(gamma=1.5)
    with pytest.raises(ValueError):
        MetaConfig(alpha_sub=-1e-3)
    with pytest.raises(ValueError):
        MetaConfig(gradient_mode="second")
    assert MetaConfig(n_way=3, k_shot=5).batch_size == 30


# ---------------------------------------------------------------------------
# episodes

def _tables(n_tables, per_table, seed=0):
    rng = random.Random(seed)
    return [toy_example(f"e{t}", i, rng) for t in range(n_tables) for i in range(per_table)]


def test_single_way_single_shot_reaches_every_episode():
    exs = _tables(3, 2)
    seen = set()
    rng = random.Random(0)
    for _ in range(2000):
        ep = sample_episode(exs, 1, 1, rng)
        assert not ep.support_table_ids & ep.query_table_ids
        seen.add((ep.support[0].question, ep.query[0].question))
    # 3 * 2 ordered table pairs, 2 * 2 example choices
    expected = {(a.question, b.question) for a, b in itertools.permutations(exs, 2) if a.table_id != b.table_id}
    assert seen == expected and len(expected) == 24


def test_episodes_are_table_disjoint():
    exs = _tables(10, 5)
    rng = random.Random(1)
    for _ in range(1000):
        ep = sample_episode(exs, 4, 4, rng)
        assert len(ep.support) == len(ep.query) == 16
        assert len(ep.support_table_ids) == len(ep.query_table_ids) == 4
        assert not ep.support_table_ids & ep.query_table_ids
        assert len({e.question for e in ep.support}) == 16


def test_sampler_reports_table_deficit():
    with pytest.raises(EpisodeConfigError, match="short by 1"):
        sample_episode(_tables(7, 4), 4, 4, random.Random(0))
    # tables with fewer than K examples do not count
    with pytest.raises(EpisodeConfigError):
        sample_episode(_tables(8, 3), 4, 4, random.Random(0))


def test_episode_rejects_overlap():
    a, b = _tables(2, 1)
    with pytest.raises(AssertionError):
        Episode((a,), (a,), frozenset({a.table_id}), frozenset({a.table_id}))
    with pytest.raises(AssertionError):
        Episode((a,), (b,), frozenset({b.table_id}), frozenset({a.table_id}))


def test_minibatch_stream_visits_every_example_per_pass():
    stream = minibatch_stream(list(range(10)), 4, random.Random(0))
    first = [x for _ in range(5) for x in next(stream)]
    assert sorted(first[:10]) == list(range(10)) and sorted(first[10:20]) == list(range(10))


# ---------------------------------------------------------------------------
# with the real parser

@pytest.fixture(scope="module")
def small_bundle():
    return generate_synthetic(SynthConfig(n_tables=10, examples_per_table=6, rows_per_table=(3, 5),
                                          headers_per_table=(3, 4), seed=5))


def _parser(bundle, seed=0):
    torch.manual_seed(0)
    parser = Parser.build(tiny_config(seed=seed), bundle.examples["train"], bundle.tables, min_count=1)
    parser.model.double()
    loss_fn = model_loss_fn(parser.model, lambda exs: parser.batch(exs, bundle.tables))
    return parser, loss_fn


def test_gamma_one_follows_minibatch_trajectory(small_bundle):
    config = MetaConfig(alpha_encoder=1e-2, alpha_sub=1e-2, beta_encoder=1e-2, beta_sub=1e-2, gamma=1.0,
                        n_way=2, k_shot=2)
    meta, meta_loss = _parser(small_bundle)
    base, base_loss = _parser(small_bundle)
    opt_meta, opt_base = make_optimizer(meta.model, config), make_optimizer(base.model, config)
    grouped_rng = random.Random(3)
    for _ in range(20):
        ep = sample_episode(small_bundle.examples["train"], 2, 2, grouped_rng)
        a = meta_step(meta.model, opt_meta, ep, config, meta_loss)
        b = minibatch_step(base.model, opt_base, list(ep.support), base_loss)
        assert a.L == pytest.approx(b.L, abs=1e-9)
        for (n, p), (_, q) in zip(meta.model.named_parameters(), base.model.named_parameters()):
            assert (p - q).abs().max().item() <= 1e-9, n


def test_training_log_is_deterministic(small_bundle, tmp_path):
    config = MetaConfig(alpha_encoder=1e-3, alpha_sub=1e-3, beta_encoder=1e-3, beta_sub=1e-3, n_way=2, k_shot=2,
                        task_count=4, seed=9)
    logs = []
    for i in range(2):
        parser, loss_fn = _parser(small_bundle)
        res = train_meta(parser.model, small_bundle.examples["train"], config, loss_fn, log_path=tmp_path / f"{i}.jsonl")
        logs.append(strip_timing(read_log(tmp_path / f"{i}.jsonl")))
        assert strip_timing(res.log) == logs[-1]
        assert res.examples_seen == 4 * config.batch_size
    assert logs[0] == logs[1]
    assert [r["step"] for r in logs[0]] == [0, 1, 2, 3]
    assert all(math.isfinite(r["L_Q"]) for r in logs[0])


def test_zero_tasks_is_a_no_op(small_bundle):
    parser, loss_fn = _parser(small_bundle)
    before = {k: v.clone() for k, v in parser.model.state_dict().items()}
    for train in (train_meta, train_minibatch):
        res = train(parser.model, small_bundle.examples["train"], MetaConfig(task_count=0, n_way=2, k_shot=2), loss_fn)
        assert res.log == [] and res.examples_seen == 0
    assert all(torch.equal(before[k], v) for k, v in parser.model.state_dict().items())


def test_early_stopping_restores_best_state(small_bundle):
    parser, loss_fn = _parser(small_bundle)
    scores = iter([0.5, 0.4, 0.3, 0.9])
    snapshots = []

    def dev_fn():
        snapshots.append({k: v.clone() for k, v in parser.model.state_dict().items()})
        return next(scores)

    config = MetaConfig(alpha_encoder=1e-2, alpha_sub=1e-2, beta_encoder=1e-2, beta_sub=1e-2, n_way=2, k_shot=2,
                        task_count=10, eval_every=1, patience=2)
    res = train_minibatch(parser.model, small_bundle.examples["train"], config, loss_fn, dev_fn=dev_fn)
    assert res.stopped_early and res.best_dev_lf == 0.5 and res.best_step == 0
    assert len(res.log) == 3 and [r["dev_LF"] for r in res.log] == [0.5, 0.4, 0.3]
    assert all(torch.equal(snapshots[0][k], v) for k, v in parser.model.state_dict().items())


def test_full_mode_gradient_matches_finite_differences_of_meta_objective(small_bundle):
    from gradcheck import central_difference, randomized, rel_err

    parser, loss_fn = _parser(small_bundle)
    randomized(parser, seed=2, scale=0.3)
    config = MetaConfig(alpha_encoder=1e-2, alpha_sub=3e-2, gamma=0.4, n_way=2, k_shot=2, gradient_mode="full")
    ep = sample_episode(small_bundle.examples["train"], 2, 2, random.Random(4))
    params = dict(parser.model.named_parameters())
    rates = {n: config.alpha_encoder if n.startswith("encoder.") else config.alpha_sub for n in params}

    def objective():
        with torch.enable_grad():
            theta = {n: p.detach().requires_grad_(True) for n, p in params.items()}
            loss_s = loss_fn(theta, ep.support)
            grads = torch.autograd.grad(loss_s, list(theta.values()), allow_unused=True)
        phi = {n: theta[n].detach() - rates[n] * (g if g is not None else 0.0) for n, g in zip(theta, grads)}
        return config.gamma * loss_s.detach() + (1 - config.gamma) * loss_fn(phi, ep.query).detach()

    before = {n: p.detach().clone() for n, p in params.items()}
    meta_step(parser.model, torch.optim.SGD(parser.model.parameters(), lr=1.0), ep, config, loss_fn)
    grad = {n: before[n] - p.detach() for n, p in params.items()}
    with torch.no_grad():
        for n, p in params.items():
            p.copy_(before[n])
    gen = torch.Generator().manual_seed(0)
    direction = {n: torch.randn(p.shape, generator=gen, dtype=p.dtype) for n, p in params.items()}

    def shift(h):
        with torch.no_grad():
            for n, p in params.items():
                p.copy_(before[n] + h * direction[n])

    numeric = central_difference(objective, shift)
    analytic = sum(float((grad[n] * direction[n]).sum()) for n in params)
    assert rel_err(numeric, analytic) <= 1e-6
