"""Table-disjoint episodic meta-training and the plain mini-batch baseline.

One meta step on an episode (support set S, query set Q from disjoint tables):

1. ``L_S`` = summed loss on S at ``theta``
2. ``phi = theta - alpha * grad L_S`` (plain gradient descent, per-group alpha)
3. ``L_Q`` = summed loss on Q at ``phi``
4. ``L = gamma * L_S + (1 - gamma) * L_Q``
5. Adam step on ``grad_theta L`` with per-group learning rates beta

In ``first_order`` mode the inner gradient is detached, so ``d phi / d theta``
is the identity and the query term contributes ``grad_phi L_Q``. ``full``
mode differentiates through the inner update.
"""

from __future__ import annotations

import json
import logging
import math
import random
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import torch
from torch import nn
from torch.func import functional_call
from torch.nn.attention import SDPBackend, sdpa_kernel

from .data_model import Example

logger = logging.getLogger(__name__)

ENCODER_PREFIX = "encoder."
GRADIENT_MODES = ("first_order", "full")

LossFn = Callable[[Mapping[str, torch.Tensor], Sequence[Example]], torch.Tensor]


class EpisodeConfigError(ValueError):
    """The dataset cannot supply the requested episodes."""


@dataclass
class MetaConfig:
    alpha_encoder: float = 1e-5
    alpha_sub: float = 1e-3
    beta_encoder: float = 1e-5
    beta_sub: float = 1e-3
    gamma: float = 0.3
    n_way: int = 4
    k_shot: int = 4
    task_count: int = 10000
    gradient_mode: str = "first_order"
    seed: int = 0
    eval_every: int = 0  # 0 disables periodic dev evaluation
    patience: int = 0  # evaluations without improvement before stopping; 0 disables

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.n_way < 1 or self.k_shot < 1:
            raise ValueError("n_way and k_shot must be >= 1")
        for name in ("alpha_encoder", "alpha_sub", "beta_encoder", "beta_sub"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ValueError(f"gradient_mode must be one of {GRADIENT_MODES}")
        if self.task_count < 0 or self.eval_every < 0 or self.patience < 0:
            raise ValueError("task_count, eval_every and patience must be >= 0")

    @property
    def batch_size(self) -> int:
        """Examples consumed per meta step; the mini-batch baseline uses the same."""
        return 2 * self.n_way * self.k_shot

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# episodes

@dataclass(frozen=True)
class Episode:
    support: tuple[Example, ...]
    query: tuple[Example, ...]
    support_table_ids: frozenset[str]
    query_table_ids: frozenset[str]

    def __post_init__(self):
        if self.support_table_ids & self.query_table_ids:
            raise AssertionError(f"support and query share tables {sorted(self.support_table_ids & self.query_table_ids)}")
        if {e.table_id for e in self.support} != self.support_table_ids:
            raise AssertionError("support examples do not match support_table_ids")
        if {e.table_id for e in self.query} != self.query_table_ids:
            raise AssertionError("query examples do not match query_table_ids")


def group_by_table(examples: Sequence[Example]) -> dict[str, list[Example]]:
    grouped: dict[str, list[Example]] = defaultdict(list)
    for ex in examples:
        grouped[ex.table_id].append(ex)
    return dict(grouped)


def sample_episode(dataset: Mapping[str, Sequence[Example]] | Sequence[Example], n_way: int, k_shot: int,
                   rng: random.Random) -> Episode:
    """N tables x K examples for support and for query, with disjoint table sets."""
    grouped = dataset if isinstance(dataset, Mapping) else group_by_table(dataset)
    eligible = sorted(t for t, exs in grouped.items() if len(exs) >= k_shot)
    if len(eligible) < 2 * n_way:
        raise EpisodeConfigError(
            f"need {2 * n_way} tables with >= {k_shot} examples, found {len(eligible)} "
            f"(short by {2 * n_way - len(eligible)})")
    tables = rng.sample(eligible, 2 * n_way)

    def draw(ids):
        return tuple(ex for t in ids for ex in rng.sample(list(grouped[t]), k_shot))

    s_ids, q_ids = tables[:n_way], tables[n_way:]
    return Episode(draw(s_ids), draw(q_ids), frozenset(s_ids), frozenset(q_ids))


# ---------------------------------------------------------------------------
# steps

def make_optimizer(model: nn.Module, config: MetaConfig) -> torch.optim.Adam:
    """Adam with two parameter groups: the encoder and every head."""
    enc = [p for n, p in model.named_parameters() if n.startswith(ENCODER_PREFIX)]
    sub = [p for n, p in model.named_parameters() if not n.startswith(ENCODER_PREFIX)]
    groups = [{"params": enc, "lr": config.beta_encoder, "name": "encoder"},
              {"params": sub, "lr": config.beta_sub, "name": "sub"}]
    return torch.optim.Adam([g for g in groups if g["params"]])


def inner_rates(model: nn.Module, config: MetaConfig) -> dict[str, float]:
    return {n: config.alpha_encoder if n.startswith(ENCODER_PREFIX) else config.alpha_sub
            for n, _ in model.named_parameters()}


def model_loss_fn(model: nn.Module, make_batch: Callable[[Sequence[Example]], object]) -> LossFn:
    """Loss of ``model`` evaluated with substituted parameters."""
    def loss_fn(params, examples):
        return functional_call(model, dict(params), (make_batch(examples),))
    return loss_fn


def _finite(*values) -> bool:
    return all(v is None or math.isfinite(v) for v in values)


@dataclass
class StepResult:
    L_S: float | None
    L_Q: float | None
    L: float | None
    skipped: bool = False


def minibatch_step(model: nn.Module, optimizer: torch.optim.Optimizer, examples: Sequence[Example],
                   loss_fn: LossFn) -> StepResult:
    params = dict(model.named_parameters())
    loss = loss_fn(params, examples)
    value = float(loss.detach())
    if not _finite(value):
        optimizer.zero_grad(set_to_none=True)
        return StepResult(None, None, None, skipped=True)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return StepResult(value, None, value)


def meta_step(model: nn.Module, optimizer: torch.optim.Optimizer, episode: Episode, config: MetaConfig,
              loss_fn: LossFn) -> StepResult:
    names = [n for n, _ in model.named_parameters()]
    params = dict(model.named_parameters())
    alpha = inner_rates(model, config)
    full = config.gradient_mode == "full"
    gamma = config.gamma

    if full:
        # fused attention kernels have no double backward
        with sdpa_kernel([SDPBackend.MATH]):
            return _full_meta_step(model, optimizer, episode, config, loss_fn, names, params, alpha)

    loss_s = loss_fn(params, episode.support)
    l_s = float(loss_s.detach())
    if not _finite(l_s):
        optimizer.zero_grad(set_to_none=True)
        return StepResult(None, None, None, skipped=True)
    grads_s = torch.autograd.grad(loss_s, [params[n] for n in names], allow_unused=True)
    grads_s = [torch.zeros_like(params[n]) if g is None else g for n, g in zip(names, grads_s)]

    if gamma == 1.0:
        # the query term has zero weight
        optimizer.zero_grad(set_to_none=True)
        for n, g in zip(names, grads_s):
            params[n].grad = g.detach().clone()
        optimizer.step()
        return StepResult(l_s, None, l_s)

    phi = {n: (params[n].detach() - alpha[n] * g.detach()).requires_grad_(True) for n, g in zip(names, grads_s)}
    loss_q = loss_fn(phi, episode.query)
    l_q = float(loss_q.detach())
    l_total = gamma * l_s + (1.0 - gamma) * l_q
    if not _finite(l_q, l_total):
        optimizer.zero_grad(set_to_none=True)
        return StepResult(l_s, None, None, skipped=True)
    grads_q = torch.autograd.grad(loss_q, [phi[n] for n in names], allow_unused=True)
    optimizer.zero_grad(set_to_none=True)
    for n, g_s, g_q in zip(names, grads_s, grads_q):
        g = gamma * g_s
        if g_q is not None:
            g = g + (1.0 - gamma) * g_q
        params[n].grad = g
    optimizer.step()
    return StepResult(l_s, l_q, l_total)


def _full_meta_step(model, optimizer, episode, config, loss_fn, names, params, alpha) -> StepResult:
    """Meta step that differentiates through the inner gradient update."""
    gamma = config.gamma
    loss_s = loss_fn(params, episode.support)
    l_s = float(loss_s.detach())
    if not _finite(l_s):
        optimizer.zero_grad(set_to_none=True)
        return StepResult(None, None, None, skipped=True)
    grads_s = torch.autograd.grad(loss_s, [params[n] for n in names], create_graph=True, allow_unused=True)
    grads_s = [torch.zeros_like(params[n]) if g is None else g for n, g in zip(names, grads_s)]
    phi = {n: params[n] - alpha[n] * g for n, g in zip(names, grads_s)}
    loss_q = loss_fn(phi, episode.query)
    total = gamma * loss_s + (1.0 - gamma) * loss_q
    l_q, l_total = float(loss_q.detach()), float(total.detach())
    if not _finite(l_q, l_total):
        optimizer.zero_grad(set_to_none=True)
        return StepResult(l_s, None, None, skipped=True)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return StepResult(l_s, l_q, l_total)


# ---------------------------------------------------------------------------
# training loops

@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    best_dev_lf: float | None = None
    best_step: int | None = None
    skipped_steps: int = 0
    stopped_early: bool = False
    examples_seen: int = 0


class _Loop:
    """Shared logging, dev evaluation, best-state tracking and early stopping."""

    def __init__(self, model: nn.Module, config: MetaConfig, dev_fn, log_path):
        self.model = model
        self.config = config
        self.dev_fn = dev_fn
        self.log_path = Path(log_path) if log_path else None
        self.result = TrainResult()
        self.best_state = None
        self.bad_evals = 0
        if self.log_path:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)

    def record(self, step: int, res: StepResult, n_examples: int, wall_ms: float) -> bool:
        """Log one step; returns False when training should stop."""
        rec = {"step": step, "L_S": res.L_S, "L_Q": res.L_Q, "L": res.L, "wall_ms": round(wall_ms, 3)}
        if res.skipped:
            rec["skipped"] = True
            self.result.skipped_steps += 1
            logger.warning("step %d: non-finite loss, update skipped", step)
        else:
            self.result.examples_seen += n_examples
        keep_going = True
        cfg = self.config
        if self.dev_fn is not None and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            lf = float(self.dev_fn())
            rec["dev_LF"] = lf
            if self.result.best_dev_lf is None or lf > self.result.best_dev_lf:
                self.result.best_dev_lf, self.result.best_step = lf, step
                self.best_state = {k: v.detach().clone() for k, v in self.model.state_dict().items()}
                self.bad_evals = 0
            else:
                self.bad_evals += 1
                if cfg.patience and self.bad_evals >= cfg.patience:
                    self.result.stopped_early = True
                    keep_going = False
        self.result.log.append(rec)
        if self.log_path:
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return keep_going

    def finish(self) -> TrainResult:
        if self.best_state is not None:
            self.model.load_state_dict(self.best_state)
        return self.result


def train_meta(model: nn.Module, train_examples: Sequence[Example], config: MetaConfig, loss_fn: LossFn,
               dev_fn: Callable[[], float] | None = None, log_path=None) -> TrainResult:
    """Run ``config.task_count`` meta steps on table-disjoint episodes.

    ``dev_fn`` returns the current dev LF; when given with ``eval_every`` the
    best-scoring parameters are restored at the end.
    """
    grouped = group_by_table(train_examples)
    rng = random.Random(config.seed)
    optimizer = make_optimizer(model, config)
    loop = _Loop(model, config, dev_fn, log_path)
    model.train()
    for step in range(config.task_count):
        episode = sample_episode(grouped, config.n_way, config.k_shot, rng)
        t0 = time.perf_counter()
        res = meta_step(model, optimizer, episode, config, loss_fn)
        n = len(episode.support) + (len(episode.query) if config.gamma < 1.0 else 0)
        if not loop.record(step, res, n, 1000 * (time.perf_counter() - t0)):
            break
    return loop.finish()


def minibatch_stream(examples: Sequence[Example], batch_size: int, rng: random.Random):
    """Endless batches from reshuffled passes over ``examples``."""
    if not examples:
        raise EpisodeConfigError("no training examples")
    order: list[int] = []
    while True:
        batch = []
        while len(batch) < batch_size:
            if not order:
                order = list(range(len(examples)))
                rng.shuffle(order)
            batch.append(examples[order.pop()])
        yield batch


def train_minibatch(model: nn.Module, train_examples: Sequence[Example], config: MetaConfig, loss_fn: LossFn,
                    dev_fn: Callable[[], float] | None = None, log_path=None,
                    batch_size: int | None = None) -> TrainResult:
    """Shuffled mini-batch Adam with the same learning rates and example budget as ``train_meta``."""
    batch_size = batch_size or config.batch_size
    rng = random.Random(config.seed)
    optimizer = make_optimizer(model, config)
    loop = _Loop(model, config, dev_fn, log_path)
    stream = minibatch_stream(list(train_examples), batch_size, rng)
    model.train()
    for step in range(config.task_count):
        batch = next(stream)
        t0 = time.perf_counter()
        res = minibatch_step(model, optimizer, batch, loss_fn)
        if not loop.record(step, res, len(batch), 1000 * (time.perf_counter() - t0)):
            break
    return loop.finish()


def read_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def strip_timing(log: Sequence[dict]) -> list[dict]:
    return [{k: v for k, v in rec.items() if k != "wall_ms"} for rec in log]

