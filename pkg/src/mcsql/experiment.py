"""Desk-scale presets and the train/evaluate wrapper shared by the CLI and tests."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import torch

from .dataset_io import DatasetBundle
from .encoder import EncoderConfig
from .meta_trainer import MetaConfig, TrainResult, model_loss_fn, train_meta, train_minibatch
from .parser import Parser
from .sql_eval import EvalReport, evaluate
from .submodules import ModelConfig
from .synthetic import subsample_train

logger = logging.getLogger(__name__)


def desk_model_config(seed: int = 0, no_tc: bool = False, no_vl: bool = False) -> ModelConfig:
    """Small dimensions that train in minutes on one CPU core."""
    enc = EncoderConfig(d=64, d_e=32, d_t=8, bilstm_layers=1, context_layers=2, context_heads=4)
    return ModelConfig(encoder=enc, no_tc=no_tc, no_vl=no_vl, seed=seed)


def desk_meta_config(seed: int = 0, **overrides) -> MetaConfig:
    """Learning rates for an encoder trained from scratch."""
    base = MetaConfig(alpha_encoder=1e-2, alpha_sub=1e-2, beta_encoder=1e-3, beta_sub=1e-3,
                      gamma=0.5, n_way=4, k_shot=4, task_count=400, seed=seed, eval_every=100)
    return replace(base, **overrides)


@dataclass
class RunOutcome:
    parser: Parser
    train: TrainResult
    report: EvalReport | None


def dev_lf(parser: Parser, bundle: DatasetBundle, split: str = "dev") -> float:
    exs = bundle.examples[split]
    if not exs:
        return 0.0
    return evaluate(parser, exs, bundle.tables).lf_accuracy


def train_parser(bundle: DatasetBundle, model_config: ModelConfig, meta_config: MetaConfig,
                 no_ml: bool = False, train_fraction: float = 1.0, log_path=None,
                 eval_split: str | None = "dev") -> RunOutcome:
    """Build vocabularies from train, fit (meta or mini-batch) and evaluate on ``eval_split``."""
    torch.manual_seed(model_config.seed)
    if train_fraction < 1.0:
        bundle = subsample_train(bundle, train_fraction, meta_config.seed)
    train = bundle.examples["train"]
    parser = Parser.build(model_config, train, bundle.tables)
    loss_fn = model_loss_fn(parser.model, lambda exs: parser.batch(exs, bundle.tables))
    dev_fn = (lambda: dev_lf(parser, bundle)) if bundle.examples["dev"] and meta_config.eval_every else None
    if log_path:
        Path(log_path).unlink(missing_ok=True)
    fit = train_minibatch if no_ml else train_meta
    result = fit(parser.model, train, meta_config, loss_fn, dev_fn=dev_fn, log_path=log_path)
    if parser.featurizer.skipped:
        logger.warning("%d examples had gold values outside the question and were masked",
                       parser.featurizer.skipped)
    report = None
    if eval_split and bundle.examples[eval_split]:
        tags = {"no_tc": model_config.no_tc, "no_vl": model_config.no_vl, "no_ml": no_ml,
                "train_fraction": train_fraction, "seed": model_config.seed}
        report = evaluate(parser, bundle.examples[eval_split], bundle.tables,
                          bundle.zero_shot_ids.get(eval_split, set()), tags=tags)
    return RunOutcome(parser, result, report)
