"""Model + featurizer bundle with batched prediction and checkpoint I/O.

Checkpoint format (``torch.save`` of a plain dict, loadable with
``weights_only=True``)::

    {"format": "mcsql-checkpoint", "version": 1,
     "config": ModelConfig.to_dict(),
     "vocab": {"words": [...], "chars": [...]},
     "tensors": {name: tensor, ...},          # every named parameter
     "shapes": {name: [dims], ...},
     "meta": {...}}                           # free-form (flags, dev LF, ...)
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import torch

from .data_model import Example, SQLQuery, TableData
from .encoder import Vocab, build_vocabs
from .featurize import Batch, Featurizer, collate
from .submodules import MCSQL, ModelConfig, decode, teacher_forced_predictions

CHECKPOINT_FORMAT = "mcsql-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class Parser:
    def __init__(self, model: MCSQL, featurizer: Featurizer):
        self.model = model
        self.featurizer = featurizer

    @classmethod
    def build(cls, config: ModelConfig, train_examples: Sequence[Example],
              tables: Mapping[str, TableData], min_count: int = 2) -> "Parser":
        words, chars = build_vocabs(train_examples, tables, min_count)
        return cls.from_vocabs(config, words, chars)

    @classmethod
    def from_vocabs(cls, config: ModelConfig, words: Vocab, chars: Vocab) -> "Parser":
        feat = Featurizer(words, chars, sigma=config.sigma, n_max=config.n_max,
                          max_len=config.encoder.max_len, max_conds=config.max_conds,
                          header_positions=config.encoder.header_positions)
        return cls(MCSQL(config, words, chars), feat)

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    def batch(self, examples: Sequence[Example], tables: Mapping[str, TableData]) -> Batch:
        return collate([self.featurizer(ex, tables[ex.table_id]) for ex in examples], self.config.max_conds)

    def loss(self, examples, tables) -> torch.Tensor:
        return self.model(self.batch(examples, tables))

    def _chunks(self, examples, batch_size):
        for i in range(0, len(examples), batch_size):
            yield examples[i:i + batch_size]

    def predict_batch(self, examples: Sequence[Example], tables: Mapping[str, TableData],
                      batch_size: int = 128) -> list[SQLQuery]:
        was_training = self.model.training
        self.model.eval()
        out = []
        try:
            for chunk in self._chunks(list(examples), batch_size):
                out.extend(decode(self.model, self.batch(chunk, tables)))
        finally:
            self.model.train(was_training)
        return out

    def predict(self, example: Example, table: TableData) -> SQLQuery:
        return self.predict_batch([example], {example.table_id: table})[0]

    def predict_subtasks_batch(self, examples, tables, batch_size: int = 128) -> list[dict]:
        was_training = self.model.training
        self.model.eval()
        out = []
        try:
            for chunk in self._chunks(list(examples), batch_size):
                out.extend(teacher_forced_predictions(self.model, self.batch(chunk, tables)))
        finally:
            self.model.train(was_training)
        return out

    # -- checkpoints -------------------------------------------------------
    def state(self, meta: dict | None = None) -> dict:
        tensors = {k: v.detach().clone() for k, v in self.model.state_dict().items()}
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "vocab": {"words": self.featurizer.words.itos, "chars": self.featurizer.chars.itos},
            "tensors": tensors,
            "shapes": {k: list(v.shape) for k, v in tensors.items()},
            "meta": dict(meta or {}),
        }

    def save(self, path, meta: dict | None = None) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state(meta), path)

    @classmethod
    def from_state(cls, state: dict) -> "Parser":
        if state.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError("not an mcsql checkpoint")
        if state.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {state.get('version')} != {CHECKPOINT_VERSION}")
        config = ModelConfig.from_dict(state["config"])
        parser = cls.from_vocabs(config, Vocab(state["vocab"]["words"]), Vocab(state["vocab"]["chars"]))
        tensors = state["tensors"]
        for name, shape in state["shapes"].items():
            if list(tensors[name].shape) != list(shape):
                raise CheckpointError(f"tensor {name} has shape {list(tensors[name].shape)}, header says {shape}")
        parser.model.load_state_dict(tensors)
        return parser

    @classmethod
    def load(cls, path) -> tuple["Parser", dict]:
        state = torch.load(Path(path), map_location="cpu", weights_only=True)
        return cls.from_state(state), state.get("meta", {})
