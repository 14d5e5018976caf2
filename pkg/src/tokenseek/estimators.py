"""scikit-learn style wrappers around scoring and fine-tuning.

Inputs are ragged token sequences, so ``X`` is a list of instances (encoded
instances, instruction records, or 1-D integer arrays) rather than a 2-D
array; outputs are lists of per-token arrays.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import BOS, EncodedInstance, InstructionRecord, encode, truncate
from .model import Parameters, forward_full, next_token_targets
from .seeker import ScoreFile, score_corpus, score_instance
from .trainer import TrainConfig, eval_loss, train


def check_instances(X, max_seq: int | None = None) -> list[EncodedInstance]:
    """Coerce ``X`` to a list of encoded instances, validating token ranges and lengths."""
    if isinstance(X, (EncodedInstance, InstructionRecord, np.ndarray)) and not (
            isinstance(X, np.ndarray) and X.dtype == object):
        X = [X]
    out = []
    for i, x in enumerate(X):
        if isinstance(x, EncodedInstance):
            inst = x
        elif isinstance(x, InstructionRecord):
            inst = encode(x, max_seq)
        else:
            ids = np.asarray(x)
            if ids.ndim != 1 or ids.size == 0 or not np.issubdtype(ids.dtype, np.integer):
                raise ValueError(f"instance {i}: expected a non-empty 1-D integer token array")
            inst = EncodedInstance(ids.astype(np.int64), 0 if ids[0] != BOS else 1, f"x{i}")
        if inst.ids.min() < 0:
            raise ValueError(f"instance {inst.id}: negative token id")
        if max_seq is not None and inst.n > max_seq:
            inst = truncate(inst, max_seq)
        out.append(inst)
    if not out:
        raise ValueError("X holds no instances")
    return out


def check_params(model) -> Parameters:
    if not isinstance(model, Parameters):
        raise TypeError(f"model must be Parameters, got {type(model).__name__}")
    return model


class TokenScorer(TransformerMixin, BaseEstimator):
    """Per-token fused importance scores from a fixed model.

    ``fit`` only validates; ``transform`` returns one fused-score array per instance.
    """

    def __init__(self, model=None, alpha: float = 5.0, beta: float = 5.0, magnitude: bool = True):
        self.model = model
        self.alpha = alpha
        self.beta = beta
        self.magnitude = magnitude

    def fit(self, X, y=None):
        params = check_params(self.model)
        check_instances(X, params.config.max_seq)
        self.model_checksum_ = params.checksum()
        return self

    def score_file(self, X) -> ScoreFile:
        check_is_fitted(self, "model_checksum_")
        params = check_params(self.model)
        scores = [score_instance(params, inst, self.alpha, self.beta, self.magnitude)
                  for inst in check_instances(X, params.config.max_seq)]
        return ScoreFile(scores, self.alpha, self.beta, self.magnitude, self.model_checksum_)

    def transform(self, X):
        return [s.fused for s in self.score_file(X).scores]

    def select(self, X, ratio: float = 0.1):
        """Selected token indices per instance."""
        return [s.mask(ratio).selected for s in self.score_file(X).scores]


class TokenSeekFineTuner(BaseEstimator):
    """Fine-tunes a copy of ``model`` in full, random or seek mode."""

    def __init__(self, model=None, mode: str = "seek", ratio: float = 0.1, alpha: float = 5.0, beta: float = 5.0,
                 lr_max: float = 4e-4, warmup_steps: int = 100, weight_decay: float = 0.01, accum_steps: int = 32,
                 epochs: int = 1, seed: int = 0, loss_on: str = "all", adapter: bool = False):
        self.model = model
        self.mode = mode
        self.ratio = ratio
        self.alpha = alpha
        self.beta = beta
        self.lr_max = lr_max
        self.warmup_steps = warmup_steps
        self.weight_decay = weight_decay
        self.accum_steps = accum_steps
        self.epochs = epochs
        self.seed = seed
        self.loss_on = loss_on
        self.adapter = adapter

    def _config(self) -> TrainConfig:
        return TrainConfig(mode=self.mode, ratio=self.ratio, alpha=self.alpha, beta=self.beta, lr_max=self.lr_max,
                           warmup_steps=self.warmup_steps, weight_decay=self.weight_decay,
                           accum_steps=self.accum_steps, epochs=self.epochs, seeds=[self.seed],
                           adapter=self.adapter, loss_on=self.loss_on)

    def fit(self, X, y=None, scores: ScoreFile | None = None):
        params = check_params(self.model)
        corpus = check_instances(X, params.config.max_seq)
        config = self._config()
        if config.mode == "seek" and scores is None:
            scores = score_corpus(params, corpus, self.alpha, self.beta, loss_on=self.loss_on)
        self.run_ = train(params, corpus, config, scores, seed=self.seed)
        self.params_ = self.run_.params
        self.adapters_ = self.run_.adapters
        return self

    def loss(self, X) -> float:
        check_is_fitted(self, "params_")
        return eval_loss(self.params_, check_instances(X, self.params_.config.max_seq), self.adapters_, self.loss_on)

    def score(self, X, y=None) -> float:
        """Negative mean cross-entropy, so that larger is better."""
        return -self.loss(X)

    def predict(self, X):
        """Greedy next-token prediction at every position of each instance."""
        check_is_fitted(self, "params_")
        out = []
        for inst in check_instances(X, self.params_.config.max_seq):
            res = forward_full(self.params_, inst.ids, next_token_targets(inst.ids), adapters=self.adapters_)
            out.append(np.argmax(res.logits, axis=1))
        return out
