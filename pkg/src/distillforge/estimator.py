"""scikit-learn style wrappers around the subword codec and the translation model."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .decode import Translator, translate_corpus
from .eval import corpus_bleu
from .model import Seq2SeqConfig
from .textproc import Bitext, Codec, as_tokens, reverse_bpe
from .train import TrainConfig, train_loop


def check_sentences(X, name: str = "X") -> list[tuple[str, ...]]:
    """Coerce an iterable of sentences (strings or token lists) to token tuples."""
    if isinstance(X, str):
        raise TypeError(f"{name} must be a collection of sentences, not a single string")
    if isinstance(X, np.ndarray):
        if X.ndim != 1:
            raise ValueError(f"{name} must be one-dimensional, got shape {X.shape}")
        X = X.tolist()
    try:
        out = [as_tokens(s) for s in X]
    except TypeError as exc:
        raise TypeError(f"{name} must contain strings or token sequences") from exc
    return out


def check_parallel(X, y) -> tuple[list[tuple[str, ...]], list[tuple[str, ...]]]:
    Xs, ys = check_sentences(X), check_sentences(y, "y")
    if len(Xs) != len(ys):
        raise ValueError(f"X and y have different lengths: {len(Xs)} vs {len(ys)}")
    if not Xs:
        raise ValueError("empty training data")
    return Xs, ys


class BpeSegmenter(TransformerMixin, BaseEstimator):
    """Learn BPE merges plus a vocabulary; transform sentences to subword strings."""

    def __init__(self, num_merges: int = 10000, min_count: int = 1):
        self.num_merges = num_merges
        self.min_count = min_count

    def fit(self, X, y=None):
        self.codec_ = Codec.fit(check_sentences(X), self.num_merges, self.min_count)
        self.vocabulary_size_ = len(self.codec_.vocab)
        return self

    def transform(self, X) -> list[str]:
        check_is_fitted(self, "codec_")
        return [" ".join(self.codec_.segment(s)) for s in check_sentences(X)]

    def inverse_transform(self, X) -> list[str]:
        check_is_fitted(self, "codec_")
        return [" ".join(reverse_bpe(s, self.codec_.bpe.marker)) for s in check_sentences(X)]


class Seq2SeqTranslator(BaseEstimator):
    """Attentional encoder-decoder trained for a fixed update budget.

    ``fit(X, y)`` takes source and target sentences; ``predict`` returns
    detokenized-by-space translations and ``score`` the corpus BLEU.
    """

    def __init__(self, bpe_merges: int = 10000, embed_size: int = 256, hidden_size: int = 256, num_layers: int = 1,
                 cell_type: str = "lstm", dropout: float = 0.1, initial_learning_rate: float = 0.0003,
                 batch_size: int = 4096, checkpoint_frequency: int = 4000, max_checkpoints: int = 30,
                 label_smoothing: float = 0.1, beam_size: int = 5, length_norm: bool = True, random_state: int = 0):
        self.bpe_merges = bpe_merges
        self.embed_size = embed_size
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.cell_type = cell_type
        self.dropout = dropout
        self.initial_learning_rate = initial_learning_rate
        self.batch_size = batch_size
        self.checkpoint_frequency = checkpoint_frequency
        self.max_checkpoints = max_checkpoints
        self.label_smoothing = label_smoothing
        self.beam_size = beam_size
        self.length_norm = length_norm
        self.random_state = random_state

    def _configs(self) -> tuple[Seq2SeqConfig, TrainConfig]:
        model = Seq2SeqConfig(bpe_merges=self.bpe_merges, embed_size=self.embed_size, hidden_size=self.hidden_size,
                              num_layers=self.num_layers, cell_type=self.cell_type,
                              rnn_dropout_inputs=self.dropout, rnn_dropout_states=self.dropout)
        train = TrainConfig(initial_learning_rate=self.initial_learning_rate, batch_size=self.batch_size,
                            checkpoint_frequency=self.checkpoint_frequency, max_checkpoints=self.max_checkpoints,
                            label_smoothing=self.label_smoothing, valid_beam_size=self.beam_size,
                            seed=int(self.random_state))
        return model, train

    def fit(self, X, y, X_valid=None, y_valid=None):
        Xs, ys = check_parallel(X, y)
        model, train = self._configs()
        bitext = Bitext(tuple(zip(Xs, ys)))
        if X_valid is None:
            valid = Bitext(bitext.pairs[: min(len(bitext), 100)], "valid")
        else:
            valid = Bitext(tuple(zip(*check_parallel(X_valid, y_valid))), "valid")
        src = Codec.fit(Xs, self.bpe_merges)
        trg = Codec.fit(ys, self.bpe_merges)
        result = train_loop(model, train, bitext, valid, src, trg, log_timing=False)
        self.translator_ = result.translator
        self.metrics_ = result.metrics
        self.best_checkpoint_ = result.best_checkpoint
        self.n_params_ = result.params.num_params()
        return self

    @classmethod
    def from_translator(cls, translator: Translator, **kwargs) -> "Seq2SeqTranslator":
        cfg = translator.params.config
        est = cls(bpe_merges=cfg.bpe_merges, embed_size=cfg.embed_size, hidden_size=cfg.hidden_size,
                  num_layers=cfg.num_layers, cell_type=cfg.cell_type, dropout=cfg.rnn_dropout_inputs, **kwargs)
        est.translator_ = translator
        est.n_params_ = translator.params.num_params()
        return est

    def predict(self, X, nbest: int = 1) -> list[str] | list[list[str]]:
        check_is_fitted(self, "translator_")
        out = translate_corpus(self.translator_, check_sentences(X), self.beam_size, nbest=nbest, length_norm=self.length_norm)
        if nbest == 1:
            return [" ".join(t) for t in out.best]
        return [[" ".join(c) for c in cands] for cands in out.nbest]

    def score(self, X, y, sample_weight=None) -> float:
        if sample_weight is not None:
            raise ValueError("corpus BLEU does not support sample weights")
        hyps = self.predict(X)
        return corpus_bleu(hyps, check_sentences(y, "y")).bleu
