"""Sequence-level knowledge distillation for small NMT students, with a numpy seq2seq backend."""

from .decode import Translator, beam_search, greedy_decode, translate_corpus
from .eval import BleuReport, aggregate_trials, corpus_bleu
from .model import LARGE, SMALL, Seq2SeqConfig, count_params, init_params
from .synth import SyntheticTaskSpec, conditional_entropy, generate_bitext, oracle_mode_translation
from .textproc import Bitext, Codec
from .train import TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "BleuReport", "Bitext", "Codec", "LARGE", "SMALL", "Seq2SeqConfig", "SyntheticTaskSpec", "TrainConfig", "Translator",
    "aggregate_trials", "beam_search", "conditional_entropy", "corpus_bleu", "count_params", "generate_bitext",
    "greedy_decode", "init_params", "oracle_mode_translation", "train_loop", "translate_corpus",
]
