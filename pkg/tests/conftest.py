import numpy as np
import pytest

from distillforge import tensor as T
from distillforge.model import Seq2SeqConfig, Seq2SeqParams, forward, init_params, make_batch
from distillforge.train import nll_loss


@pytest.fixture
def f64():
    with T.precision("float64"):
        yield


def tiny_config(**kw) -> Seq2SeqConfig:
    base = dict(bpe_merges=10, embed_size=3, hidden_size=4, rnn_dropout_inputs=0.0, rnn_dropout_states=0.0)
    base.update(kw)
    return Seq2SeqConfig(**base)


def toy_batch():
    return make_batch([([4, 5, 6], [4, 5]), ([5, 4], [5, 5, 4])])


def param_loss(params: Seq2SeqParams, batch, name: str):
    """Scalar NLL as a function of one parameter tensor, for finite differences."""

    def f(x):
        tensors = dict(params.tensors)
        tensors[name] = x
        q = Seq2SeqParams(params.config, params.src_vocab_size, params.trg_vocab_size, tensors)
        total, _ = nll_loss(forward(q, batch), batch.trg_out, 0.0, batch.trg_mask)
        return total

    return f


def random_tiny_model(seed: int, vocab: int = 6, hidden: int = 6, sharpen: float = 3.0) -> Seq2SeqParams:
    p = init_params(tiny_config(embed_size=4, hidden_size=hidden), 7, vocab, seed)
    return p.with_arrays({k: np.asarray(v, dtype=np.float64) * sharpen for k, v in p.arrays().items()}, dtype=np.float64)


ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    """Store and print the one-line verdict for an acceptance criterion."""
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
