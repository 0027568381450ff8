"""Beam search, greedy decoding, n-best extraction and corpus translation."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import DecoderState, Seq2SeqParams, decode_step, encode, expand_encoder, initial_state, pad_ids
from .textproc import BOS, EOS, PAD, UNK, BpeModel, Codec, Vocabulary, as_tokens

logger = logging.getLogger(__name__)

# never emitted by the decoder
BANNED = (PAD, UNK, BOS)


def default_max_len(src_len: int, cap: int = 100) -> int:
    return min(2 * src_len + 10, cap)


@dataclass
class Hypothesis:
    """A decoded target prefix.

    ``tokens`` are the emitted ids after the implicit BOS (EOS included once
    finished).  ``finished=False`` on a returned hypothesis means the search
    hit ``max_len`` first (truncation).
    """

    tokens: tuple[int, ...]
    logprob: float
    score: float
    finished: bool
    state: DecoderState | None = field(default=None, repr=False)

    @property
    def output(self) -> tuple[int, ...]:
        """Tokens without the trailing EOS."""
        return self.tokens[:-1] if self.finished else self.tokens


def _score(logprob: float, length: int, length_norm: bool) -> float:
    return logprob / max(length, 1) if length_norm else logprob


def beam_search_batch(
    params: Seq2SeqParams,
    sources: Sequence[Sequence[int]],
    beam_size: int,
    max_len: int | Callable[[int], int] | None = None,
    length_norm: bool = True,
) -> list[list[Hypothesis]]:
    """Beam search for several sources at once.

    Each step expands every live hypothesis over the vocabulary and keeps
    the top ``beam_size`` expansions by accumulated log-probability; those
    ending in EOS move to a finished pool.  A sentence stops once it has
    ``beam_size`` finished hypotheses that no live one can still beat, when
    nothing is live, or at its length limit.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    N, k = len(sources), beam_size
    if N == 0:
        return []
    if max_len is None:
        max_len = default_max_len
    limits = np.array([max_len(len(s)) if callable(max_len) else max_len for s in sources])
    if limits.min() < 1:
        raise ValueError("max_len must be >= 1")

    src, src_mask = pad_ids(sources)
    enc = expand_encoder(encode(params, src, src_mask), np.repeat(np.arange(N), k))
    state = initial_state(params, enc)
    V = params.trg_vocab_size

    live = np.full((N, k), -np.inf)
    live[:, 0] = 0.0
    hist = np.zeros((N, k, 0), dtype=np.int64)
    prev = np.full(N * k, BOS, dtype=np.int64)
    finished: list[list[tuple[float, float, tuple[int, ...]]]] = [[] for _ in range(N)]
    done = np.zeros(N, dtype=bool)
    last_live: list[tuple[float, tuple[int, ...]] | None] = [None] * N

    for step in range(int(limits.max())):
        logp, new_state = decode_step(params, prev, state, enc)
        logp = logp.astype(np.float64)
        logp[:, BANNED] = -np.inf
        cand = live[:, :, None] + logp.reshape(N, k, V)
        cand[done] = -np.inf
        cand = cand.reshape(N, k * V)
        top = np.argpartition(-cand, k - 1, axis=1)[:, :k]
        vals = np.take_along_axis(cand, top, axis=1)
        order = np.lexsort((top, -vals), axis=1)
        top = np.take_along_axis(top, order, axis=1)
        vals = np.take_along_axis(vals, order, axis=1)
        beam_src, tok = top // V, top % V
        valid = np.isfinite(vals)
        is_eos = valid & (tok == EOS)

        for i, j in zip(*np.nonzero(is_eos)):
            toks = tuple(hist[i, beam_src[i, j]].tolist()) + (EOS,)
            finished[i].append((_score(vals[i, j], len(toks), length_norm), float(vals[i, j]), toks))

        keep = valid & ~is_eos
        slot = np.argsort(~keep, axis=1, kind="stable")
        keep = np.take_along_axis(keep, slot, axis=1)
        beam_src = np.take_along_axis(beam_src, slot, axis=1)
        tok = np.take_along_axis(tok, slot, axis=1)
        live = np.where(keep, np.take_along_axis(vals, slot, axis=1), -np.inf)
        hist = np.concatenate([hist[np.arange(N)[:, None], beam_src], tok[:, :, None]], axis=2)
        rows = (np.arange(N)[:, None] * k + beam_src).reshape(-1)
        state = new_state.select(rows)
        prev = np.where(keep, tok, EOS).reshape(-1)

        for i in np.nonzero(~done)[0]:
            best_live = live[i, 0]
            if np.isfinite(best_live):
                last_live[i] = (float(best_live), tuple(hist[i, 0].tolist()))
            if not np.isfinite(best_live) or step + 1 >= limits[i]:
                done[i] = True
            elif len(finished[i]) >= k:
                kth = sorted((f[0] for f in finished[i]), reverse=True)[k - 1]
                # log-probs only fall, so the best live score is bounded by its
                # current logprob (spread over max length when normalising)
                bound = best_live / limits[i] if length_norm else best_live
                if bound <= kth:
                    done[i] = True
        if done.all():
            break

    results = []
    for i in range(N):
        pool = sorted(finished[i], key=lambda f: (-f[0], -f[1], f[2]))[:k]
        hyps = [Hypothesis(t, lp, sc, True) for sc, lp, t in pool]
        if not hyps and last_live[i] is not None:
            lp, toks = last_live[i]
            hyps = [Hypothesis(toks, lp, _score(lp, len(toks), length_norm), False)]
        results.append(hyps)
    return results


def beam_search(params: Seq2SeqParams, source: Sequence[int], beam_size: int = 5,
                max_len: int | None = None, length_norm: bool = True) -> list[Hypothesis]:
    """Finished hypotheses for one source, best first (at most ``beam_size``)."""
    return beam_search_batch(params, [list(source)], beam_size, max_len, length_norm)[0]


def greedy_decode(params: Seq2SeqParams, source: Sequence[int], max_len: int | None = None) -> Hypothesis:
    """Step-wise argmax decoding, independent of the beam machinery."""
    src = np.asarray([list(source)], dtype=np.int64)
    enc = encode(params, src)
    state = initial_state(params, enc)
    limit = max_len if max_len is not None else default_max_len(len(source))
    prev, toks, total = BOS, [], 0.0
    for _ in range(limit):
        logp, state = decode_step(params, np.array([prev]), state, enc)
        row = logp[0].astype(np.float64)
        row[list(BANNED)] = -np.inf
        prev = int(np.argmax(row))
        total += row[prev]
        toks.append(prev)
        if prev == EOS:
            return Hypothesis(tuple(toks), total, total, True)
    return Hypothesis(tuple(toks), total, total, False)


def best_k(hypotheses: Sequence[Hypothesis], k: int, key: Callable[[Hypothesis], object] | None = None) -> tuple[list[Hypothesis], int]:
    """Top ``k`` distinct finished hypotheses and the shortfall (0 if ``k`` were found).

    Distinctness is by ``key`` (default: the token sequence).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    key = key or (lambda h: h.tokens)
    seen, out = set(), []
    for h in sorted((h for h in hypotheses if h.finished), key=lambda h: -h.score):
        kk = key(h)
        if kk in seen:
            continue
        seen.add(kk)
        out.append(h)
        if len(out) == k:
            break
    return out, k - len(out)


# ---------------------------------------------------------------- corpus level


@dataclass
class TranslationOutput:
    nbest: list[list[list[str]]]
    failures: list[int]

    @property
    def best(self) -> list[list[str]]:
        return [c[0] if c else [] for c in self.nbest]

    def __len__(self) -> int:
        return len(self.nbest)


@dataclass(frozen=True)
class Translator:
    """A trained model bundled with its source/target codecs."""

    params: Seq2SeqParams
    src: Codec
    trg: Codec

    def translate(self, sentences: Sequence, beam_size: int = 5, nbest: int = 1, length_norm: bool = True,
                  workers: int = 1, chunk_size: int = 64) -> TranslationOutput:
        return translate_corpus(self, sentences, beam_size, nbest=nbest, length_norm=length_norm,
                                workers=workers, chunk_size=chunk_size)

    def save(self, directory: str | Path, extra: dict | None = None) -> None:
        directory = Path(directory)
        meta = {"src_bpe": "src.bpe", "trg_bpe": "trg.bpe", "src_vocab": "src.vocab", "trg_vocab": "trg.vocab"}
        meta.update(extra or {})
        self.params.save(directory, meta)
        self.src.bpe.save(directory / "src.bpe")
        self.trg.bpe.save(directory / "trg.bpe")
        self.src.vocab.save(directory / "src.vocab")
        self.trg.vocab.save(directory / "trg.vocab")

    @classmethod
    def load(cls, directory: str | Path) -> "Translator":
        directory = Path(directory)
        meta = json.loads((directory / "config.json").read_text())
        params = Seq2SeqParams.load(directory)
        src = Codec(BpeModel.load(directory / meta.get("src_bpe", "src.bpe")), Vocabulary.load(directory / meta.get("src_vocab", "src.vocab")))
        trg = Codec(BpeModel.load(directory / meta.get("trg_bpe", "trg.bpe")), Vocabulary.load(directory / meta.get("trg_vocab", "trg.vocab")))
        return cls(params, src, trg)


def translate_corpus(translator: Translator, sentences: Sequence, beam_size: int = 5, nbest: int = 1,
                     length_norm: bool = True, workers: int = 1, chunk_size: int = 64,
                     out: str | Path | None = None) -> TranslationOutput:
    """Order-preserving beam translation of a corpus, BPE reversed.

    Sentences are length-sorted and cut into fixed chunks before any worker
    sees them, so the output does not depend on ``workers``.  A chunk that
    fails is retried sentence by sentence; sentences that still fail become
    empty lines and are listed in ``failures``.
    """
    sents = [as_tokens(s) for s in sentences]
    ids = [translator.src.encode(s)[: translator.params.config.max_seq_len] for s in sents]
    order = sorted(range(len(ids)), key=lambda i: (len(ids[i]), i))
    chunks = [order[i : i + chunk_size] for i in range(0, len(order), chunk_size)]
    results: list[list[list[str]]] = [[] for _ in sents]
    failures: list[int] = []
    cap = translator.params.config.max_seq_len

    def run(chunk: list[int]):
        todo = [i for i in chunk if ids[i]]
        got: dict[int, list[Hypothesis]] = {i: [] for i in chunk if not ids[i]}
        if not todo:
            return chunk, got
        try:
            hyps = beam_search_batch(translator.params, [ids[i] for i in todo], max(beam_size, nbest),
                                     lambda n: default_max_len(n, cap), length_norm)
            return chunk, {**got, **dict(zip(todo, hyps))}
        except (FloatingPointError, ValueError, IndexError):
            for i in todo:
                try:
                    got[i] = beam_search_batch(translator.params, [ids[i]], max(beam_size, nbest),
                                               lambda n: default_max_len(n, cap), length_norm)[0]
                except (FloatingPointError, ValueError, IndexError):
                    logger.exception("translation failed for sentence %d", i)
            return chunk, got

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            outcomes = list(pool.map(run, chunks))
    else:
        outcomes = [run(c) for c in chunks]

    for chunk, got in outcomes:
        for i in chunk:
            if i not in got:
                failures.append(i)
                continue
            cands, seen = [], set()
            for h in got[i]:
                words = tuple(translator.trg.decode(h.output))
                if words not in seen:
                    seen.add(words)
                    cands.append(list(words))
                if len(cands) == nbest:
                    break
            results[i] = cands
    failures.sort()
    if failures:
        logger.warning("%d of %d sentences failed to translate", len(failures), len(sents))
    output = TranslationOutput(results, failures)
    if out is not None:
        write_translations(output, out, nbest)
    return output


def write_translations(output: TranslationOutput, path: str | Path, nbest: int = 1) -> None:
    lines = []
    for cands in output.nbest:
        if nbest > 1:
            lines.append("\t".join(" ".join(c) for c in cands))
        else:
            lines.append(" ".join(cands[0]) if cands else "")
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
