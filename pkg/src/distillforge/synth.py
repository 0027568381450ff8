"""Synthetic phrase-translation tasks with an exactly known conditional distribution.

A source sentence is a sequence of phrases.  Each phrase is translated
independently by one of ``m`` target realizations (its *modes*), drawn from
``mode_probs``; afterwards every target token is swapped for a random word
from a pool of rare tokens with probability ``noise_rate``.  Source words are
distinct within the source side, and mode words and rare words are distinct
within the target side, so D(t|s) can be computed exactly by a small dynamic
program over segmentations.
"""
from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property
from itertools import product
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import make_rng
from .textproc import Bitext, as_tokens

SPLITS = ("train", "valid", "test")
_SRC_SYLLABLES = [c + v for c in "bdfgklmnprstvz" for v in "aeiou"]
_TRG_SYLLABLES = [c + v for c in "bcdfghjklmnpqrstvwxz" for v in "aeiouy"]
_MAX_CHUNK = 8


@dataclass(frozen=True)
class SyntheticTaskSpec:
    source_vocab: int = 60  # number of source phrases
    modes_per_phrase: int = 3
    mode_probs: tuple[float, ...] | None = (0.6, 0.3, 0.1)
    noise_rate: float = 0.05
    sentence_len: tuple[int, int] = (3, 8)  # phrases per sentence
    phrase_len: tuple[int, int] = (1, 3)  # source tokens per phrase
    mode_len: tuple[int, int] = (1, 3)  # target tokens per realization
    rare_pool: int = 100
    seed: int = 0
    phrase_inventory: tuple[tuple[str, ...], ...] | None = None

    def __post_init__(self):
        m = self.modes_per_phrase
        if m < 1 or self.source_vocab < 1:
            raise ValueError("need at least one phrase and one mode")
        probs = self.mode_probs if self.mode_probs is not None else tuple(np.full(m, 1.0 / m))
        probs = tuple(float(p) for p in probs)
        if len(probs) != m:
            raise ValueError(f"mode_probs has {len(probs)} entries for {m} modes")
        if abs(sum(probs) - 1) > 1e-9 or min(probs) < 0 or any(a < b for a, b in zip(probs, probs[1:])):
            raise ValueError("mode_probs must be a descending probability vector")
        object.__setattr__(self, "mode_probs", probs)
        if not 0 <= self.noise_rate < 1:
            raise ValueError("noise_rate must lie in [0, 1)")
        for name in ("sentence_len", "phrase_len", "mode_len"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must be a range with 1 <= min <= max")
            object.__setattr__(self, name, (int(lo), int(hi)))
        if self.mode_len[1] > _MAX_CHUNK:
            raise ValueError(f"mode_len is capped at {_MAX_CHUNK}")
        if self.noise_rate > 0 and self.rare_pool < 1:
            raise ValueError("noise needs a non-empty rare pool")
        if self.phrase_inventory is not None:
            inv = tuple(tuple(p) for p in self.phrase_inventory)
            words = [w for p in inv for w in p]
            if len(inv) != self.source_vocab or len(set(words)) != len(words) or not all(inv):
                raise ValueError("phrase_inventory must hold source_vocab non-empty phrases with distinct words")
            object.__setattr__(self, "phrase_inventory", inv)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskSpec":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown spec fields: {sorted(unknown)}")
        d = dict(d)
        for k in ("mode_probs", "sentence_len", "phrase_len", "mode_len"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticTaskSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @cached_property
    def task(self) -> "SyntheticTask":
        return SyntheticTask.build(self)


def _words(rng: np.random.Generator, syllables: list[str], n: int, length: int, taken: set[str]) -> list[str]:
    out = []
    while len(out) < n:
        w = "".join(syllables[i] for i in rng.integers(len(syllables), size=length))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


@dataclass
class SyntheticTask:
    """Materialized inventory: source phrases, their modes, and the rare pool."""

    spec: SyntheticTaskSpec
    phrases: list[tuple[str, ...]]
    modes: list[list[tuple[str, ...]]]
    rare: list[str]
    word_to_phrase: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.word_to_phrase = {w: i for i, p in enumerate(self.phrases) for w in p}
        self._rare_set = frozenset(self.rare)
        self._chunk_cache: dict[tuple[int, tuple[str, ...]], float] = {}

    @classmethod
    def build(cls, spec: SyntheticTaskSpec) -> "SyntheticTask":
        rng = make_rng(spec.seed, 0x5EED)
        if spec.phrase_inventory is not None:
            phrases = list(spec.phrase_inventory)
            src_taken = {w for p in phrases for w in p}
        else:
            src_taken: set[str] = set()
            lens = rng.integers(spec.phrase_len[0], spec.phrase_len[1] + 1, size=spec.source_vocab)
            phrases = [tuple(_words(rng, _SRC_SYLLABLES, int(n), 2, src_taken)) for n in lens]
        trg_taken: set[str] = set()
        modes = []
        for _ in phrases:
            lens = rng.integers(spec.mode_len[0], spec.mode_len[1] + 1, size=spec.modes_per_phrase)
            modes.append([tuple(_words(rng, _TRG_SYLLABLES, int(n), 2, trg_taken)) for n in lens])
        rare = _words(rng, _TRG_SYLLABLES, spec.rare_pool, 3, trg_taken) if spec.noise_rate > 0 else []
        return cls(spec, phrases, modes, rare)

    # -- oracle file

    def to_oracle(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "phrases": [list(p) for p in self.phrases],
            "modes": [[list(m) for m in ms] for ms in self.modes],
            "mode_probs": list(self.spec.mode_probs),
            "rare": self.rare,
        }

    @classmethod
    def from_oracle(cls, d: dict) -> "SyntheticTask":
        spec = SyntheticTaskSpec.from_dict(d["spec"])
        return cls(spec, [tuple(p) for p in d["phrases"]], [[tuple(m) for m in ms] for ms in d["modes"]], list(d["rare"]))

    # -- source side

    def parse_source(self, source) -> list[int]:
        """Phrase ids of a source sentence; raises on words outside the inventory."""
        toks = as_tokens(source)
        ids, i = [], 0
        while i < len(toks):
            pid = self.word_to_phrase.get(toks[i])
            if pid is None:
                raise ValueError(f"unknown source word {toks[i]!r}")
            phrase = self.phrases[pid]
            if tuple(toks[i:i + len(phrase)]) != phrase:
                raise ValueError(f"malformed phrase at position {i}: {toks[i:i + len(phrase)]}")
            ids.append(pid)
            i += len(phrase)
        return ids

    # -- generation

    def sample(self, rng: np.random.Generator) -> tuple[list[str], list[str]]:
        spec = self.spec
        n = int(rng.integers(spec.sentence_len[0], spec.sentence_len[1] + 1))
        pids = rng.integers(len(self.phrases), size=n)
        choice = rng.choice(spec.modes_per_phrase, size=n, p=spec.mode_probs)
        src, trg = [], []
        for pid, m in zip(pids, choice):
            src.extend(self.phrases[pid])
            trg.extend(self.modes[pid][m])
        if spec.noise_rate > 0:
            flips = rng.random(len(trg)) < spec.noise_rate
            picks = rng.integers(len(self.rare), size=len(trg))
            trg = [self.rare[r] if f else t for t, f, r in zip(trg, flips, picks)]
        return src, trg

    # -- exact distribution

    def chunk_logprob(self, pid: int, chunk: Sequence[str]) -> float:
        """log P(chunk | phrase) under mode choice and token noise."""
        key = (pid, tuple(chunk))
        hit = self._chunk_cache.get(key)
        if hit is None:
            hit = self._chunk_cache[key] = self._chunk_logprob(pid, key[1])
        return hit

    def _chunk_logprob(self, pid: int, chunk: tuple[str, ...]) -> float:
        rho, R = self.spec.noise_rate, len(self.rare)
        total = 0.0
        for prob, mode in zip(self.spec.mode_probs, self.modes[pid]):
            if len(mode) != len(chunk) or prob == 0:
                continue
            p = prob
            for want, got in zip(mode, chunk):
                if got == want:
                    p *= 1 - rho
                elif rho > 0 and got in self._rare_set:
                    p *= rho / R
                else:
                    p = 0.0
                    break
            total += p
        return math.log(total) if total > 0 else -math.inf

    def log_prob(self, source, target) -> float:
        """Exact log D(target | source), summing over phrase segmentations."""
        pids = self.parse_source(source)
        trg = list(as_tokens(target))
        n = len(trg)
        alpha = np.full(n + 1, -np.inf)
        alpha[0] = 0.0
        lo, hi = self.spec.mode_len
        for pid in pids:
            nxt = np.full(n + 1, -np.inf)
            for i in np.flatnonzero(np.isfinite(alpha)):
                for L in range(lo, hi + 1):
                    if i + L > n:
                        break
                    lp = self.chunk_logprob(pid, trg[i:i + L])
                    if lp > -math.inf:
                        nxt[i + L] = np.logaddexp(nxt[i + L], alpha[i] + lp)
            alpha = nxt
        return float(alpha[n])

    def segment(self, source, target) -> list[tuple[int, tuple[str, ...]]]:
        """Most plausible split of ``target`` into one chunk per source phrase.

        Splits in which every chunk is a possible generator output are
        preferred (highest likelihood wins).  Only when none exists, e.g. for
        a model translation with errors, chunks the generator could not have
        produced are admitted at a fixed penalty each, so any target segments.
        """
        pids = self.parse_source(source)
        trg = tuple(as_tokens(target))
        exact = self._segment_exact(pids, trg)
        if exact is not None:
            return exact
        return self._segment_penalized(pids, trg)

    def _segment_exact(self, pids: list[int], trg: tuple[str, ...]):
        lens = [sorted({len(m) for m in self.modes[pid]}) for pid in pids]
        memo: dict[tuple[int, int], tuple[float, int]] = {}

        def best(j: int, i: int) -> tuple[float, int]:
            if j == len(pids):
                return (0.0, -1) if i == len(trg) else (-math.inf, -1)
            key = (j, i)
            if key not in memo:
                out = (-math.inf, -1)
                for L in lens[j]:
                    if i + L > len(trg):
                        break
                    lp = self.chunk_logprob(pids[j], trg[i:i + L])
                    if lp > -math.inf:
                        rest = best(j + 1, i + L)[0]
                        if lp + rest > out[0]:
                            out = (lp + rest, L)
                memo[key] = out
            return memo[key]

        if best(0, 0)[0] == -math.inf:
            return None
        chunks, i = [], 0
        for j, pid in enumerate(pids):
            L = memo[(j, i)][1]
            chunks.append((pid, trg[i:i + L]))
            i += L
        return chunks

    def _segment_penalized(self, pids: list[int], trg: tuple[str, ...]):
        n, k = len(trg), len(pids)
        penalty = -100.0
        best = np.full((k + 1, n + 1), -np.inf)
        back = np.zeros((k + 1, n + 1), dtype=np.int64)
        best[0, 0] = 0.0
        for j, pid in enumerate(pids):
            for i in np.flatnonzero(np.isfinite(best[j])):
                for L in range(0, min(_MAX_CHUNK, n - i) + 1):
                    lp = self.chunk_logprob(pid, trg[i:i + L]) if L else -math.inf
                    if lp == -math.inf:
                        lp = penalty - abs(L - len(self.modes[pid][0]))
                    if best[j, i] + lp > best[j + 1, i + L]:
                        best[j + 1, i + L] = best[j, i] + lp
                        back[j + 1, i + L] = i
        if not np.isfinite(best[k, n]):
            # target too long for max-size chunks: dump the tail into the last chunk
            end = int(np.flatnonzero(np.isfinite(best[k]))[-1])
            cuts = self._cuts(back, k, end)
            cuts[-1] = n
        else:
            cuts = self._cuts(back, k, n)
        starts = [0] + cuts[:-1]
        return [(pid, trg[a:b]) for pid, a, b in zip(pids, starts, cuts)]

    @staticmethod
    def _cuts(back: np.ndarray, k: int, end: int) -> list[int]:
        cuts = [end]
        for j in range(k, 1, -1):
            cuts.append(int(back[j, cuts[-1]]))
        return cuts[::-1]

    def oracle_mode(self, source) -> list[str]:
        out: list[str] = []
        for pid in self.parse_source(source):
            out.extend(self.modes[pid][0])
        return out


def task_from(spec_or_task) -> SyntheticTask:
    return spec_or_task if isinstance(spec_or_task, SyntheticTask) else spec_or_task.task


def generate_bitext(spec: SyntheticTaskSpec, n: int | dict[str, int], split_seeds: Sequence[int] = (0, 1, 2)) -> dict[str, Bitext]:
    """Sample train/valid/test corpora.

    ``n`` is either the training size (valid and test get ``max(1, n // 20)``)
    or an explicit ``{"train": ..., "valid": ..., "test": ...}`` mapping.
    Every sentence has its own RNG stream keyed by (task seed, split seed,
    index), so the splits are independent and generation is order-free.
    """
    if isinstance(n, int):
        if n < 1:
            raise ValueError("n must be >= 1")
        sizes = {"train": n, "valid": max(1, n // 20), "test": max(1, n // 20)}
    else:
        sizes = {k: int(n.get(k, 0)) for k in SPLITS}
    if len(split_seeds) != len(SPLITS) or len(set(split_seeds)) != len(SPLITS):
        raise ValueError("need three distinct split seeds")
    task = spec.task
    out = {}
    for split, sseed in zip(SPLITS, split_seeds):
        pairs = (task.sample(make_rng(spec.seed, 0xDA7A, sseed, i)) for i in range(sizes[split]))
        out[split] = Bitext(tuple((tuple(s), tuple(t)) for s, t in pairs), name=split)
    return out


def oracle_mode_translation(spec_or_task, source) -> list[str]:
    """Concatenation of each phrase's most probable realization."""
    return task_from(spec_or_task).oracle_mode(source)


def conditional_entropy(bitext: Bitext, spec_or_task) -> float:
    """Empirical H(target chunk | source phrase) in bits, weighted by phrase frequency."""
    task = task_from(spec_or_task)
    counts: dict[int, Counter] = defaultdict(Counter)
    for s, t in bitext.pairs:
        for pid, chunk in task.segment(s, t):
            counts[pid][chunk] += 1
    total = sum(sum(c.values()) for c in counts.values())
    if total == 0:
        return 0.0
    h = 0.0
    for c in counts.values():
        n = sum(c.values())
        for k in c.values():
            h -= k * math.log2(k / n)
    return h / total


def enumerate_targets(task: SyntheticTask, source, vocab: Sequence[str], max_len: int) -> dict[tuple[str, ...], float]:
    """log D(t|s) for every sequence over ``vocab`` up to ``max_len`` (brute force, tests only)."""
    out = {}
    for L in range(max_len + 1):
        for t in product(vocab, repeat=L):
            lp = task.log_prob(source, t)
            if lp > -math.inf:
                out[t] = lp
    return out


def write_task(task: SyntheticTask, corpora: dict[str, Bitext], out_dir: str | Path) -> None:
    """spec.json, oracle.json and ``<split>.src/.trg`` under ``out_dir``."""
    from .textproc import write_bitext

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    task.spec.save(out / "spec.json")
    (out / "oracle.json").write_text(json.dumps(task.to_oracle()) + "\n")
    for split, bt in corpora.items():
        write_bitext(bt, out / split)


def load_oracle(path: str | Path) -> SyntheticTask:
    return SyntheticTask.from_oracle(json.loads(Path(path).read_text()))
