"""Bitexts, per-word BPE, vocabularies and corpus statistics."""
from __future__ import annotations

import heapq
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIALS = ("<pad>", "<unk>", "<s>", "</s>")
MARKER = "@@"

Sentence = tuple[str, ...]


def as_tokens(sentence: str | Sequence[str]) -> Sentence:
    """Whitespace-split strings; pass token sequences through as tuples."""
    if isinstance(sentence, str):
        return tuple(sentence.split())
    return tuple(sentence)


@dataclass(frozen=True)
class Bitext:
    """Line-aligned (source, target) sentence pairs."""

    pairs: tuple[tuple[Sentence, Sentence], ...]
    name: str = "base"

    def __post_init__(self):
        for src, trg in self.pairs:
            for tok in src + trg:
                if not tok or any(ch.isspace() for ch in tok):
                    raise ValueError(f"invalid token {tok!r} in bitext {self.name!r}")

    @classmethod
    def from_lists(cls, sources: Iterable, targets: Iterable, name: str = "base") -> "Bitext":
        sources, targets = list(sources), list(targets)
        if len(sources) != len(targets):
            raise ValueError(f"source/target length mismatch: {len(sources)} vs {len(targets)}")
        return cls(tuple((as_tokens(s), as_tokens(t)) for s, t in zip(sources, targets)), name)

    @property
    def sources(self) -> list[Sentence]:
        return [s for s, _ in self.pairs]

    @property
    def targets(self) -> list[Sentence]:
        return [t for _, t in self.pairs]

    def __len__(self) -> int:
        return len(self.pairs)

    def renamed(self, name: str) -> "Bitext":
        return Bitext(self.pairs, name)

    def swapped(self) -> "Bitext":
        return Bitext(tuple((t, s) for s, t in self.pairs), self.name + "-rev")


def read_bitext(prefix: str | Path, name: str | None = None, max_seq_len: int | None = None) -> Bitext:
    """Load ``<prefix>.src`` / ``<prefix>.trg``.

    Pairs with an empty side, or a side longer than ``max_seq_len`` tokens,
    are dropped; the drop count is logged.
    """
    prefix = Path(prefix)
    src = Path(f"{prefix}.src").read_text(encoding="utf-8").split("\n")
    trg = Path(f"{prefix}.trg").read_text(encoding="utf-8").split("\n")
    # trailing newline produces one empty tail element on each side
    if src and src[-1] == "" and trg and trg[-1] == "":
        src, trg = src[:-1], trg[:-1]
    if len(src) != len(trg):
        raise ValueError(f"{prefix}: {len(src)} source lines vs {len(trg)} target lines")
    pairs, dropped = [], 0
    for s, t in zip(src, trg):
        s, t = as_tokens(s), as_tokens(t)
        if not s or not t or (max_seq_len and (len(s) > max_seq_len or len(t) > max_seq_len)):
            dropped += 1
            continue
        pairs.append((s, t))
    if dropped:
        logger.info("%s: dropped %d of %d pairs", prefix, dropped, len(src))
    return Bitext(tuple(pairs), name or prefix.name)


def write_bitext(bitext: Bitext, prefix: str | Path) -> None:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{prefix}.src").write_text("".join(" ".join(s) + "\n" for s in bitext.sources), encoding="utf-8")
    Path(f"{prefix}.trg").write_text("".join(" ".join(t) + "\n" for t in bitext.targets), encoding="utf-8")


# ---------------------------------------------------------------- BPE


@dataclass(frozen=True)
class BpeModel:
    merges: tuple[tuple[str, str], ...]
    marker: str = MARKER

    @property
    def num_merges(self) -> int:
        return len(self.merges)

    @property
    def ranks(self) -> dict[tuple[str, str], int]:
        return _ranks(self.merges)

    def save(self, path: str | Path) -> None:
        lines = [f"#bpe v1 marker={self.marker}"] + [f"{a} {b}" for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "BpeModel":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("#bpe v1"):
            raise ValueError(f"{path}: missing '#bpe v1' header")
        marker = MARKER
        for part in lines[0].split()[2:]:
            if part.startswith("marker="):
                marker = part[len("marker=") :]
        merges = tuple(tuple(line.split(" ")) for line in lines[1:] if line)
        return cls(merges, marker)


@lru_cache(maxsize=64)
def _ranks(merges: tuple[tuple[str, str], ...]) -> dict[tuple[str, str], int]:
    return {pair: i for i, pair in enumerate(merges)}


def _word_counts(corpus: Iterable) -> Counter:
    counts: Counter = Counter()
    for sentence in corpus:
        counts.update(as_tokens(sentence))
    return counts


def learn_bpe(corpus: Iterable, num_merges: int, marker: str = MARKER) -> BpeModel:
    """Greedy per-word BPE.

    Each step merges the most frequent adjacent symbol pair; ties go to the
    lexicographically smallest ``(left, right)``.  Stops early once no word
    has two symbols left.
    """
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    counts = _word_counts(corpus)
    if not counts:
        raise ValueError("empty corpus")
    words = [list(w) for w in counts]
    freqs = [counts[w] for w in counts]

    pair_counts: dict[tuple[str, str], int] = defaultdict(int)
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for idx, (sym, f) in enumerate(zip(words, freqs)):
        for pair in zip(sym, sym[1:]):
            pair_counts[pair] += f
            where[pair].add(idx)
    heap = [(-c, p) for p, c in pair_counts.items()]
    heapq.heapify(heap)

    merges: list[tuple[str, str]] = []
    while len(merges) < num_merges and heap:
        neg, pair = heapq.heappop(heap)
        current = pair_counts.get(pair, 0)
        if current <= 0:
            continue
        if -neg != current:
            heapq.heappush(heap, (-current, pair))
            continue
        merges.append(pair)
        a, b = pair
        joined = a + b
        touched: dict[tuple[str, str], int] = {}
        for idx in list(where.pop(pair, ())):
            sym, f = words[idx], freqs[idx]
            for p in zip(sym, sym[1:]):
                pair_counts[p] -= f
                touched[p] = pair_counts[p]
            out, i = [], 0
            while i < len(sym):
                if i + 1 < len(sym) and sym[i] == a and sym[i + 1] == b:
                    out.append(joined)
                    i += 2
                else:
                    out.append(sym[i])
                    i += 1
            words[idx] = out
            for p in zip(out, out[1:]):
                pair_counts[p] += f
                touched[p] = pair_counts[p]
                where[p].add(idx)
        pair_counts.pop(pair, None)
        for p in touched:
            c = pair_counts.get(p, 0)
            if c > 0 and p != pair:
                heapq.heappush(heap, (-c, p))
            elif c <= 0:
                pair_counts.pop(p, None)
                where.pop(p, None)
    return BpeModel(tuple(merges), marker)


def _segment_word(word: str, ranks: dict[tuple[str, str], int]) -> list[str]:
    sym = list(word)
    while len(sym) > 1:
        best, best_rank = None, None
        for p in zip(sym, sym[1:]):
            r = ranks.get(p)
            if r is not None and (best_rank is None or r < best_rank):
                best, best_rank = p, r
        if best is None:
            break
        out, i = [], 0
        while i < len(sym):
            if i + 1 < len(sym) and (sym[i], sym[i + 1]) == best:
                out.append(sym[i] + sym[i + 1])
                i += 2
            else:
                out.append(sym[i])
                i += 1
        sym = out
    return sym


def apply_bpe(sentence: str | Sequence[str], model: BpeModel) -> list[str]:
    """Segment each word; every non-final piece gets the continuation marker."""
    ranks = model.ranks
    cache = _segment_cache(model)
    out: list[str] = []
    for word in as_tokens(sentence):
        pieces = cache.get(word)
        if pieces is None:
            pieces = _segment_word(word, ranks)
            pieces = [p + model.marker for p in pieces[:-1]] + [pieces[-1]]
            cache[word] = pieces
        out.extend(pieces)
    return out


_SEGMENT_CACHES: dict[int, dict[str, list[str]]] = {}


def _segment_cache(model: BpeModel) -> dict[str, list[str]]:
    key = hash((model.merges, model.marker))
    cache = _SEGMENT_CACHES.get(key)
    if cache is None:
        if len(_SEGMENT_CACHES) > 32:
            _SEGMENT_CACHES.clear()
        cache = _SEGMENT_CACHES[key] = {}
    return cache


def reverse_bpe(pieces: Sequence[str], marker: str = MARKER) -> list[str]:
    words, buf = [], ""
    for piece in pieces:
        if piece.endswith(marker):
            buf += piece[: -len(marker)]
        else:
            words.append(buf + piece)
            buf = ""
    if buf:
        words.append(buf)
    return words


# ---------------------------------------------------------------- vocabulary


@dataclass(frozen=True)
class Vocabulary:
    """Token <-> id map; ids 0..3 are the fixed specials."""

    tokens: tuple[str, ...]
    min_count: int = 1
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.tokens[: len(SPECIALS)] != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        object.__setattr__(self, "token_to_id", {t: i for i, t in enumerate(self.tokens)})
        if len(self.token_to_id) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode(self, tokens: Sequence[str]) -> list[int]:
        get = self.token_to_id.get
        return [get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip_specials: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip_specials and i < len(SPECIALS):
                if i == EOS:
                    break
                continue
            out.append(self.tokens[i])
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{t}\t{i}\n" for i, t in enumerate(self.tokens)), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, min_count: int = 1) -> "Vocabulary":
        rows = [line.split("\t") for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
        rows.sort(key=lambda r: int(r[1]))
        if [int(r[1]) for r in rows] != list(range(len(rows))):
            raise ValueError(f"{path}: ids are not contiguous")
        return cls(tuple(r[0] for r in rows), min_count)


def build_vocab(corpus: Iterable, min_count: int = 1) -> Vocabulary:
    """Specials first, then tokens with count >= ``min_count`` by descending
    frequency (ties lexicographic)."""
    counts = _word_counts(corpus)
    if not counts:
        raise ValueError("empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in SPECIALS), key=lambda t: (-counts[t], t))
    return Vocabulary(SPECIALS + tuple(kept), min_count)


# ---------------------------------------------------------------- codec and stats


@dataclass(frozen=True)
class Codec:
    """BPE model plus vocabulary for one language side."""

    bpe: BpeModel
    vocab: Vocabulary

    @classmethod
    def fit(cls, sentences: Sequence, num_merges: int, min_count: int = 1) -> "Codec":
        bpe = learn_bpe(sentences, num_merges)
        vocab = build_vocab((apply_bpe(s, bpe) for s in sentences), min_count)
        return cls(bpe, vocab)

    def segment(self, sentence) -> list[str]:
        return apply_bpe(sentence, self.bpe)

    def encode(self, sentence) -> list[int]:
        return self.vocab.encode(apply_bpe(sentence, self.bpe))

    def decode(self, ids: Iterable[int]) -> list[str]:
        return reverse_bpe(self.vocab.decode(ids), self.bpe.marker)


def filter_long_pairs(bitext: Bitext, src: Codec, trg: Codec, max_seq_len: int) -> tuple[Bitext, int]:
    """Drop pairs whose BPE-segmented side exceeds ``max_seq_len``."""
    kept = tuple(
        (s, t)
        for s, t in bitext.pairs
        if len(src.segment(s)) <= max_seq_len and len(trg.segment(t)) <= max_seq_len
    )
    dropped = len(bitext) - len(kept)
    if dropped:
        logger.info("%s: dropped %d pairs longer than %d subwords", bitext.name, dropped, max_seq_len)
    return Bitext(kept, bitext.name), dropped


def corpus_stats(bitext: Bitext) -> dict[str, int]:
    """Target-side token count and whole-word vocabulary size."""
    targets = [t for t in bitext.targets if t]
    if not targets:
        raise ValueError("empty bitext")
    counts = _word_counts(targets)
    return {"avg_tokens": sum(counts.values()), "vocab_size": len(counts)}
