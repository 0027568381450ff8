"""Tokenized corpus BLEU and trial aggregation."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .textproc import as_tokens

MAX_ORDER = 4


@dataclass(frozen=True)
class BleuReport:
    bleu: float
    ngram_precisions: tuple[float, ...]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    matches: tuple[int, ...] = ()
    totals: tuple[int, ...] = ()

    def recompute(self) -> float:
        if min(self.ngram_precisions) <= 0:
            return 0.0
        return 100.0 * self.brevity_penalty * math.exp(sum(map(math.log, self.ngram_precisions)) / len(self.ngram_precisions))

    def to_tsv(self) -> str:
        p = "\t".join(f"{x:.4f}" for x in self.ngram_precisions)
        return f"{self.bleu:.2f}\t{p}\t{self.brevity_penalty:.4f}\t{self.hyp_len}\t{self.ref_len}"

    def __str__(self) -> str:
        p = "/".join(f"{100 * x:.1f}" for x in self.ngram_precisions)
        return f"BLEU = {self.bleu:.2f}, {p} (BP={self.brevity_penalty:.3f}, hyp_len={self.hyp_len}, ref_len={self.ref_len})"


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence, references: Sequence, max_order: int = MAX_ORDER) -> BleuReport:
    """Unsmoothed corpus BLEU with a single reference per segment.

    Sentences may be given as strings (split on whitespace) or token lists.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for h, r in zip(hypotheses, references):
        h, r = as_tokens(h), as_tokens(r)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_order + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    precisions = tuple(m / t if t else 0.0 for m, t in zip(matches, totals))
    if hyp_len == 0:
        bp = 0.0
    elif hyp_len < ref_len:
        bp = math.exp(1 - ref_len / hyp_len)
    else:
        bp = 1.0
    report = BleuReport(0.0, precisions, bp, hyp_len, ref_len, tuple(matches), tuple(totals))
    return BleuReport(report.recompute(), precisions, bp, hyp_len, ref_len, tuple(matches), tuple(totals))


@dataclass(frozen=True)
class TrialSummary:
    seeds: tuple[int, ...]
    values: tuple[float, ...]

    @property
    def mean(self) -> float:
        return math.fsum(self.values) / len(self.values)

    def row(self, label: str) -> list[str]:
        return [label, *(f"{v:.2f}" for v in self.values), f"{self.mean:.2f}"]


def aggregate_trials(reports: Sequence, seeds: Sequence[int] | None = None) -> TrialSummary:
    """Per-trial BLEU plus their arithmetic mean.  Accepts reports or plain floats."""
    if not reports:
        raise ValueError("need at least one trial")
    values = tuple(float(r.bleu if isinstance(r, BleuReport) else r) for r in reports)
    seeds = tuple(seeds) if seeds is not None else tuple(range(1, len(values) + 1))
    if len(seeds) != len(values):
        raise ValueError("one seed per trial")
    return TrialSummary(seeds, values)
