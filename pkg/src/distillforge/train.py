"""Losses, optimizer, learning-rate schedule and the update-budgeted training loop."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .decode import BANNED, Translator, translate_corpus
from .eval import corpus_bleu
from .model import (
    Batch,
    DropoutPlan,
    Seq2SeqConfig,
    Seq2SeqParams,
    decode_step,
    encode,
    forward,
    init_params,
    initial_state,
    make_batch,
)
from .tensor import Tensor
from .textproc import BOS, EOS, Bitext, Codec

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("checkpoint", "updates", "train_loss", "valid_ppl", "valid_bleu", "lr", "wall_seconds")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    initial_learning_rate: float = 0.0003
    batch_size: int = 4096  # target subwords per batch
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    gradient_clipping_threshold: float = 1.0
    gradient_clipping_type: str = "abs"
    label_smoothing: float = 0.1
    checkpoint_frequency: int = 4000
    max_checkpoints: int = 30
    learning_rate_reduce_factor: float = 0.7
    learning_rate_reduce_num_not_improved: int = 8
    learning_rate_decay_param_reset: bool = True
    learning_rate_decay_optimizer_states_reset: str = "best"
    keep_last_params: int = 3
    word_kd_alpha: float = 0.0
    valid_beam_size: int = 5
    seed: int = 0

    def __post_init__(self):
        for name in ("initial_learning_rate", "learning_rate_reduce_factor"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        if not 0 <= self.label_smoothing < 1 or not 0 <= self.word_kd_alpha <= 1:
            raise ValueError("label_smoothing must lie in [0, 1) and word_kd_alpha in [0, 1]")
        if self.learning_rate_reduce_num_not_improved < 1 or self.checkpoint_frequency < 1 or self.max_checkpoints < 1:
            raise ValueError("patience, checkpoint frequency and budget must be >= 1")
        if self.optimizer != "adam" or self.gradient_clipping_type != "abs":
            raise ValueError("only adam with absolute gradient clipping is implemented")

    @property
    def total_updates(self) -> int:
        return self.max_checkpoints * self.checkpoint_frequency

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------- losses


def _target_distribution(targets: np.ndarray, vocab_size: int, smoothing: float, mask: np.ndarray | None, dtype) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    off = smoothing / (vocab_size - 1) if smoothing > 0 else 0.0
    dist = np.full(targets.shape + (vocab_size,), off, dtype=dtype)
    np.put_along_axis(dist, targets[..., None], 1.0 - smoothing, axis=-1)
    if mask is not None:
        dist *= np.asarray(mask, dtype=dtype)[..., None]
    return dist


def nll_loss(log_probs, targets: np.ndarray, smoothing: float = 0.0, mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Cross-entropy against (optionally label-smoothed) one-hot targets.

    Returns the summed loss and the mean per unmasked target position.  With
    smoothing the gold label keeps ``1 - smoothing`` and the rest is spread
    evenly over the other ``|V| - 1`` entries.
    """
    lp = log_probs if isinstance(log_probs, Tensor) else Tensor(log_probs)
    dist = _target_distribution(targets, lp.shape[-1], smoothing, mask, lp.data.dtype)
    total = T.scale(T.reduce_sum(T.mul(lp, dist)), -1.0)
    count = float(np.sum(mask)) if mask is not None else float(np.asarray(targets).size)
    return total, T.scale(total, 1.0 / max(count, 1.0))


def word_kd_loss(student_log_probs, teacher_probs: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Per-position cross-entropy between teacher distributions and the student."""
    lp = student_log_probs if isinstance(student_log_probs, Tensor) else Tensor(student_log_probs)
    q = np.asarray(teacher_probs, dtype=np.float64)
    sums = q.sum(axis=-1)
    check = sums if mask is None else sums[np.asarray(mask) > 0]
    if check.size and np.abs(check - 1).max() > 1e-6:
        raise ValueError(f"teacher distributions must sum to 1 (max deviation {np.abs(check - 1).max():.2e})")
    if mask is not None:
        q = q * np.asarray(mask, dtype=q.dtype)[..., None]
    q = q.astype(lp.data.dtype)
    return T.scale(T.reduce_sum(T.mul(lp, q)), -1.0)


def combined_loss(nll, word_kd, alpha: float):
    """``alpha * word_kd + (1 - alpha) * nll`` for floats or tensors."""
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    if isinstance(nll, Tensor) or isinstance(word_kd, Tensor):
        return T.add(T.scale(word_kd, alpha), T.scale(nll, 1 - alpha))
    return alpha * word_kd + (1 - alpha) * nll


@dataclass
class SeqKDResult:
    loss: float
    mode: tuple[int, ...]
    mode_logprob: float
    mass: float
    num_sequences: int


def enumerate_sequences(params: Seq2SeqParams, source: Sequence[int], max_len: int) -> dict[tuple[int, ...], float]:
    """Log-probability of every EOS-terminated sequence of length <= ``max_len``.

    Banned specials (PAD, UNK, BOS) are never emitted, matching the decoder.
    """
    enc1 = encode(params, np.asarray([list(source)], dtype=np.int64))
    V = params.trg_vocab_size
    allowed = [v for v in range(V) if v not in BANNED and v != EOS]
    out: dict[tuple[int, ...], float] = {}
    prefixes: list[tuple[int, ...]] = [()]
    prefix_lp = np.zeros(1)
    from .model import expand_encoder

    state = initial_state(params, enc1)
    for depth in range(max_len):
        n = len(prefixes)
        enc = expand_encoder(enc1, np.zeros(n, dtype=np.int64))
        prev = np.array([p[-1] if p else BOS for p in prefixes], dtype=np.int64)
        logp, new_state = decode_step(params, prev, state, enc)
        logp = logp.astype(np.float64)
        for i, p in enumerate(prefixes):
            out[p + (EOS,)] = prefix_lp[i] + logp[i, EOS]
        if depth + 1 == max_len:
            break
        rows = np.repeat(np.arange(n), len(allowed))
        toks = np.tile(allowed, n)
        prefix_lp = prefix_lp[rows] + logp[rows, toks]
        prefixes = [prefixes[r] + (t,) for r, t in zip(rows.tolist(), toks.tolist())]
        state = new_state.select(rows)
    return out


def exact_seq_kd_loss(teacher: Seq2SeqParams, student: Seq2SeqParams, source: Sequence[int], max_len: int,
                      limit: int = 10**6) -> SeqKDResult:
    """Sequence-level cross-entropy by exhaustive enumeration (tiny models only)."""
    V = teacher.trg_vocab_size
    if V != student.trg_vocab_size:
        raise ValueError("teacher and student must share the target vocabulary")
    bound = V**max_len
    if bound > limit:
        raise ValueError(f"search space too large: |V|^max_len = {bound} > {limit}")
    lq = enumerate_sequences(teacher, source, max_len)
    lp = enumerate_sequences(student, source, max_len) if student is not teacher else lq
    seqs = sorted(lq)
    q = np.exp([lq[s] for s in seqs])
    logp = np.array([lp[s] for s in seqs])
    best = max(seqs, key=lambda s: (lq[s], tuple(-x for x in s)))
    return SeqKDResult(float(-(q * logp).sum()), best, float(lq[best]), float(q.sum()), len(seqs))


# ---------------------------------------------------------------- optimisation


@dataclass
class TrainState:
    params: Seq2SeqParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    updates: int = 0
    lr: float = 0.0003
    history: list[float] = field(default_factory=list)
    best_checkpoint: int = -1
    num_not_improved: int = 0
    best_snapshot: dict | None = None
    decays: int = 0

    @classmethod
    def create(cls, params: Seq2SeqParams, lr: float) -> "TrainState":
        zeros = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}
        return cls(params, zeros, {k: z.copy() for k, z in zeros.items()}, lr=lr)

    @property
    def best_metric(self) -> float:
        return self.history[self.best_checkpoint] if self.best_checkpoint >= 0 else -math.inf

    def snapshot(self) -> dict:
        return {
            "params": {k: t.data.copy() for k, t in self.params.tensors.items()},
            "m": {k: a.copy() for k, a in self.m.items()},
            "v": {k: a.copy() for k, a in self.v.items()},
            "updates": self.updates,
        }


def clip_gradients(grads: dict[str, np.ndarray], threshold: float) -> dict[str, np.ndarray]:
    """Element-wise clamp to [-threshold, threshold]."""
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    return {k: np.clip(g, -threshold, threshold) for k, g in grads.items()}


def adam_update(state: TrainState, grads: dict[str, np.ndarray], beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8) -> TrainState:
    """One bias-corrected Adam step, in place on ``state``."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient for {name} at update {state.updates}")
    state.updates += 1
    t = state.updates
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p = state.params.tensors[name].data
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return state


def lr_schedule_step(state: TrainState, metric: float, factor: float = 0.7, patience: int = 8,
                     reset_to_best: bool = True) -> TrainState:
    """Plateau-reduce: after ``patience`` checkpoints without a strictly better
    metric, multiply the rate by ``factor`` and restore the best parameters
    and optimizer moments."""
    state.history.append(float(metric))
    if metric > state.best_metric:
        state.best_checkpoint = len(state.history) - 1
        state.num_not_improved = 0
        state.best_snapshot = state.snapshot()
        return state
    state.num_not_improved += 1
    if state.num_not_improved >= patience:
        state.lr *= factor
        state.decays += 1
        state.num_not_improved = 0
        if reset_to_best and state.best_snapshot is not None:
            snap = state.best_snapshot
            for k, t in state.params.tensors.items():
                t.data[...] = snap["params"][k]
                state.m[k][...] = snap["m"][k]
                state.v[k][...] = snap["v"][k]
    return state


# ---------------------------------------------------------------- data


def encode_bitext(bitext: Bitext, src: Codec, trg: Codec, max_seq_len: int) -> tuple[list[tuple[list[int], list[int]]], int]:
    """Subword ids per pair; pairs with a side longer than ``max_seq_len`` (or empty) are dropped."""
    out, dropped = [], 0
    for s, t in bitext.pairs:
        si, ti = src.encode(s), trg.encode(t)
        if not si or not ti or len(si) > max_seq_len or len(ti) > max_seq_len:
            dropped += 1
            continue
        out.append((si, ti))
    if dropped:
        logger.info("%s: dropped %d of %d pairs (empty or > %d subwords)", bitext.name, dropped, len(bitext), max_seq_len)
    return out, dropped


def make_batches(pairs: Sequence[tuple[list[int], list[int]]], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Word batching: shuffled, length-sorted, filled greedily up to ``batch_size`` target tokens."""
    noise = rng.random(len(pairs))
    order = sorted(range(len(pairs)), key=lambda i: (len(pairs[i][1]), len(pairs[i][0]), noise[i]))
    batches, cur, tokens = [], [], 0
    for i in order:
        n = len(pairs[i][1]) + 1
        if cur and tokens + n > batch_size:
            batches.append(cur)
            cur, tokens = [], 0
        cur.append(i)
        tokens += n
    if cur:
        batches.append(cur)
    rng.shuffle(batches)
    return batches


def perplexity(params: Seq2SeqParams, pairs: Sequence[tuple[list[int], list[int]]], batch_size: int = 4096) -> float:
    """exp(unsmoothed NLL / target subwords incl. EOS), evaluation mode."""
    if not pairs:
        raise ValueError("perplexity of an empty corpus")
    total, count = 0.0, 0
    for idx in make_batches(pairs, batch_size, np.random.default_rng(0)):
        batch = make_batch([pairs[i] for i in idx])
        lp = forward(params, batch)
        s, _ = nll_loss(lp, batch.trg_out, 0.0, batch.trg_mask)
        total += float(s.data)
        count += batch.num_target_tokens
    return math.exp(total / count)


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    translator: Translator
    metrics: list[dict]
    best_checkpoint: int
    updates: int
    dropped: int = 0

    @property
    def params(self) -> Seq2SeqParams:
        return self.translator.params


def _batch_loss(params: Seq2SeqParams, batch: Batch, cfg: TrainConfig, plan: DropoutPlan | None,
                teacher: Seq2SeqParams | None) -> Tensor:
    lp = forward(params, batch, plan)
    _, loss = nll_loss(lp, batch.trg_out, cfg.label_smoothing, batch.trg_mask)
    if teacher is not None and cfg.word_kd_alpha > 0:
        q = np.exp(forward(teacher, batch).data.astype(np.float64))
        q /= q.sum(axis=-1, keepdims=True)
        kd = T.scale(word_kd_loss(lp, q, batch.trg_mask), 1.0 / batch.num_target_tokens)
        loss = combined_loss(loss, kd, cfg.word_kd_alpha)
    return loss


def validate(translator: Translator, valid: Bitext, valid_pairs, beam_size: int) -> tuple[float, float]:
    """(perplexity, BLEU) on a validation bitext."""
    ppl = perplexity(translator.params, valid_pairs) if valid_pairs else float("nan")
    hyps = translate_corpus(translator, valid.sources, beam_size).best
    return ppl, corpus_bleu(hyps, valid.targets).bleu


def train_loop(model_config: Seq2SeqConfig, train_config: TrainConfig, train: Bitext, valid: Bitext,
               src: Codec, trg: Codec, out_dir: str | Path | None = None, teacher: Seq2SeqParams | None = None,
               log_timing: bool = True) -> TrainResult:
    """Train for exactly ``max_checkpoints * checkpoint_frequency`` updates.

    The data is cycled as needed (reshuffled every epoch from the run seed),
    so the budget never depends on corpus size.  After every checkpoint the
    model is scored on ``valid`` (BLEU with beam search, and perplexity);
    the best checkpoint by BLEU is returned.
    """
    cfg = train_config
    pairs, dropped = encode_bitext(train, src, trg, model_config.max_seq_len)
    if not pairs:
        raise ValueError("no usable training pairs")
    valid_pairs, _ = encode_bitext(valid, src, trg, model_config.max_seq_len)
    params = init_params(model_config, len(src.vocab), len(trg.vocab), cfg.seed)
    if teacher is not None and teacher.trg_vocab_size != params.trg_vocab_size:
        raise ValueError("word-level KD needs a teacher sharing the student's target vocabulary")
    state = TrainState.create(params, cfg.initial_learning_rate)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    metrics: list[dict] = []
    epoch, batches, cursor = 0, [], 0
    start = time.perf_counter()
    for ckpt in range(cfg.max_checkpoints):
        losses = []
        for _ in range(cfg.checkpoint_frequency):
            if cursor == len(batches):
                batches = make_batches(pairs, cfg.batch_size, T.make_rng(cfg.seed, 0xE90C, epoch))
                epoch, cursor = epoch + 1, 0
            batch = make_batch([pairs[i] for i in batches[cursor]])
            cursor += 1
            plan = DropoutPlan(cfg.seed, state.updates)
            try:
                with T.Tape() as tape:
                    loss = _batch_loss(state.params, batch, cfg, plan, teacher)
                grads = T.backward(tape, loss, state.params.tensors)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"update {state.updates}: {exc}") from exc
            losses.append(float(loss.data))
            adam_update(state, clip_gradients(grads, cfg.gradient_clipping_threshold), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

        translator = Translator(state.params, src, trg)
        ppl, bleu = validate(translator, valid, valid_pairs, cfg.valid_beam_size)
        lr_used = state.lr
        row = {
            "checkpoint": ckpt + 1,
            "updates": state.updates,
            "train_loss": float(np.mean(losses)),
            "valid_ppl": ppl,
            "valid_bleu": bleu,
            "lr": lr_used,
            "wall_seconds": round(time.perf_counter() - start, 3) if log_timing else 0.0,
        }
        metrics.append(row)
        improved = bleu > state.best_metric
        if improved and out is not None:
            translator.save(out / "best", {"train": asdict(cfg), "checkpoint": ckpt + 1})
        if out is not None:
            translator.save(out / f"ckpt{ckpt + 1:04d}", {"train": asdict(cfg), "checkpoint": ckpt + 1})
            stale = ckpt + 1 - cfg.keep_last_params
            if stale >= 1:
                _remove_checkpoint(out / f"ckpt{stale:04d}")
            write_metrics(metrics, out / "metrics.tsv")
        lr_schedule_step(state, bleu, cfg.learning_rate_reduce_factor, cfg.learning_rate_reduce_num_not_improved,
                         cfg.learning_rate_decay_param_reset)
        logger.info("checkpoint %d: loss %.4f valid ppl %.3f bleu %.2f lr %.2e", ckpt + 1, row["train_loss"], ppl, bleu, lr_used)

    best = state.best_snapshot["params"]
    best_params = state.params.with_arrays({k: a.copy() for k, a in best.items()})
    return TrainResult(Translator(best_params, src, trg), metrics, state.best_checkpoint + 1, state.updates, dropped)


def _remove_checkpoint(path: Path) -> None:
    if path.is_dir():
        for f in path.iterdir():
            f.unlink()
        path.rmdir()


def write_metrics(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, delimiter="\t", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in METRIC_COLUMNS})


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    return [{k: (int(v) if k in ("checkpoint", "updates") else float(v)) for k, v in r.items()} for r in rows]
