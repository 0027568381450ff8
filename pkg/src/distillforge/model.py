"""Attentional RNN encoder-decoder (bidirectional encoder, dot attention).

The encoder's first layer is bidirectional with ``hidden_size // 2`` units
per direction, so encoder states already have ``hidden_size`` columns and
dot attention against the decoder state needs no projection.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .textproc import BOS, EOS, PAD

CELL_GATES = {"lstm": 4, "gru": 3}
_MASK_NEG = -1e9


@dataclass(frozen=True)
class Seq2SeqConfig:
    bpe_merges: int = 10000
    embed_size: int = 256
    hidden_size: int = 256
    num_layers: int = 1
    cell_type: str = "lstm"
    attention: str = "dot"
    rnn_dropout_inputs: float = 0.1
    rnn_dropout_states: float = 0.1
    embed_dropout: float = 0.0
    max_seq_len: int = 100

    def __post_init__(self):
        if self.cell_type not in CELL_GATES:
            raise ValueError(f"cell_type must be one of {sorted(CELL_GATES)}, got {self.cell_type!r}")
        if self.attention != "dot":
            raise ValueError("only dot attention is supported")
        if self.hidden_size < 2 or self.hidden_size % 2:
            raise ValueError("hidden_size must be even (split across encoder directions)")
        if min(self.embed_size, self.num_layers, self.max_seq_len, self.bpe_merges + 1) < 1:
            raise ValueError("sizes must be positive")
        for name in ("rnn_dropout_inputs", "rnn_dropout_states", "embed_dropout"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "Seq2SeqConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def without_dropout(self) -> "Seq2SeqConfig":
        return replace(self, rnn_dropout_inputs=0.0, rnn_dropout_states=0.0)


LARGE = Seq2SeqConfig(bpe_merges=10000, embed_size=256, hidden_size=256, num_layers=1, cell_type="lstm")
SMALL = Seq2SeqConfig(bpe_merges=500, embed_size=256, hidden_size=256, num_layers=1, cell_type="lstm")
PRESETS = {"LARGE": LARGE, "SMALL": SMALL}


def param_shapes(config: Seq2SeqConfig, src_vocab_size: int, trg_vocab_size: int) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter tensor, in a fixed order."""
    G = CELL_GATES[config.cell_type]
    E, H, L = config.embed_size, config.hidden_size, config.num_layers
    h = H // 2
    gru = config.cell_type == "gru"
    shapes: dict[str, tuple[int, ...]] = {
        "src_embed": (src_vocab_size, E),
        "trg_embed": (trg_vocab_size, E),
    }
    for layer in range(L):
        n_in = E if layer == 0 else H
        for d in ("fwd", "bwd"):
            p = f"enc{layer}_{d}"
            shapes[f"{p}_Wx"] = (n_in, G * h)
            shapes[f"{p}_Wh"] = (h, G * h)
            shapes[f"{p}_b"] = (G * h,)
            if gru:
                shapes[f"{p}_bh"] = (G * h,)
    for layer in range(L):
        n_in = E if layer == 0 else H
        p = f"dec{layer}"
        shapes[f"{p}_Wx"] = (n_in, G * H)
        shapes[f"{p}_Wh"] = (H, G * H)
        shapes[f"{p}_b"] = (G * H,)
        if gru:
            shapes[f"{p}_bh"] = (G * H,)
        shapes[f"init{layer}_W"] = (h, H)
        shapes[f"init{layer}_b"] = (H,)
    shapes["comb_W"] = (2 * H, H)
    shapes["comb_b"] = (H,)
    shapes["out_W"] = (H, trg_vocab_size)
    shapes["out_b"] = (trg_vocab_size,)
    return shapes


def count_params(config: Seq2SeqConfig, src_vocab_size: int, trg_vocab_size: int) -> int:
    """Closed-form parameter count."""
    G = CELL_GATES[config.cell_type]
    E, H, L = config.embed_size, config.hidden_size, config.num_layers
    h = H // 2
    nb = 2 if config.cell_type == "gru" else 1
    total = (src_vocab_size + trg_vocab_size) * E
    for layer in range(L):
        n_in = E if layer == 0 else H
        total += 2 * (n_in * G * h + h * G * h + nb * G * h)
        total += n_in * G * H + H * G * H + nb * G * H
        total += h * H + H
    total += 2 * H * H + H
    total += H * trg_vocab_size + trg_vocab_size
    return total


@dataclass
class Seq2SeqParams:
    """Named parameter tensors of one encoder-decoder (teacher or student)."""

    config: Seq2SeqConfig
    src_vocab_size: int
    trg_vocab_size: int
    tensors: dict[str, Tensor] = field(repr=False)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def copy(self) -> "Seq2SeqParams":
        return self.with_arrays({k: v.data.copy() for k, v in self.tensors.items()})

    def with_arrays(self, arrays: dict[str, np.ndarray], dtype=None) -> "Seq2SeqParams":
        tensors = {k: Tensor(arrays[k], name=k, requires_grad=True, dtype=dtype or arrays[k].dtype) for k in self.tensors}
        return Seq2SeqParams(self.config, self.src_vocab_size, self.trg_vocab_size, tensors)

    def astype(self, dtype) -> "Seq2SeqParams":
        return self.with_arrays(self.arrays(), dtype=np.dtype(dtype))

    def save(self, directory: str | Path, extra: dict | None = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {
            "model": asdict(self.config),
            "src_vocab_size": self.src_vocab_size,
            "trg_vocab_size": self.trg_vocab_size,
        }
        meta.update(extra or {})
        (directory / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        T.save_tensors(directory / "params.bin", self.arrays())

    @classmethod
    def load(cls, directory: str | Path, params_file: str = "params.bin") -> "Seq2SeqParams":
        directory = Path(directory)
        meta = json.loads((directory / "config.json").read_text())
        config = Seq2SeqConfig.from_dict(meta["model"])
        arrays = T.load_tensors(directory / params_file)
        shapes = param_shapes(config, meta["src_vocab_size"], meta["trg_vocab_size"])
        for name, shape in shapes.items():
            if arrays[name].shape != shape:
                raise ValueError(f"{name}: stored shape {arrays[name].shape} != expected {shape}")
        tensors = {k: Tensor(arrays[k], name=k, requires_grad=True, dtype=np.float32) for k in shapes}
        return cls(config, meta["src_vocab_size"], meta["trg_vocab_size"], tensors)


def init_params(config: Seq2SeqConfig, src_vocab_size: int, trg_vocab_size: int, seed: int = 0) -> Seq2SeqParams:
    """Xavier-uniform matrices, zero biases, +1 LSTM forget-gate bias."""
    if min(src_vocab_size, trg_vocab_size) < 5:
        raise ValueError("vocabularies need the 4 specials plus at least one token")
    rng = T.make_rng(seed, 0x1A17)
    tensors = {}
    for name, shape in param_shapes(config, src_vocab_size, trg_vocab_size).items():
        if len(shape) == 2:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-bound, bound, size=shape)
        else:
            arr = np.zeros(shape)
            if config.cell_type == "lstm" and name.endswith("_b") and (name.startswith("enc") or name.startswith("dec")):
                n = shape[0] // 4
                arr[n : 2 * n] = 1.0
        tensors[name] = Tensor(arr, name=name, requires_grad=True, dtype=np.float32)
    return Seq2SeqParams(config, src_vocab_size, trg_vocab_size, tensors)


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    src: np.ndarray  # (B, S) int
    src_mask: np.ndarray  # (B, S) float, 1 = real token
    trg_in: np.ndarray  # (B, T) BOS-shifted decoder inputs
    trg_out: np.ndarray  # (B, T) gold outputs ending in EOS
    trg_mask: np.ndarray  # (B, T)

    @property
    def num_target_tokens(self) -> int:
        return int(self.trg_mask.sum())


def pad_ids(seqs: Sequence[Sequence[int]], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    if any(len(s) == 0 for s in seqs):
        raise ValueError("empty sequence in batch")
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=dtype)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1
    return ids, mask


def make_batch(pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> Batch:
    src, src_mask = pad_ids([p[0] for p in pairs])
    trg_out, trg_mask = pad_ids([list(p[1]) + [EOS] for p in pairs])
    trg_in, _ = pad_ids([[BOS] + list(p[1]) for p in pairs])
    return Batch(src, src_mask, trg_in, trg_out, trg_mask)


# ---------------------------------------------------------------- dropout plumbing


@dataclass(frozen=True)
class DropoutPlan:
    """Masks are a pure function of (seed, step, layer id)."""

    seed: int
    step: int

    def rng(self, layer_id: int) -> np.random.Generator:
        return T.make_rng(self.seed, self.step, layer_id)


def _mask(rng: np.random.Generator, shape, p: float, dtype) -> np.ndarray:
    keep = rng.random(shape, dtype=np.float32) >= p
    return keep.astype(dtype) * dtype.type(1 / (1 - p))


# ---------------------------------------------------------------- recurrence


def _rnn(params: Seq2SeqParams, prefix: str, xproj: Tensor, h0: Tensor, mask: np.ndarray | None,
         reverse: bool, state_masks: np.ndarray | None) -> Tensor:
    """One recurrent layer over pre-projected inputs -> hidden states (B, L, H)."""
    Wh = params[f"{prefix}_Wh"]
    if params.config.cell_type == "lstm":
        return T.lstm_layer(xproj, h0, Wh, mask, state_masks, reverse)
    return T.gru_layer(xproj, h0, Wh, params[f"{prefix}_bh"], mask, state_masks, reverse)


def _project_inputs(params: Seq2SeqParams, prefix: str, x: Tensor, rng, p_in: float, p_state: float, units: int):
    """Dropout on inputs and one matmul over all positions."""
    B, L, D = x.shape
    dtype = x.data.dtype
    if rng is not None and p_in > 0:
        x = T.mul(x, _mask(rng, (B, L, D), p_in, dtype))
    state_masks = _mask(rng, (L, B, units), p_state, dtype) if rng is not None and p_state > 0 else None
    proj = T.add(T.matmul(x, params[f"{prefix}_Wx"]), params[f"{prefix}_b"])
    return proj, state_masks


@dataclass
class EncoderOutput:
    states: Tensor  # (B, S, H)
    mask: np.ndarray  # (B, S)
    init: list[Tensor]  # per decoder layer initial hidden state (B, H)


def encode(params: Seq2SeqParams, src: np.ndarray, src_mask: np.ndarray | None = None,
           dropout: DropoutPlan | None = None) -> EncoderOutput:
    """Bidirectional encoding: position t holds [forward h_t ; backward h_t]."""
    src = np.atleast_2d(np.asarray(src, dtype=np.int64))
    if src.shape[1] == 0:
        raise ValueError("encode: empty source")
    cfg = params.config
    dtype = params["src_embed"].data.dtype
    mask = np.ones(src.shape, dtype=dtype) if src_mask is None else np.asarray(src_mask, dtype=dtype)
    B = src.shape[0]
    h = cfg.hidden_size // 2
    x = T.embedding(params["src_embed"], src)
    if dropout is not None and cfg.embed_dropout > 0:
        x = T.mul(x, _mask(dropout.rng(999), x.shape, cfg.embed_dropout, dtype))
    zero = Tensor(np.zeros((B, h), dtype=dtype))
    bwd_first = None
    for layer in range(cfg.num_layers):
        halves = []
        for d, direction in enumerate(("fwd", "bwd")):
            prefix = f"enc{layer}_{direction}"
            rng = dropout.rng(2 * layer + d) if dropout is not None else None
            xproj, smasks = _project_inputs(params, prefix, x, rng, cfg.rnn_dropout_inputs, cfg.rnn_dropout_states, h)
            states = _rnn(params, prefix, xproj, zero, mask, direction == "bwd", smasks)
            if direction == "bwd":
                bwd_first = T.slice_(states, (slice(None), 0))
            halves.append(states)
        x = T.concat(halves, axis=-1)
    init = [T.tanh(T.add(T.matmul(bwd_first, params[f"init{l}_W"]), params[f"init{l}_b"])) for l in range(cfg.num_layers)]
    return EncoderOutput(x, mask, init)


def _attend_and_project(params: Seq2SeqParams, dec: Tensor, enc: EncoderOutput) -> Tensor:
    """Dot attention for decoder states (B, T, H) -> log-probabilities (B, T, V)."""
    B, Tn, H = dec.shape
    scores = T.matmul(dec, enc.states, transpose_b=True)  # (B, T, S)
    neg = np.where(enc.mask > 0, 0.0, _MASK_NEG).astype(scores.data.dtype)
    scores = T.add(scores, np.ascontiguousarray(np.broadcast_to(neg[:, None, :], scores.shape)))
    alpha = T.softmax(scores, axis=-1)
    ctx = T.matmul(alpha, enc.states)  # (B, T, H)
    comb = T.tanh(T.add(T.matmul(T.concat([dec, ctx], axis=-1), params["comb_W"]), params["comb_b"]))
    logits = T.add(T.matmul(comb, params["out_W"]), params["out_b"])
    return T.log_softmax(logits, axis=-1)


def attention_weights(params: Seq2SeqParams, dec_h: np.ndarray, enc: EncoderOutput) -> np.ndarray:
    """Attention distribution over source positions for decoder states (B, H)."""
    scores = np.einsum("bsh,bh->bs", enc.states.data, dec_h)
    scores = np.where(enc.mask > 0, scores, -np.inf)
    scores = scores - scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    return w / w.sum(axis=1, keepdims=True)


def forward(params: Seq2SeqParams, batch: Batch, dropout: DropoutPlan | None = None) -> Tensor:
    """Teacher-forced log-probabilities (B, T, V) for ``batch``."""
    cfg = params.config
    enc = encode(params, batch.src, batch.src_mask, dropout)
    dtype = enc.states.data.dtype
    x = T.embedding(params["trg_embed"], batch.trg_in)
    if dropout is not None and cfg.embed_dropout > 0:
        x = T.mul(x, _mask(dropout.rng(998), x.shape, cfg.embed_dropout, dtype))
    for layer in range(cfg.num_layers):
        prefix = f"dec{layer}"
        rng = dropout.rng(100 + layer) if dropout is not None else None
        xproj, smasks = _project_inputs(params, prefix, x, rng, cfg.rnn_dropout_inputs, cfg.rnn_dropout_states, cfg.hidden_size)
        x = _rnn(params, prefix, xproj, enc.init[layer], None, False, smasks)
    return _attend_and_project(params, x, enc)


# ---------------------------------------------------------------- incremental decoding


@dataclass
class DecoderState:
    h: list[np.ndarray]
    c: list[np.ndarray | None]

    def select(self, rows: np.ndarray) -> "DecoderState":
        return DecoderState([h[rows] for h in self.h], [None if c is None else c[rows] for c in self.c])


def initial_state(params: Seq2SeqParams, enc: EncoderOutput) -> DecoderState:
    lstm = params.config.cell_type == "lstm"
    hs = [t.data for t in enc.init]
    return DecoderState(hs, [np.zeros_like(h) if lstm else None for h in hs])


def decode_step(params: Seq2SeqParams, prev: np.ndarray, state: DecoderState, enc: EncoderOutput) -> tuple[np.ndarray, DecoderState]:
    """One evaluation-mode decoder step for N rows.

    Returns log-probabilities (N, V) and the new recurrent state.  Rows of
    ``enc`` must line up with rows of ``prev`` and ``state``.
    """
    cfg = params.config
    x = T.embedding(params["trg_embed"], np.asarray(prev, dtype=np.int64))
    new_h, new_c = [], []
    for layer in range(cfg.num_layers):
        p = f"dec{layer}"
        h_prev = Tensor(state.h[layer])
        xproj = T.add(T.matmul(x, params[f"{p}_Wx"]), params[f"{p}_b"])
        if cfg.cell_type == "lstm":
            h, c = T.lstm_cell(T.add(xproj, T.matmul(h_prev, params[f"{p}_Wh"])), Tensor(state.c[layer]))
            new_c.append(c.data)
        else:
            h = T.gru_cell(xproj, T.add(T.matmul(h_prev, params[f"{p}_Wh"]), params[f"{p}_bh"]), h_prev)
            new_c.append(None)
        new_h.append(h.data)
        x = h
    logp = _attend_and_project(params, T.reshape(x, (x.shape[0], 1, x.shape[1])), enc)
    return logp.data[:, 0, :], DecoderState(new_h, new_c)


def expand_encoder(enc: EncoderOutput, rows: np.ndarray) -> EncoderOutput:
    return EncoderOutput(Tensor(enc.states.data[rows], dtype=enc.states.data.dtype), enc.mask[rows], [Tensor(t.data[rows], dtype=t.data.dtype) for t in enc.init])
