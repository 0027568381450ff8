"""Dense arrays with a tape-based reverse-mode autodiff.

Operations record themselves on the active :class:`Tape` (if any) together
with a closure that maps output gradients to input gradients.  Outside a
tape nothing is recorded, which is how inference runs.

Only the broadcasting needed by the models is supported: a rank-1 bias added
over the last axis of a higher-rank tensor.  Everything else must match
shapes exactly.
"""
from __future__ import annotations

import struct
import threading
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "grad_check",
    "precision",
    "get_dtype",
    "make_rng",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "concat",
    "stack",
    "unstack",
    "slice_",
    "reshape",
    "sigmoid",
    "tanh",
    "relu",
    "softmax",
    "log_softmax",
    "embedding",
    "dropout",
    "blend",
    "lstm_cell",
    "gru_cell",
    "lstm_layer",
    "gru_layer",
    "reduce_sum",
    "reduce_mean",
    "save_tensors",
    "load_tensors",
]

_state = threading.local()


def get_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextmanager
def precision(dtype: str | np.dtype):
    """Temporarily switch the dtype used for new tensors (e.g. ``"float64"``)."""
    old = get_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


def make_rng(*key: int) -> np.random.Generator:
    """Counter-based generator whose stream is a pure function of ``key``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


class Tensor:
    """An n-d array plus autodiff bookkeeping.

    Leaf parameters carry a ``name`` and ``requires_grad=True``; gradients
    are returned by :func:`backward` keyed by that name.
    """

    __slots__ = ("data", "name", "requires_grad")

    def __init__(self, data, name: str | None = None, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else get_dtype())
        self.data = arr
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class _Node:
    __slots__ = ("op", "inputs", "outputs", "backward_fn")

    def __init__(self, op, inputs, outputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.outputs = outputs
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; operations executed inside the block whose
    inputs require gradients are appended in execution order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._previous = None

    def __enter__(self) -> "Tape":
        self._previous = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._previous

    def __len__(self) -> int:
        return len(self.nodes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, arr: np.ndarray) -> None:
    # NaN/Inf propagate through the sum; one reduction is cheaper than isfinite().all()
    if not np.isfinite(arr.sum()):
        raise FloatingPointError(f"{op}: non-finite value in output of shape {arr.shape}")


def _emit(op: str, inputs: Sequence[Tensor], outputs: Sequence[np.ndarray], backward_fn):
    """Wrap raw outputs as tensors and record the node if a tape is active."""
    for arr in outputs:
        _check_finite(op, arr)
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    outs = [Tensor.__new__(Tensor) for _ in outputs]
    for t, arr in zip(outs, outputs):
        t.data = arr
        t.name = None
        t.requires_grad = needs
    if needs:
        tape.nodes.append(_Node(op, list(inputs), outs, backward_fn))
    return outs


def _shape_error(op: str, *shapes) -> ValueError:
    return ValueError(f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b, transpose_b: bool = False) -> Tensor:
    """``a @ b`` for (..., n, k) x (k, m) or batched (B, n, k) x (B, k, m)."""
    a, b = _as_tensor(a), _as_tensor(b)
    A, B = a.data, b.data
    Bm = np.swapaxes(B, -1, -2) if transpose_b else B
    if A.ndim < 1 or Bm.ndim not in (2, 3) or A.shape[-1] != Bm.shape[-2]:
        raise _shape_error("matmul", A.shape, B.shape)
    if Bm.ndim == 3 and (A.ndim != 3 or A.shape[0] != Bm.shape[0]):
        raise _shape_error("matmul", A.shape, B.shape)
    out = A @ Bm

    def bw(grads):
        (g,) = grads
        if Bm.ndim == 2:
            ga = g @ Bm.T
            gbm = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = g @ np.swapaxes(Bm, -1, -2)
            gbm = np.swapaxes(A, -1, -2) @ g
        gb = np.swapaxes(gbm, -1, -2) if transpose_b else gbm
        return [ga, gb]

    return _emit("matmul", [a, b], [out], bw)[0]


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape(-1, shape[-1]).sum(axis=0)


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may be a rank-1 bias over the last axis of ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and not (b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]):
        raise _shape_error("add", a.shape, b.shape)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return _emit("add", [a, b], [out], lambda grads: [grads[0], _sum_to(grads[0], sb)])[0]


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("sub", a.shape, b.shape)
    return _emit("sub", [a, b], [a.data - b.data], lambda grads: [grads[0], -grads[0]])[0]


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("mul", a.shape, b.shape)
    A, B = a.data, b.data
    return _emit("mul", [a, b], [A * B], lambda grads: [grads[0] * B, grads[0] * A])[0]


def scale(a, factor: float) -> Tensor:
    a = _as_tensor(a)
    f = a.data.dtype.type(factor)
    return _emit("scale", [a], [a.data * f], lambda grads: [grads[0] * f])[0]


# ---------------------------------------------------------------- shape ops


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise _shape_error("concat", *[t.shape for t in ts]) from exc
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit("concat", ts, [out], lambda grads: np.split(grads[0], splits, axis=axis))[0]


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if len({t.shape for t in ts}) != 1:
        raise _shape_error("stack", *[t.shape for t in ts])
    out = np.stack([t.data for t in ts], axis=axis)
    n = len(ts)

    def bw(grads):
        g = grads[0]
        return [np.take(g, i, axis=axis) for i in range(n)]

    return _emit("stack", ts, [out], bw)[0]


def unstack(x, axis: int = 0) -> list[Tensor]:
    """Split along ``axis`` into ``x.shape[axis]`` tensors (inverse of :func:`stack`)."""
    x = _as_tensor(x)
    n = x.shape[axis]
    parts = [np.ascontiguousarray(np.take(x.data, i, axis=axis)) for i in range(n)]
    zero = np.zeros(parts[0].shape, dtype=x.data.dtype) if n else None

    def bw(grads):
        return [np.stack([zero if g is None else g for g in grads], axis=axis)]

    return _emit("unstack", [x], parts, bw)


def slice_(x, key) -> Tensor:
    """Basic (non-fancy) indexing, e.g. ``slice_(x, (slice(None), 3))``."""
    x = _as_tensor(x)
    out = x.data[key]
    shape, dtype = x.shape, x.data.dtype

    def bw(grads):
        g = np.zeros(shape, dtype=dtype)
        g[key] = grads[0]
        return [g]

    return _emit("slice", [x], [np.ascontiguousarray(out)], bw)[0]


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    orig = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise _shape_error("reshape", orig, shape) from exc
    return _emit("reshape", [x], [out], lambda grads: [grads[0].reshape(orig)])[0]


# ---------------------------------------------------------------- nonlinearities


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    y = _sigmoid(x.data)
    return _emit("sigmoid", [x], [y], lambda grads: [grads[0] * y * (1 - y)])[0]


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _emit("tanh", [x], [y], lambda grads: [grads[0] * (1 - y * y)])[0]


def relu(x) -> Tensor:
    x = _as_tensor(x)
    pos = x.data > 0
    return _emit("relu", [x], [x.data * pos], lambda grads: [grads[0] * pos])[0]


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(grads):
        g = grads[0]
        return [y * (g - (g * y).sum(axis=axis, keepdims=True))]

    return _emit("softmax", [x], [y], bw)[0]


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(grads):
        g = grads[0]
        return [g - np.exp(y) * g.sum(axis=axis, keepdims=True)]

    return _emit("log_softmax", [x], [y], bw)[0]


# ---------------------------------------------------------------- lookups, noise


def embedding(table, ids) -> Tensor:
    """Gather rows of ``table`` (V, E) for integer ``ids`` of any shape."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise _shape_error("embedding", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range for table of {table.shape[0]} rows")
    out = table.data[ids]
    shape = table.shape

    def bw(grads):
        g = np.zeros(shape, dtype=grads[0].dtype)
        np.add.at(g, ids.reshape(-1), grads[0].reshape(-1, shape[1]))
        return [g]

    return _emit("embedding", [table], [out], bw)[0]


def dropout(x, p: float, rng: np.random.Generator | None = None, training: bool = True) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-p) at train time."""
    x = _as_tensor(x)
    if not 0 <= p < 1:
        raise ValueError(f"dropout: p must lie in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise ValueError("dropout: an rng is required when training with p > 0")
    mask = (rng.random(x.shape) >= p).astype(x.data.dtype) / x.data.dtype.type(1 - p)
    return _emit("dropout", [x], [x.data * mask], lambda grads: [grads[0] * mask])[0]


def blend(a, b, mask: np.ndarray) -> Tensor:
    """``mask * a + (1 - mask) * b`` with a constant mask broadcast over the last axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("blend", a.shape, b.shape)
    m = np.asarray(mask, dtype=a.data.dtype)
    if m.ndim == a.ndim - 1:
        m = m[..., None]
    out = m * a.data + (1 - m) * b.data
    return _emit("blend", [a, b], [out], lambda grads: [grads[0] * m, grads[0] * (1 - m)])[0]


# ---------------------------------------------------------------- fused recurrent cells


def lstm_cell(gates, c_prev) -> tuple[Tensor, Tensor]:
    """LSTM update from pre-activation gates laid out as [input, forget, cell, output]."""
    gates, c_prev = _as_tensor(gates), _as_tensor(c_prev)
    H = c_prev.shape[-1]
    if gates.shape[-1] != 4 * H or gates.shape[:-1] != c_prev.shape[:-1]:
        raise _shape_error("lstm_cell", gates.shape, c_prev.shape)
    G = gates.data
    act = _sigmoid(G)
    i, f, o = act[..., :H], act[..., H : 2 * H], act[..., 3 * H :]
    g = np.tanh(G[..., 2 * H : 3 * H])
    c = f * c_prev.data + i * g
    tc = np.tanh(c)
    h = o * tc
    cp = c_prev.data

    def bw(grads):
        gh, gc = grads
        if gh is None:
            gh = np.zeros_like(h)
        if gc is None:
            gc = np.zeros_like(c)
        dc = gc + gh * o * (1 - tc * tc)
        dG = np.concatenate(
            [dc * g * i * (1 - i), dc * cp * f * (1 - f), dc * i * (1 - g * g), gh * tc * o * (1 - o)],
            axis=-1,
        )
        return [dG, dc * f]

    h_t, c_t = _emit("lstm_cell", [gates, c_prev], [h, c], bw)
    return h_t, c_t


def gru_cell(x_gates, h_gates, h_prev) -> Tensor:
    """GRU update; ``x_gates`` / ``h_gates`` are the input and recurrent projections
    laid out as [reset, update, candidate]."""
    x_gates, h_gates, h_prev = _as_tensor(x_gates), _as_tensor(h_gates), _as_tensor(h_prev)
    H = h_prev.shape[-1]
    if x_gates.shape[-1] != 3 * H or h_gates.shape != x_gates.shape:
        raise _shape_error("gru_cell", x_gates.shape, h_gates.shape, h_prev.shape)
    X, Hg, hp = x_gates.data, h_gates.data, h_prev.data
    r = _sigmoid(X[..., :H] + Hg[..., :H])
    z = _sigmoid(X[..., H : 2 * H] + Hg[..., H : 2 * H])
    hn = Hg[..., 2 * H :]
    n = np.tanh(X[..., 2 * H :] + r * hn)
    h = (1 - z) * n + z * hp

    def bw(grads):
        (gh,) = grads
        dn = gh * (1 - z) * (1 - n * n)
        dz = gh * (hp - n) * z * (1 - z)
        dr = dn * hn * r * (1 - r)
        dX = np.concatenate([dr, dz, dn], axis=-1)
        dH = np.concatenate([dr, dz, dn * r], axis=-1)
        return [dX, dH, gh * z]

    return _emit("gru_cell", [x_gates, h_gates, h_prev], [h], bw)[0]


def _steps(T_len: int, reverse: bool):
    return range(T_len - 1, -1, -1) if reverse else range(T_len)


def lstm_layer(xproj, h0, Wh, mask: np.ndarray | None = None, state_masks: np.ndarray | None = None,
               reverse: bool = False) -> Tensor:
    """A whole LSTM layer over time as one tape node.

    ``xproj`` (B, T, 4H) holds the input projections (bias included), ``h0``
    (B, H) the initial hidden state.  Positions where ``mask`` (B, T) is 0
    carry the previous state through unchanged.  ``state_masks`` (T, B, H)
    multiplies the hidden state before the recurrent matmul (dropout).
    Returns hidden states (B, T, H) in time order.
    """
    xproj, h0, Wh = _as_tensor(xproj), _as_tensor(h0), _as_tensor(Wh)
    B, L, G4 = xproj.shape
    H = h0.shape[-1]
    if G4 != 4 * H or Wh.shape != (H, 4 * H) or h0.shape != (B, H):
        raise _shape_error("lstm_layer", xproj.shape, h0.shape, Wh.shape)
    X, W = xproj.data, Wh.data
    dtype = X.dtype
    h = h0.data
    c = np.zeros_like(h)
    out = np.empty((B, L, H), dtype=dtype)
    saved = [None] * L
    for t in _steps(L, reverse):
        hin = h * state_masks[t] if state_masks is not None else h
        G = X[:, t] + hin @ W
        act = _sigmoid(G)
        g = np.tanh(G[:, 2 * H : 3 * H])
        i, f, o = act[:, :H], act[:, H : 2 * H], act[:, 3 * H :]
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        m = None
        if mask is not None and not mask[:, t].all():
            m = mask[:, t, None].astype(dtype)
            h_new = m * h_new + (1 - m) * h
            c_new = m * c_new + (1 - m) * c
        saved[t] = (hin, c, act, g, tc, m)
        h, c = h_new, c_new
        out[:, t] = h

    def bw(grads):
        (gout,) = grads
        dX = np.empty_like(X)
        hins = np.empty((L, B, H), dtype=dtype)
        dh = np.zeros((B, H), dtype=dtype)
        dc = np.zeros((B, H), dtype=dtype)
        for t in _steps(L, not reverse):
            hin, c_prev, act, g, tc, m = saved[t]
            i, f, o = act[:, :H], act[:, H : 2 * H], act[:, 3 * H :]
            dh_tot = gout[:, t] + dh
            if m is not None:
                dh_new, dh_carry = m * dh_tot, (1 - m) * dh_tot
                dc_new, dc_carry = m * dc, (1 - m) * dc
            else:
                dh_new, dh_carry, dc_new, dc_carry = dh_tot, 0.0, dc, 0.0
            dcn = dc_new + dh_new * o * (1 - tc * tc)
            dG = dX[:, t]
            dG[:, :H] = dcn * g * i * (1 - i)
            dG[:, H : 2 * H] = dcn * c_prev * f * (1 - f)
            dG[:, 2 * H : 3 * H] = dcn * i * (1 - g * g)
            dG[:, 3 * H :] = dh_new * tc * o * (1 - o)
            dhin = dG @ W.T
            if state_masks is not None:
                dhin = dhin * state_masks[t]
            dh = dh_carry + dhin
            dc = dc_carry + dcn * f
            hins[t] = hin
        dW = hins.transpose(1, 0, 2).reshape(-1, H).T @ dX.reshape(-1, 4 * H)
        return [dX, dh, dW]

    return _emit("lstm_layer", [xproj, h0, Wh], [out], bw)[0]


def gru_layer(xproj, h0, Wh, bh, mask: np.ndarray | None = None, state_masks: np.ndarray | None = None,
              reverse: bool = False) -> Tensor:
    """A whole GRU layer over time as one tape node; see :func:`lstm_layer`."""
    xproj, h0, Wh, bh = _as_tensor(xproj), _as_tensor(h0), _as_tensor(Wh), _as_tensor(bh)
    B, L, G3 = xproj.shape
    H = h0.shape[-1]
    if G3 != 3 * H or Wh.shape != (H, 3 * H) or bh.shape != (3 * H,) or h0.shape != (B, H):
        raise _shape_error("gru_layer", xproj.shape, h0.shape, Wh.shape, bh.shape)
    X, W, bvec = xproj.data, Wh.data, bh.data
    dtype = X.dtype
    h = h0.data
    out = np.empty((B, L, H), dtype=dtype)
    saved = [None] * L
    for t in _steps(L, reverse):
        hin = h * state_masks[t] if state_masks is not None else h
        Hg = hin @ W + bvec
        x = X[:, t]
        rz = _sigmoid(x[:, : 2 * H] + Hg[:, : 2 * H])
        r, z = rz[:, :H], rz[:, H:]
        hn = Hg[:, 2 * H :]
        n = np.tanh(x[:, 2 * H :] + r * hn)
        h_new = (1 - z) * n + z * h
        m = None
        if mask is not None and not mask[:, t].all():
            m = mask[:, t, None].astype(dtype)
            h_new = m * h_new + (1 - m) * h
        saved[t] = (hin, h, r, z, hn, n, m)
        h = h_new
        out[:, t] = h

    def bw(grads):
        (gout,) = grads
        dX = np.empty_like(X)
        dHg_all = np.empty((L, B, 3 * H), dtype=dtype)
        hins = np.empty((L, B, H), dtype=dtype)
        dh = np.zeros((B, H), dtype=dtype)
        for t in _steps(L, not reverse):
            hin, hp, r, z, hn, n, m = saved[t]
            dh_tot = gout[:, t] + dh
            if m is not None:
                dh_new, carry = m * dh_tot, (1 - m) * dh_tot
            else:
                dh_new, carry = dh_tot, 0.0
            dn = dh_new * (1 - z) * (1 - n * n)
            dz = dh_new * (hp - n) * z * (1 - z)
            dr = dn * hn * r * (1 - r)
            dX[:, t, :H] = dr
            dX[:, t, H : 2 * H] = dz
            dX[:, t, 2 * H :] = dn
            dHg = dHg_all[t]
            dHg[:, :H] = dr
            dHg[:, H : 2 * H] = dz
            dHg[:, 2 * H :] = dn * r
            dhin = dHg @ W.T
            if state_masks is not None:
                dhin = dhin * state_masks[t]
            dh = carry + dh_new * z + dhin
            hins[t] = hin
        dW = hins.reshape(-1, H).T @ dHg_all.reshape(-1, 3 * H)
        return [dX, dh, dW, dHg_all.reshape(-1, 3 * H).sum(axis=0)]

    return _emit("gru_layer", [xproj, h0, Wh, bh], [out], bw)[0]


# ---------------------------------------------------------------- reductions


def reduce_sum(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis))
    shape = x.shape

    def bw(grads):
        g = grads[0]
        if axis is not None:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, shape).copy()]

    return _emit("reduce_sum", [x], [out], bw)[0]


def reduce_mean(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis), 1.0 / n)


# ---------------------------------------------------------------- differentiation


def backward(tape: Tape, loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor] | None = None) -> dict[str, np.ndarray]:
    """Gradients of scalar ``loss`` with respect to every named leaf tensor.

    Nodes are visited once each in reverse append order; fan-out accumulates
    additively.  Leaves passed via ``params`` that the loss never touched get
    zero gradients.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        outs = [grads.get(id(t)) for t in node.outputs]
        if all(g is None for g in outs):
            continue
        in_grads = node.backward_fn(outs)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            prev = grads.get(key)
            grads[key] = g if prev is None else prev + g
            if t.name is not None:
                leaves[key] = t
    result = {t.name: grads[k] for k, t in leaves.items()}
    if params is not None:
        items = params.values() if isinstance(params, Mapping) else params
        for p in items:
            result.setdefault(p.name, np.zeros_like(p.data))
    return result


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Max relative error between backprop and central finite differences.

    ``f`` maps a leaf tensor to a scalar tensor and must be deterministic.
    Use under ``precision("float64")`` with float64 ``x``.
    """
    leaf = Tensor(x.data.copy(), name=x.name or "x", requires_grad=True, dtype=x.data.dtype)
    with Tape() as tape:
        loss = f(leaf)
    analytic = backward(tape, loss, [leaf])[leaf.name]

    base = leaf.data.copy()
    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        for sign in (1, -1):
            pert = base.copy()
            pert.reshape(-1)[i] += sign * eps
            val = f(Tensor(pert, dtype=base.dtype)).data.sum()
            flat[i] += sign * val
        flat[i] /= 2 * eps
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max()) if base.size else 0.0


# ---------------------------------------------------------------- serialization

_MAGIC = b"DFT1"


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray | Tensor]) -> None:
    """Write tensors as float32 little-endian records behind a ``DFT1`` magic."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        for name, value in tensors.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a DFT1 tensor container")
    pos, out = 4, {}
    while pos < len(blob):
        (n,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        name = blob[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        dims = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * count
    return out
