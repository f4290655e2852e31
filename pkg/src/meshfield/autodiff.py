"""Reverse-mode automatic differentiation over dense numpy arrays.

Deliberately small: exactly the operations the lattice-field pipeline
needs (skip-connection MLPs, alpha compositing, coordinate warps,
regularizers) plus an Adam optimizer. Training math runs in float64 so
gradient checks against central finite differences are meaningful;
inference paths elsewhere use plain float32 numpy and never touch this
module.

A ``Tape`` records tensors in creation order, which is already a
topological order (operands exist before results), so ``backward`` just
walks the list in reverse. Gradient accumulation order is therefore a
pure function of graph construction order, which keeps training
bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


class TrainingError(RuntimeError):
    """Raised when optimization produces non-finite values."""


class Tape:
    """Ordered record of tensors created during a forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False


_ACTIVE_TAPE: Tape | None = None


class Tensor:
    """Dense float64 array plus an optional gradient.

    Tensors created while a tape is active record a backward closure;
    leaf tensors (parameters, constants) are created off-tape and
    receive gradients through accumulation.
    """

    __slots__ = ("values", "grad", "_backward", "name")

    def __init__(self, values, name: str = ""):
        self.values = np.asarray(values, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, name={self.name!r})"

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _slice(self, key)

    def reshape(self, *shape):
        return reshape(self, shape)

    def sum(self, axis=None):
        return tensor_sum(self, axis)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DTYPE))


def _record(out: Tensor, backward) -> Tensor:
    if _ACTIVE_TAPE is not None:
        out._backward = backward
        _ACTIVE_TAPE.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.values + b.values)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _record(out, backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.values - b.values)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return _record(out, backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.values * b.values)
    av, bv = a.values, b.values

    def backward(g):
        a._accumulate(_unbroadcast(g * bv, a.shape))
        b._accumulate(_unbroadcast(g * av, b.shape))

    return _record(out, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.values.shape[1] != b.values.shape[0]:
        raise ValueError(
            f"matmul dimension mismatch: {a.values.shape} @ {b.values.shape}"
        )
    out = Tensor(a.values @ b.values)
    av, bv = a.values, b.values

    def backward(g):
        a._accumulate(g @ bv.T)
        b._accumulate(av.T @ g)

    return _record(out, backward)


# -- nonlinearities -------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.values, 0.0))
    mask = a.values > 0.0

    def backward(g):
        a._accumulate(g * mask)

    return _record(out, backward)


def sigmoid(a: Tensor) -> Tensor:
    v = 1.0 / (1.0 + np.exp(-a.values))
    out = Tensor(v)

    def backward(g):
        a._accumulate(g * v * (1.0 - v))

    return _record(out, backward)


def exp(a: Tensor) -> Tensor:
    v = np.exp(a.values)
    out = Tensor(v)

    def backward(g):
        a._accumulate(g * v)

    return _record(out, backward)


def sin(a: Tensor) -> Tensor:
    out = Tensor(np.sin(a.values))
    av = a.values

    def backward(g):
        a._accumulate(g * np.cos(av))

    return _record(out, backward)


def cos(a: Tensor) -> Tensor:
    out = Tensor(np.cos(a.values))
    av = a.values

    def backward(g):
        a._accumulate(-g * np.sin(av))

    return _record(out, backward)


def absolute(a: Tensor) -> Tensor:
    # subgradient 0 at the kink
    out = Tensor(np.abs(a.values))
    s = np.sign(a.values)

    def backward(g):
        a._accumulate(g * s)

    return _record(out, backward)


# -- shape manipulation ----------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.values.reshape(shape))
    orig = a.values.shape

    def backward(g):
        a._accumulate(g.reshape(orig))

    return _record(out, backward)


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    out = Tensor(np.concatenate([t.values for t in tensors], axis=axis))
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accumulate(g[tuple(idx)])

    return _record(out, backward)


def _slice(a: Tensor, key) -> Tensor:
    out = Tensor(a.values[key])

    def backward(g):
        full = np.zeros_like(a.values)
        full[key] = g
        a._accumulate(full)

    return _record(out, backward)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor; duplicate indices allowed."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.values[idx])

    def backward(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.values)
        np.add.at(a.grad, idx, g)

    return _record(out, backward)


def index_add(n_rows: int, idx: np.ndarray, x: Tensor) -> Tensor:
    """Scatter-add rows of ``x`` into a fresh (n_rows, C) tensor."""
    idx = np.asarray(idx, dtype=np.int64)
    v = np.zeros((n_rows, x.values.shape[1]), dtype=DTYPE)
    np.add.at(v, idx, x.values)
    out = Tensor(v)

    def backward(g):
        x._accumulate(g[idx])

    return _record(out, backward)


# -- reductions -------------------------------------------------------------


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    out = Tensor(np.sum(a.values, axis=axis))
    shape = a.values.shape

    def backward(g):
        if axis is None:
            a._accumulate(np.full(shape, g, dtype=DTYPE))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), shape).copy())

    return _record(out, backward)


def cumsum(a: Tensor, axis: int = 1, exclusive: bool = False) -> Tensor:
    v = np.cumsum(a.values, axis=axis)
    if exclusive:
        v = np.roll(v, 1, axis=axis)
        idx = [slice(None)] * v.ndim
        idx[axis] = 0
        v[tuple(idx)] = 0.0
    out = Tensor(v)

    def backward(g):
        gr = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        if exclusive:
            gr = np.roll(gr, -1, axis=axis)
            idx = [slice(None)] * gr.ndim
            idx[axis] = -1
            gr[tuple(idx)] = 0.0
        a._accumulate(gr)

    return _record(out, backward)


def exclusive_cumprod(a: Tensor) -> Tensor:
    """Running products along axis 1 of an (R, K) tensor.

    Output column k holds prod(x[:, :k]), so the result is (R, K+1) with
    a leading column of ones and a trailing column of the full product.
    The backward pass is exact in the presence of zeros (needed when the
    inputs are binarized opacities).
    """
    x = a.values
    r, k = x.shape
    nz = np.where(x == 0.0, 1.0, x)
    cp = np.ones((r, k + 1), dtype=DTYPE)
    np.cumprod(nz, axis=1, out=cp[:, 1:])
    zeros_before = np.zeros((r, k + 1), dtype=np.int64)
    np.cumsum(x == 0.0, axis=1, out=zeros_before[:, 1:])
    out_v = np.where(zeros_before == 0, cp, 0.0)
    out = Tensor(out_v)

    def backward(g):
        # d prod(x[:l<k]) / d x[l] = prod over m<k, m!=l; nonzero only when
        # x[l] carries the sole zero among m<k, or there is none at all.
        zl = (x == 0.0).astype(np.int64)  # (r, k)
        contrib = g * cp  # (r, k+1), product with the zero at l replaced by 1
        # grad_x[l] = (1/nz[l]) * sum_{j>l} contrib[j] * [zeros_before[j] == zl[l]]
        tail0 = np.flip(np.cumsum(np.flip(contrib * (zeros_before == 0), 1), 1), 1)
        tail1 = np.flip(np.cumsum(np.flip(contrib * (zeros_before == 1), 1), 1), 1)
        sel0 = tail0[:, 1:]  # sums over j >= l+1, i.e. j > l
        sel1 = tail1[:, 1:]
        grad = np.where(zl == 0, sel0, sel1) / nz
        a._accumulate(grad)

    return _record(out, backward)


# -- gradient-control ops ----------------------------------------------------


def stop_gradient(a: Tensor) -> Tensor:
    """Forward identity, zero gradient backward."""
    out = Tensor(a.values.copy())
    return _record(out, lambda g: None)


def hard_threshold_ste(a: Tensor, threshold: float = 0.5) -> Tensor:
    """Forward 1[x > threshold]; backward passes gradients through unchanged."""
    out = Tensor((a.values > threshold).astype(DTYPE))

    def backward(g):
        a._accumulate(g)

    return _record(out, backward)


def backward(tape: Tape, loss: Tensor):
    """Accumulate gradients of ``loss`` into every reachable tensor.

    ``loss`` must be a scalar recorded on ``tape``. Walking the tape in
    reverse creation order replays every primitive exactly once.
    """
    if loss.values.size != 1:
        raise ValueError("loss must be scalar")
    if not any(n is loss for n in tape.nodes):
        raise ValueError("loss was not recorded on this tape")
    loss.grad = np.ones_like(loss.values)
    for node in reversed(tape.nodes):
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)


# -- building blocks ----------------------------------------------------------


def positional_encoding(p: Tensor, degree: int) -> Tensor:
    """Frequency-encode positions: [p, sin(2^i pi p), cos(2^i pi p)].

    Input (N, 3) maps to (N, 3 + 6 * degree); the raw coordinates are
    kept as the leading block.
    """
    if degree < 0:
        raise ValueError("degree must be >= 0")
    parts = [p]
    for i in range(degree):
        scaled = mul(p, (2.0**i) * math.pi)
        parts.append(sin(scaled))
        parts.append(cos(scaled))
    if len(parts) == 1:
        return p
    return concat(parts, axis=1)


def mlp_forward(layers, x: Tensor) -> Tensor:
    """Apply a stack of (weights, bias, activation) layers to row vectors.

    ``weights`` is (in, out), activation one of 'relu', 'sigmoid', 'none'.
    """
    h = x
    for w, b, act in layers:
        if h.values.shape[1] != w.values.shape[0]:
            raise ValueError(
                f"layer expects {w.values.shape[0]} inputs, got {h.values.shape[1]}"
            )
        h = add(matmul(h, w), b)
        if act == "relu":
            h = relu(h)
        elif act == "sigmoid":
            h = sigmoid(h)
        elif act != "none":
            raise ValueError(f"unknown activation {act!r}")
    return h


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter moment estimates plus shared hyperparameters."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: list[Tensor], state: AdamState, lr: float | None = None):
    """One bias-corrected Adam update over named parameter tensors."""
    state.step += 1
    t = state.step
    lr_t = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.values)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {p.name!r}")
        key = p.name or id(p)
        if key not in state.m:
            state.m[key] = np.zeros_like(p.values)
            state.v[key] = np.zeros_like(p.values)
        m, v = state.m[key], state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.values -= lr_t * m_hat / (np.sqrt(v_hat) + state.eps)


def zero_grads(params: list[Tensor]):
    for p in params:
        p.grad = None


def kaiming_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform fan-in scaled init for a (fan_in, fan_out) weight matrix."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(DTYPE)
