"""Dense tensors with taped reverse-mode differentiation on numpy arrays.

Every value the tagger computes flows through the small op set in this
module, so each op carries its own backward rule and every op output is
finite-checked (NaN/Inf is a hard error).  Arrays are float64 by default;
float32 exists behind an explicit fast-mode switch and is not suitable for
finite-difference verification.

Ops record onto the innermost active ``Tape``.  With no tape active they
just compute, which is the cheap inference path.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf, or a parameter update did."""


class EmptySupportError(ValueError):
    """Masked softmax was asked to normalize over zero valid entries."""


_DEFAULT_DTYPE = np.dtype(np.float64)
_FINITE_CHECKS = True
_ACTIVE_TAPES: list["Tape"] = []


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> np.dtype:
    """Switch the value dtype; float32 is the fast mode. Returns the old dtype."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    old = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = dt
    return old


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf checking. Returns the previous setting."""
    global _FINITE_CHECKS
    old = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return old


class Tensor:
    """A dense array treated as an immutable value inside the op graph.

    Parameter tensors are mutated in place only by the optimizer, between
    tapes.  ``const`` marks tensors (masks, literals) that never need
    gradients; backward rules skip them.
    """

    __slots__ = ("data", "const")

    def __init__(self, data, const: bool = False):
        arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor holds non-finite values")
        self.data = arr
        self.const = const

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", const" if self.const else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def astensor(x) -> Tensor:
    """Wrap array-likes as constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, const=True)


def constant(data) -> Tensor:
    return Tensor(data, const=True)


def zeros(shape, const: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), const=const)


Backward = Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of executed primitives.

    Creation order is a topological order of the graph, so reversing the
    record visits nodes in exact reverse topological order during the
    backward pass.  Single-owner: one forward/backward sequence at a time.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Backward]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE_TAPES.pop()
        assert popped is self, "tapes must unwind in LIFO order"
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def gradients(self, output: Tensor, seed=None) -> "Gradients":
        """Reverse-accumulate d(output)/d(everything recorded on this tape).

        ``seed`` defaults to ones; for scalar losses this is the usual 1.0.
        Tensors never touched by ``output`` get zero gradients.
        """
        table: dict[int, list] = {}
        sd = np.ones_like(output.data) if seed is None else np.asarray(seed, dtype=output.data.dtype)
        if sd.shape != output.data.shape:
            raise ValueError(f"seed shape {sd.shape} != output shape {output.data.shape}")
        table[id(output)] = [output, sd]
        for out, inputs, backward in reversed(self._nodes):
            entry = table.get(id(out))
            if entry is None:
                continue
            grads = backward(entry[1])
            for inp, g in zip(inputs, grads):
                if g is None:
                    continue
                cur = table.get(id(inp))
                if cur is None:
                    table[id(inp)] = [inp, g]
                else:
                    cur[1] = cur[1] + g
        return Gradients(table)


class Gradients:
    """Read-only map from tensor identity to its accumulated gradient array."""

    def __init__(self, table: dict[int, list]):
        self._table = table

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        entry = self._table.get(id(tensor))
        if entry is None:
            return np.zeros_like(tensor.data)
        return entry[1]

    def get(self, tensor: Tensor) -> np.ndarray:
        return self[tensor]


def _tape() -> Tape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    with np.errstate(over="ignore", invalid="ignore"):
        out = Tensor(a.data + b.data)
    tape = _tape()
    if tape is not None:
        def backward(g):
            return (None if a.const else _unbroadcast(g, a.data.shape),
                    None if b.const else _unbroadcast(g, b.data.shape))
        tape._nodes.append((out, (a, b), backward))
    return out


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = Tensor(a.data - b.data)
    tape = _tape()
    if tape is not None:
        def backward(g):
            return (None if a.const else _unbroadcast(g, a.data.shape),
                    None if b.const else _unbroadcast(-g, b.data.shape))
        tape._nodes.append((out, (a, b), backward))
    return out


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    with np.errstate(over="ignore", invalid="ignore"):
        out = Tensor(a.data * b.data)
    tape = _tape()
    if tape is not None:
        def backward(g):
            return (None if a.const else _unbroadcast(g * b.data, a.data.shape),
                    None if b.const else _unbroadcast(g * a.data, b.data.shape))
        tape._nodes.append((out, (a, b), backward))
    return out


def div(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = Tensor(a.data / b.data)
    tape = _tape()
    if tape is not None:
        def backward(g):
            return (None if a.const else _unbroadcast(g / b.data, a.data.shape),
                    None if b.const else _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
        tape._nodes.append((out, (a, b), backward))
    return out


def neg(a) -> Tensor:
    a = astensor(a)
    out = Tensor(-a.data)
    tape = _tape()
    if tape is not None:
        def backward(g):
            return (None if a.const else -g,)
        tape._nodes.append((out, (a,), backward))
    return out


def tanh(a) -> Tensor:
    a = astensor(a)
    out = Tensor(np.tanh(a.data))
    tape = _tape()
    if tape is not None:
        od = out.data
        def backward(g):
            return (None if a.const else g * (1.0 - od * od),)
        tape._nodes.append((out, (a,), backward))
    return out


def sigmoid(a) -> Tensor:
    a = astensor(a)
    x = a.data
    # Stable piecewise form avoids exp overflow on large negatives.
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    out = Tensor(out_data)
    tape = _tape()
    if tape is not None:
        od = out.data
        def backward(g):
            return (None if a.const else g * od * (1.0 - od),)
        tape._nodes.append((out, (a,), backward))
    return out


def exp(a) -> Tensor:
    a = astensor(a)
    with np.errstate(over="raise"):
        try:
            out = Tensor(np.exp(a.data))
        except FloatingPointError as err:
            raise NonFiniteError("exp overflow") from err
    tape = _tape()
    if tape is not None:
        od = out.data
        def backward(g):
            return (None if a.const else g * od,)
        tape._nodes.append((out, (a,), backward))
    return out


def log(a, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` set, inputs are clamped below at floor
    and the gradient is zero wherever the clamp engaged."""
    a = astensor(a)
    if floor is None:
        out = Tensor(np.log(a.data))
        clamped = a.data
        active = None
    else:
        clamped = np.maximum(a.data, floor)
        out = Tensor(np.log(clamped))
        active = a.data > floor
    tape = _tape()
    if tape is not None:
        def backward(g):
            if a.const:
                return (None,)
            ga = g / clamped
            if active is not None:
                ga = ga * active
            return (ga,)
        tape._nodes.append((out, (a,), backward))
    return out


def matmul(a, b) -> Tensor:
    """Matrix product with numpy's leading-axis broadcasting; both operands
    must have ndim >= 2."""
    a, b = astensor(a), astensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need at least 2 dimensions")
    with np.errstate(over="ignore", invalid="ignore"):
        out = Tensor(a.data @ b.data)
    tape = _tape()
    if tape is not None:
        def backward(g):
            ga = gb = None
            if not a.const:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
            if not b.const:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
            return (ga, gb)
        tape._nodes.append((out, (a, b), backward))
    return out


def linear(x, w, b=None) -> Tensor:
    """x @ w.T (+ b) over the last axis of x; leading axes are batch axes.

    Fused so one tape node covers the projection, which keeps step loops
    cheap.  ``w`` has shape (dout, din).
    """
    x, w = astensor(x), astensor(w)
    if x.ndim < 2:
        raise ValueError("linear expects x with ndim >= 2; use affine for vectors")
    dout, din = w.data.shape
    if x.data.shape[-1] != din:
        raise ValueError(f"linear shape mismatch: x last dim {x.data.shape[-1]} != {din}")
    with np.errstate(over="ignore", invalid="ignore"):
        out_data = x.data @ w.data.T
        if b is not None:
            b = astensor(b)
            if b.data.shape != (dout,):
                raise ValueError(f"linear bias shape {b.data.shape} != ({dout},)")
            out_data = out_data + b.data
    out = Tensor(out_data)
    tape = _tape()
    if tape is not None:
        inputs = (x, w) if b is None else (x, w, b)
        def backward(g):
            g2 = g.reshape(-1, dout)
            gx = None if x.const else g @ w.data
            gw = None if w.const else g2.T @ x.data.reshape(-1, din)
            if b is None:
                return (gx, gw)
            gb = None if b.const else g2.sum(axis=0)
            return (gx, gw, gb)
        tape._nodes.append((out, inputs, backward))
    return out


def affine(x, w, b) -> Tensor:
    """w @ x + b for a single vector x, or batched over leading axes."""
    x = astensor(x)
    if x.ndim == 1:
        lifted = linear(reshape(x, (1, x.shape[0])), w, b)
        return reshape(lifted, (lifted.shape[-1],))
    return linear(x, w, b)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = astensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))
    tape = _tape()
    if tape is not None:
        shape = x.data.shape
        def backward(g):
            if x.const:
                return (None,)
            gk = g
            if axis is not None and not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                for ax in sorted(a % len(shape) for a in axes):
                    gk = np.expand_dims(gk, ax)
            return (np.broadcast_to(gk, shape),)
        tape._nodes.append((out, (x,), backward))
    return out


def reshape(x, shape) -> Tensor:
    x = astensor(x)
    out = Tensor(x.data.reshape(shape))
    tape = _tape()
    if tape is not None:
        orig = x.data.shape
        def backward(g):
            return (None if x.const else g.reshape(orig),)
        tape._nodes.append((out, (x,), backward))
    return out


def swap_last(x) -> Tensor:
    """Transpose the trailing two axes."""
    x = astensor(x)
    out = Tensor(np.swapaxes(x.data, -1, -2))
    tape = _tape()
    if tape is not None:
        def backward(g):
            return (None if x.const else np.swapaxes(g, -1, -2),)
        tape._nodes.append((out, (x,), backward))
    return out


def concat(a, b, axis: int = -1) -> Tensor:
    """a followed by b along ``axis``; gradients split back."""
    a, b = astensor(a), astensor(b)
    out = Tensor(np.concatenate([a.data, b.data], axis=axis))
    tape = _tape()
    if tape is not None:
        k = a.data.shape[axis]
        def backward(g):
            ga, gb = np.split(g, [k], axis=axis)
            return (None if a.const else ga, None if b.const else gb)
        tape._nodes.append((out, (a, b), backward))
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [astensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in ts], axis=axis))
    tape = _tape()
    if tape is not None:
        def backward(g):
            return tuple(None if t.const else np.take(g, i, axis=axis)
                         for i, t in enumerate(ts))
        tape._nodes.append((out, tuple(ts), backward))
    return out


def select(x, index: int, axis: int) -> Tensor:
    """Take one slice along ``axis``, dropping that axis."""
    x = astensor(x)
    out = Tensor(np.take(x.data, index, axis=axis))
    tape = _tape()
    if tape is not None:
        def backward(g):
            if x.const:
                return (None,)
            gx = np.zeros_like(x.data)
            sl = [slice(None)] * x.data.ndim
            sl[axis] = index
            gx[tuple(sl)] = g
            return (gx,)
        tape._nodes.append((out, (x,), backward))
    return out


def gather_rows(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; backward scatter-adds into the picked rows
    only, which is what lets looked-up embeddings fine-tune."""
    table = astensor(table)
    idx = np.asarray(ids)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("gather_rows ids must be integers")
    rows = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise IndexError(f"id out of range for table with {rows} rows")
    out = Tensor(table.data[idx])
    tape = _tape()
    if tape is not None:
        width = table.data.shape[1]
        def backward(g):
            if table.const:
                return (None,)
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx.reshape(-1), g.reshape(-1, width))
            return (gt,)
        tape._nodes.append((out, (table,), backward))
    return out


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability ``rate`` and scale survivors
    by 1/(1-rate) in training mode; eval mode is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = astensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a seeded generator")
    keep = rng.random(x.shape) >= rate
    return mul(x, constant(keep / (1.0 - rate)))


def masked_softmax(scores, mask: np.ndarray, axis: int = -1, allow_empty: bool = False) -> Tensor:
    """Exp-normalize ``scores`` along ``axis`` over positions where ``mask``
    is nonzero.  Masked slots get exactly zero weight (they behave as score
    -inf, not as a large negative constant), and the max of the valid scores
    is subtracted before exponentiation for stability.

    With ``allow_empty`` a slice with no valid entries yields all-zero
    weights instead of raising; callers own the degenerate semantics.
    """
    scores = astensor(scores)
    m = np.asarray(mask, dtype=scores.data.dtype)
    valid = np.broadcast_to(m, scores.data.shape) > 0
    any_valid = valid.any(axis=axis, keepdims=True)
    if not any_valid.all() and not allow_empty:
        raise EmptySupportError("softmax support is empty under the mask")
    with np.errstate(invalid="ignore"):
        shifted_max = np.where(valid, scores.data, -np.inf).max(axis=axis, keepdims=True)
    shifted_max = np.where(any_valid, shifted_max, 0.0)
    e = mul(exp(sub(scores, constant(shifted_max))), constant(m))
    z = reduce_sum(e, axis=axis, keepdims=True)
    if allow_empty:
        # Empty slices divide 0 by 1 instead of 0 by 0.
        z = add(z, constant(np.where(any_valid, 0.0, 1.0)))
    return div(e, z)


def softmax(x, axis: int = -1) -> Tensor:
    """Plain max-shifted softmax along ``axis``."""
    x = astensor(x)
    shifted_max = x.data.max(axis=axis, keepdims=True)
    e = exp(sub(x, constant(shifted_max)))
    return div(e, reduce_sum(e, axis=axis, keepdims=True))


def softmax_masked(scores, valid) -> Tensor:
    """Masked softmax over a score vector; errors if nothing is valid."""
    scores = astensor(scores)
    if scores.ndim != 1:
        raise ValueError("softmax_masked expects a score vector")
    v = np.asarray(valid, dtype=bool)
    if v.shape != scores.shape:
        raise ValueError(f"mask shape {v.shape} != scores shape {scores.shape}")
    if not v.any():
        raise EmptySupportError("softmax support is empty under the mask")
    return masked_softmax(scores, v.astype(scores.data.dtype), axis=-1, allow_empty=False)
