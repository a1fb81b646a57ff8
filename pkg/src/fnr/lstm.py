"""LSTM cell and bidirectional layer with exact padding masking.

Padding is suffix-only (masks are prefixes of True).  Both scan directions
gate their state with the position mask, so the forward state is never
polluted by trailing pads and the backward scan effectively starts at the
last valid token.  Gating multiplies by exact 0/1 masks, which makes
extending a sequence with PAD positions a bit-for-bit no-op at the valid
positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (Tensor, add, concat, constant, dropout, linear, mul,
                       reshape, select, sigmoid, stack, tanh, zeros)
from .optim import ParamGroup

GATES = ("i", "f", "o", "g")


@dataclass
class LstmParams:
    """Input/recurrent weights and bias for each of the four gate blocks
    (input i, forget f, output o, cell candidate g)."""
    w_xi: Tensor
    w_hi: Tensor
    b_i: Tensor
    w_xf: Tensor
    w_hf: Tensor
    b_f: Tensor
    w_xo: Tensor
    w_ho: Tensor
    b_o: Tensor
    w_xg: Tensor
    w_hg: Tensor
    b_g: Tensor

    @property
    def hidden_size(self) -> int:
        return self.w_hi.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_xi.shape[1]


@dataclass
class BlstmParams:
    fwd: LstmParams
    bwd: LstmParams

    @property
    def hidden_size(self) -> int:
        return self.fwd.hidden_size


def glorot(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    fan_out, fan_in = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_lstm(group: ParamGroup, prefix: str, input_size: int, hidden: int,
              rng: np.random.Generator) -> LstmParams:
    """Glorot-uniform weights, forget bias 1.0, other biases 0."""
    fields = {}
    for gate in GATES:
        fields[f"w_x{gate}"] = group.add(f"{prefix}.w_x{gate}", glorot(rng, (hidden, input_size)))
        fields[f"w_h{gate}"] = group.add(f"{prefix}.w_h{gate}", glorot(rng, (hidden, hidden)))
        bias = np.ones(hidden) if gate == "f" else np.zeros(hidden)
        fields[f"b_{gate}"] = group.add(f"{prefix}.b_{gate}", bias)
    return LstmParams(**fields)


def init_blstm(group: ParamGroup, prefix: str, input_size: int, hidden: int,
               rng: np.random.Generator) -> BlstmParams:
    return BlstmParams(fwd=init_lstm(group, f"{prefix}.fwd", input_size, hidden, rng),
                       bwd=init_lstm(group, f"{prefix}.bwd", input_size, hidden, rng))


def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, p: LstmParams) -> tuple[Tensor, Tensor]:
    """Standard gate recurrence; accepts a single vector or a (B, din) batch."""
    single = x.ndim == 1
    if single:
        x = reshape(x, (1, x.shape[0]))
        h_prev = reshape(h_prev, (1, h_prev.shape[0]))
        c_prev = reshape(c_prev, (1, c_prev.shape[0]))
    i = sigmoid(add(add(linear(x, p.w_xi), linear(h_prev, p.w_hi)), p.b_i))
    f = sigmoid(add(add(linear(x, p.w_xf), linear(h_prev, p.w_hf)), p.b_f))
    o = sigmoid(add(add(linear(x, p.w_xo), linear(h_prev, p.w_ho)), p.b_o))
    g = tanh(add(add(linear(x, p.w_xg), linear(h_prev, p.w_hg)), p.b_g))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    if single:
        hidden = p.hidden_size
        h = reshape(h, (hidden,))
        c = reshape(c, (hidden,))
    return h, c


def _scan(xs: list[Tensor], mask_cols: list, p: LstmParams, order: range,
          batch: int) -> list[Tensor]:
    hidden = p.hidden_size
    h = zeros((batch, hidden), const=True)
    c = zeros((batch, hidden), const=True)
    out: list[Tensor | None] = [None] * len(xs)
    for t in order:
        m, inv = mask_cols[t]
        h_new, c_new = lstm_step(xs[t], h, c, p)
        h = add(mul(h_new, m), mul(h, inv))
        c = add(mul(c_new, m), mul(c, inv))
        out[t] = h
    return out


def blstm_forward(x: Tensor, mask: np.ndarray, p: BlstmParams,
                  dropout_rate: float = 0.0, training: bool = False,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Bidirectional scan over (T, din) or batched (B, T, din) input.

    Output row t is forward_h_t concatenated with backward_h_t; masked rows
    come out exactly zero.  Dropout, when requested, applies to the output
    rows only (never inside the recurrence).
    """
    single = x.ndim == 2
    if single:
        x = reshape(x, (1,) + x.shape)
    mask = np.asarray(mask, dtype=x.data.dtype)
    if mask.ndim == 1:
        mask = mask[None, :]
    batch, steps, _ = x.shape
    if mask.shape != (batch, steps):
        raise ValueError(f"mask shape {mask.shape} != {(batch, steps)}")

    xs = [select(x, t, axis=1) for t in range(steps)]
    mask_cols = [(constant(mask[:, t:t + 1]), constant(1.0 - mask[:, t:t + 1]))
                 for t in range(steps)]
    fwd = _scan(xs, mask_cols, p.fwd, range(steps), batch)
    bwd = _scan(xs, mask_cols, p.bwd, range(steps - 1, -1, -1), batch)
    out = concat(stack(fwd, axis=1), stack(bwd, axis=1), axis=-1)
    out = mul(out, constant(mask[:, :, None]))
    if training and dropout_rate > 0.0:
        out = dropout(out, dropout_rate, training=True, rng=rng)
    if single:
        return reshape(out, out.shape[1:])
    return out
