"""Parameter storage, the Adam update, and finite-difference verification."""

from __future__ import annotations

import math
from typing import Callable, Iterator

import numpy as np

from .autodiff import Gradients, NonFiniteError, Tape, Tensor, default_dtype


class ParamGroup:
    """Named trainable tensors plus their per-tensor Adam moments.

    The step count is shared by the whole group; first/second moments are
    allocated lazily with the parameter and always match its shape.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=default_dtype()))
        self._params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, t in self._params.items():
            src = values[name]
            if src.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name!r}: {src.shape} vs {t.data.shape}")
            t.data[...] = src


def adam_step(params: ParamGroup, grads: Gradients, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamGroup:
    """One in-place Adam update with bias correction.

    Defaults are the optimizer's original settings; only the learning rate
    is commonly overridden (0.001 is the run default).  Parameters with
    zero gradient are a fixed point.
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    params.step_count += 1
    t = params.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[p]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name!r} shape {p.data.shape}")
        m = params._m[name]
        v = params._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if not np.all(np.isfinite(p.data)):
            raise NonFiniteError(f"parameter {name!r} became non-finite during the update")
    return params


def grad_check(loss_fn: Callable[[ParamGroup], Tensor], params: ParamGroup,
               h: float = 1e-5, max_coords_per_tensor: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Compare taped gradients of ``loss_fn`` against central differences.

    Returns the max relative error |g_ad - g_fd| / max(1, |g_ad|, |g_fd|)
    over all checked coordinates.  For large tensors a random coordinate
    subset may be checked (``max_coords_per_tensor``).  Run in 64-bit mode;
    the comparison is meaningless at float32.
    """
    if default_dtype() != np.dtype(np.float64):
        raise RuntimeError("grad_check requires float64 mode")
    with Tape() as tape:
        loss = loss_fn(params)
    if loss.size != 1:
        raise ValueError("loss_fn must return a scalar")
    if not math.isfinite(loss.item()):
        raise NonFiniteError("loss is non-finite at the evaluation point")
    grads = tape.gradients(loss)

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        gflat = grads[p].reshape(-1)
        n = flat.size
        if max_coords_per_tensor is not None and n > max_coords_per_tensor:
            picker = rng if rng is not None else np.random.default_rng(0)
            coords = picker.choice(n, size=max_coords_per_tensor, replace=False)
        else:
            coords = range(n)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            lp = float(loss_fn(params).data)
            flat[i] = orig - h
            lm = float(loss_fn(params).data)
            flat[i] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise NonFiniteError(f"loss non-finite while perturbing {name!r}")
            fd = (lp - lm) / (2.0 * h)
            ad = float(gflat[i])
            err = abs(ad - fd) / max(1.0, abs(ad), abs(fd))
            if err > worst:
                worst = err
    return worst
