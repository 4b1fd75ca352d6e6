"""Central finite-difference checks for tape gradients."""
from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor

__all__ = ["numerical_gradient", "gradient_errors"]


def numerical_gradient(fn, tensor: Tensor, h=1e-5, indices=None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. entries of ``tensor``.

    ``fn`` must rebuild its result from ``tensor.data`` on every call. Only the
    flat positions in ``indices`` are perturbed (all of them by default).
    """
    base = tensor.data
    flat = base.reshape(-1)
    if indices is None:
        indices = np.arange(flat.size)
    out = np.empty(len(indices))
    for n, i in enumerate(indices):
        plus = flat.copy()
        plus[i] += h
        tensor.data = plus.reshape(base.shape)
        f_plus = float(fn().data)
        minus = flat.copy()
        minus[i] -= h
        tensor.data = minus.reshape(base.shape)
        f_minus = float(fn().data)
        out[n] = (f_plus - f_minus) / (2.0 * h)
    tensor.data = base
    return out


def gradient_errors(fn, tensors: dict, h=1e-5, max_entries=None, rng=None, floor=1e-5) -> dict:
    """Relative error between tape and finite-difference gradients, per tensor.

    The error for a tensor is ``|g_tape - g_fd| / max(|g_tape|, |g_fd|)`` over the
    checked entries (Euclidean norms). The denominator is floored at
    ``floor * max(1, |loss|)``: an exactly-zero gradient (key biases under
    softmax) is then compared against the loss scale instead of against the
    finite-difference round-off, which itself grows with ``|loss|``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for t in tensors.values():
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    floor = floor * max(1.0, abs(float(loss.data)))
    errors = {}
    for name, t in tensors.items():
        analytic = t.grad.reshape(-1)
        if max_entries is None or t.size <= max_entries:
            idx = np.arange(t.size)
        else:
            idx = np.sort(rng.choice(t.size, size=max_entries, replace=False))
        numeric = numerical_gradient(fn, t, h=h, indices=idx)
        a = analytic[idx]
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric), floor)
        errors[name] = float(np.linalg.norm(a - numeric) / denom)
    return errors
