from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

__all__ = ["AdamState", "adam_step"]


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


def adam_step(state: AdamState, params: dict, grads: dict, lr: float | None = None) -> dict:
    """Apply one bias-corrected Adam update.

    ``params`` maps names to Tensors, whose ``data`` is rebound to the updated
    values; ``grads`` maps the same names to arrays. Parameters without an
    entry in ``grads`` are left untouched (this is how layers are frozen).
    """
    lr = state.lr if lr is None else lr
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if name not in params:
            raise KeyError(f"gradient given for unknown parameter {name!r}")
        if np.shape(g) != params[name].shape:
            raise ValueError(
                f"gradient shape {np.shape(g)} does not match parameter {name!r} {params[name].shape}"
            )
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p: Tensor = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)
    return params
