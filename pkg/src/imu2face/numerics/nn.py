"""Network primitives built on :mod:`imu2face.numerics.tensor`.

Convolution and the two normalizations carry hand-written backward rules;
attention is composed from differentiable primitives.
"""
from __future__ import annotations

import numpy as np

from ..exceptions import ConfigError
from .tensor import Tensor, ShapeError, _make, as_tensor, matmul, reshape, transpose, add, mul

__all__ = [
    "ConfigError",
    "linear",
    "conv1d",
    "batch_norm",
    "layer_norm",
    "softmax",
    "dropout",
    "multi_head_attention",
]


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in_features, out_features)."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def conv1d(x, kernels, bias=None, padding="same") -> Tensor:
    """Stride-1 1-D cross-correlation.

    Parameters
    ----------
    x : Tensor
        (C_in, L) or batched (B, C_in, L).
    kernels : Tensor
        (C_out, C_in, K) with odd K.
    bias : Tensor, optional
        (C_out,).
    padding : {"same", "valid"}
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    bias = None if bias is None else as_tensor(bias)
    batched = x.ndim == 3
    if x.ndim not in (2, 3):
        raise ShapeError(f"conv1d input must be (C_in, L) or (B, C_in, L), got {x.shape}")
    if kernels.ndim != 3:
        raise ShapeError(f"conv1d kernels must be (C_out, C_in, K), got {kernels.shape}")
    c_out, c_in, k = kernels.shape
    xd = x.data if batched else x.data[None]
    if xd.shape[1] != c_in:
        raise ShapeError(
            f"conv1d input channel dimension is {xd.shape[1]} but kernels expect C_in={c_in}"
        )
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv1d bias must have shape ({c_out},), got {bias.shape}")
    if padding == "same":
        if k % 2 != 1:
            raise ShapeError(f"same padding needs an odd kernel size K, got K={k}")
        pad = k // 2
    elif padding == "valid":
        pad = 0
    else:
        raise ConfigError(f"unknown padding {padding!r}")

    b, _, length = xd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad))) if pad else xd
    out_len = xp.shape[2] - k + 1
    if out_len < 1:
        raise ShapeError(f"conv1d input length L={length} is shorter than kernel size K={k}")
    # cols: (B, L_out, C_in, K)
    cols = np.stack([xp[:, :, j:j + out_len] for j in range(k)], axis=-1).transpose(0, 2, 1, 3)
    cols2 = cols.reshape(b * out_len, c_in * k)
    wmat = kernels.data.reshape(c_out, c_in * k)
    out = cols2 @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(b, out_len, c_out).transpose(0, 2, 1)
    if not batched:
        out = out[0]

    def fn(g):
        gb = g if batched else g[None]
        gm = gb.transpose(0, 2, 1).reshape(b * out_len, c_out)
        gk = (gm.T @ cols2).reshape(kernels.shape) if kernels.requires_grad else None
        gbias = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(b, out_len, c_in, k).transpose(0, 2, 1, 3)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, :, j:j + out_len] += gcols[..., j]
            gx = gxp[:, :, pad:pad + length] if pad else gxp
            if not batched:
                gx = gx[0]
        return (gx, gk, gbias) if bias is not None else (gx, gk)

    inputs = (x, kernels, bias) if bias is not None else (x, kernels)
    return _make(out, inputs, fn)


def batch_norm(x, gamma, beta, running_mean=None, running_var=None, training=True,
               momentum=0.1, eps=1e-5) -> Tensor:
    """Batch normalization over (B, C, L) input, statistics per channel.

    In training mode the batch statistics normalize the input and, when given,
    ``running_mean``/``running_var`` (Tensors) are rebound to their exponential
    moving averages. In eval mode the running statistics are used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 3:
        raise ShapeError(f"batch_norm expects (B, C, L), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm affine parameters must have shape ({c},)")
    xd = x.data
    gd = gamma.data[None, :, None]
    if training:
        n = xd.shape[0] * xd.shape[2]
        if n < 2:
            raise ShapeError("batch_norm in training mode needs at least 2 values per channel")
        mu = xd.mean(axis=(0, 2), keepdims=True)
        centered = xd - mu
        var = (centered * centered).mean(axis=(0, 2), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std
        if running_mean is not None:
            running_mean.data = (1 - momentum) * running_mean.data + momentum * mu.reshape(c)
        if running_var is not None:
            unbiased = var.reshape(c) * (n / (n - 1))
            running_var.data = (1 - momentum) * running_var.data + momentum * unbiased
    else:
        if running_mean is None or running_var is None:
            raise ConfigError("eval-mode batch_norm needs running statistics")
        mu = running_mean.data[None, :, None]
        inv_std = 1.0 / np.sqrt(running_var.data[None, :, None] + eps)
        xhat = (xd - mu) * inv_std
    out = (xhat * gd + beta.data[None, :, None]).astype(xd.dtype, copy=False)

    def fn(g):
        ggamma = (g * xhat).sum(axis=(0, 2)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            if training:
                m = xd.shape[0] * xd.shape[2]
                gx = inv_std / m * (
                    m * dxhat
                    - dxhat.sum(axis=(0, 2), keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
                )
            else:
                gx = dxhat * inv_std
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), fn)


def layer_norm(x, gamma, beta, eps=1e-5) -> Tensor:
    """Normalize over the last axis, then apply a per-feature affine map."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs a last dimension of at least 2")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine parameters must have shape ({d},), got {gamma.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def fn(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv_std / d * (
                d * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), fn)


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), fn)


def dropout(x, p, rng, training=True) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p); identity when not training."""
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, Tensor(keep))


def multi_head_attention(x, params, n_head, return_weights=False):
    """Scaled dot-product self-attention with ``n_head`` heads.

    ``x`` is (T, D) or (B, T, D); ``params`` maps ``wq, bq, wk, bk, wv, bv,
    wo, bo`` to projection weights stored as (D, D) matrices and (D,) biases.
    """
    x = as_tensor(x)
    d = x.shape[-1]
    if n_head < 1 or d % n_head:
        raise ConfigError(f"model width {d} is not divisible by n_head={n_head}")
    unbatched = x.ndim == 2
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    b, t, _ = x.shape
    dh = d // n_head

    def heads(z):
        # (B, T, D) -> (B, H, T, dh)
        return transpose(reshape(z, (b, t, n_head, dh)), (0, 2, 1, 3))

    q = heads(linear(x, params["wq"], params["bq"]))
    k = heads(linear(x, params["wk"], params["bk"]))
    v = heads(linear(x, params["wv"], params["bv"]))
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    weights = softmax(scores, axis=-1)
    ctx = transpose(matmul(weights, v), (0, 2, 1, 3))
    out = linear(reshape(ctx, (b, t, d)), params["wo"], params["bo"])
    if unbatched:
        out = reshape(out, (t, d))
        if return_weights:
            weights = reshape(weights, (n_head, t, t))
    return (out, weights) if return_weights else out
