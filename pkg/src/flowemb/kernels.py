"""Dense layer kernels with hand-derived backward passes.

Every differentiable op comes as a pair ``op(...) -> (out, cache)`` and
``op_backward(dout, cache) -> grads``. There is no autodiff tape; composite
blocks chain the backward calls themselves in reverse order.

Sequence activations use the ``(batch, length, channels)`` layout so that
convolutions reduce to a single GEMM over ``batch * length`` rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
GEM_EPS = 1e-6
L2_EPS = 1e-12


@dataclass
class Parameter:
    """A named learnable tensor with its gradient buffer."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    weight_decay_exempt: bool = False
    trainable: bool = True

    def __post_init__(self) -> None:
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0


def _sum64(x: np.ndarray, axis) -> np.ndarray:
    return x.sum(axis=axis, dtype=np.float64)


# ---------------------------------------------------------------- conv1d


def conv1d_same(x: np.ndarray, w: np.ndarray):
    """Stride-1 cross-correlation with symmetric zero padding, no bias.

    Args:
        x: input of shape ``(B, L, C_in)``.
        w: kernel of shape ``(C_out, C_in, k)`` with odd ``k``.

    Returns:
        ``(out, cache)`` where ``out`` has shape ``(B, L, C_out)``.
    """
    if x.ndim != 3 or w.ndim != 3:
        raise ValueError(f"conv1d_same expects 3-d x and w, got {x.shape} and {w.shape}")
    c_out, c_in, k = w.shape
    if x.shape[2] != c_in:
        raise ValueError(f"channel mismatch: x has {x.shape[2]}, w expects {c_in}")
    if k % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {k}")
    b, length, _ = x.shape
    if k == 1:
        wm = w[:, :, 0]
        out = (x.reshape(b * length, c_in) @ wm.T).reshape(b, length, c_out)
        return out, (x, w, None)
    pad = (k - 1) // 2
    xp = np.zeros((b, length + 2 * pad, c_in), dtype=x.dtype)
    xp[:, pad:pad + length] = x
    # cols[b, l, j, c] = xp[b, l + j, c]
    cols = np.stack([xp[:, j:j + length] for j in range(k)], axis=2)
    cols = cols.reshape(b * length, k * c_in)
    wm = w.transpose(0, 2, 1).reshape(c_out, k * c_in)
    out = (cols @ wm.T).reshape(b, length, c_out)
    return out, (x, w, cols)


def conv1d_same_backward(dout: np.ndarray, cache):
    x, w, cols = cache
    c_out, c_in, k = w.shape
    b, length, _ = x.shape
    d2 = dout.reshape(b * length, c_out)
    if k == 1:
        x2 = x.reshape(b * length, c_in)
        dw = (d2.T @ x2)[:, :, None]
        dx = (d2 @ w[:, :, 0]).reshape(b, length, c_in)
        return dx, dw.astype(w.dtype, copy=False)
    wm = w.transpose(0, 2, 1).reshape(c_out, k * c_in)
    dwm = d2.T @ cols
    dw = dwm.reshape(c_out, k, c_in).transpose(0, 2, 1)
    dcols = (d2 @ wm).reshape(b, length, k, c_in)
    pad = (k - 1) // 2
    dxp = np.zeros((b, length + 2 * pad, c_in), dtype=x.dtype)
    for j in range(k):
        dxp[:, j:j + length] += dcols[:, :, j]
    return dxp[:, pad:pad + length], np.ascontiguousarray(dw)


# ---------------------------------------------------------------- batchnorm

_CHUNK = 128


def colsum(x2: np.ndarray) -> np.ndarray:
    """Column sums of a 2-d array as float64.

    Rows are summed in fixed chunks of 128 in the input dtype, then the chunk
    partials are combined in float64. The order depends only on the shape.
    """
    n, c = x2.shape
    full = n - n % _CHUNK
    total = np.zeros(c, dtype=np.float64)
    if full:
        total += x2[:full].reshape(-1, _CHUNK, c).sum(axis=1).sum(axis=0, dtype=np.float64)
    if full < n:
        total += x2[full:].sum(axis=0, dtype=np.float64)
    return total


def batchnorm1d(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
):
    """Per-channel batch normalization over every axis but the last.

    In train mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance, like PyTorch).
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},)")
    x2 = x.reshape(-1, c)
    n = x2.shape[0]
    if train:
        if n < 2:
            raise ValueError("batchnorm in train mode needs at least 2 values per channel")
        mean = colsum(x2) / n
        centered = x2 - mean.astype(x.dtype)
        tmp = np.multiply(centered, centered)
        var = colsum(tmp) / n
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * n / (n - 1)
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
        centered = x2 - mean.astype(x.dtype)
        tmp = np.empty_like(centered)
    inv_std = 1.0 / np.sqrt(var + eps)
    np.multiply(centered, (gamma * inv_std).astype(x.dtype), out=tmp)
    tmp += beta
    return tmp.reshape(x.shape), (centered, gamma, inv_std, train, x.shape)


def batchnorm1d_backward(dout: np.ndarray, cache):
    centered, gamma, inv_std, train, shape = cache
    c = centered.shape[1]
    d2 = dout.reshape(-1, c)
    n = d2.shape[0]
    dt = centered.dtype
    dbeta = colsum(d2)
    dgamma = colsum(d2 * centered) * inv_std
    if not train:
        dx = d2 * (gamma * inv_std).astype(dt)
        return dx.reshape(shape), dgamma.astype(gamma.dtype), dbeta.astype(gamma.dtype)
    # dx = gamma*inv_std/n * (n*dout - sum(dout) - xhat*sum(dout*xhat))
    dx = np.multiply(centered, (inv_std * dgamma).astype(dt))
    np.subtract(d2 * dt.type(n), dx, out=dx)
    dx -= dbeta.astype(dt)
    dx *= (gamma * inv_std / n).astype(dt)
    return dx.reshape(shape), dgamma.astype(gamma.dtype), dbeta.astype(gamma.dtype)


# ---------------------------------------------------------------- GeM


def gem_pool(x: np.ndarray, p, eps: float = GEM_EPS):
    """Generalized-mean pooling over the length axis.

    ``x`` has shape ``(B, L, C)``; ``p`` is a scalar (0-d or 1-element array).
    Returns ``(out, cache)`` with ``out`` of shape ``(B, C)``.
    """
    if x.ndim != 3:
        raise ValueError(f"gem_pool expects (B, L, C), got {x.shape}")
    p_val = float(np.asarray(p).reshape(-1)[0])
    mask = x >= eps
    logx = np.log(np.maximum(x, x.dtype.type(eps)))
    xp = np.exp(logx * x.dtype.type(p_val))
    m = xp.mean(axis=1, dtype=np.float64)
    out = (m ** (1.0 / p_val)).astype(x.dtype)
    return out, (logx, xp, m, out, p_val, mask)


def gem_pool_backward(dout: np.ndarray, cache):
    logx, xp, m, out, p_val, mask = cache
    dt = logx.dtype
    length = logx.shape[1]
    # d out / d x_l = out * x_l^(p-1) / (L * m);  x^(p-1) = exp((p-1) log x)
    scale = (dout * out / (length * m)).astype(dt)[:, None, :]
    dx = np.exp(logx * dt.type(p_val - 1))
    dx *= scale
    dx *= mask
    mean_xp_logx = (xp * logx).mean(axis=1, dtype=np.float64)
    dout_dp = out * (-np.log(m) / p_val**2 + mean_xp_logx / (p_val * m))
    dp = np.array([np.sum(dout * dout_dp, dtype=np.float64)])
    return dx, dp


# ---------------------------------------------------------------- L2 norm


def l2_normalize(x: np.ndarray, eps: float = L2_EPS):
    """Row-wise ``x / (||x|| + eps)`` over the last axis."""
    norm = np.sqrt(_sum64(x * x, -1)).astype(x.dtype)[..., None]
    denom = norm + eps
    out = x / denom
    return out, (x, norm, denom)


def l2_normalize_backward(dout: np.ndarray, cache):
    x, norm, denom = cache
    dot = _sum64(x * dout, -1).astype(x.dtype)[..., None]
    safe = np.where(norm > 0, norm, 1)
    return dout / denom - x * dot / (denom * denom * safe)


# ---------------------------------------------------------------- affine


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None):
    """``x @ w.T + b`` with ``w`` of shape ``(out, in)``."""
    out = x @ w.T
    if b is not None:
        out = out + b
    return out, (x, w, b is not None)


def linear_backward(dout: np.ndarray, cache):
    x, w, has_bias = cache
    dx = dout @ w
    dw = dout.reshape(-1, dout.shape[-1]).T @ x.reshape(-1, x.shape[-1])
    db = _sum64(dout.reshape(-1, dout.shape[-1]), 0).astype(w.dtype) if has_bias else None
    return dx, dw, db


def relu(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask


def dropout(
    x: np.ndarray,
    rate: float,
    train: bool,
    rng: np.random.Generator | None = None,
    mask_shape: tuple[int, ...] | None = None,
):
    """Inverted dropout. ``mask_shape`` allows channel dropout (e.g. ``(B, 1, C)``)."""
    if not train or rate == 0:
        return x, None
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    shape = x.shape if mask_shape is None else mask_shape
    keep = (rng.random(shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return x * keep, keep


def dropout_backward(dout: np.ndarray, keep: np.ndarray | None) -> np.ndarray:
    return dout if keep is None else dout * keep


def embedding_lookup(table: np.ndarray, indices: np.ndarray):
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0]})")
    return table[indices], (indices, table.shape)


def embedding_lookup_backward(dout: np.ndarray, cache) -> np.ndarray:
    indices, shape = cache
    dtable = np.zeros(shape, dtype=np.float64)
    np.add.at(dtable, indices.reshape(-1), dout.reshape(-1, shape[1]))
    return dtable.astype(dout.dtype)


def one_hot(indices: np.ndarray, depth: int, dtype=np.float32) -> np.ndarray:
    """One-hot rows; negative indices yield an all-zero row."""
    indices = np.asarray(indices)
    if indices.size and indices.max() >= depth:
        raise IndexError(f"one_hot index out of range [0, {depth})")
    out = np.zeros(indices.shape + (depth,), dtype=dtype)
    valid = indices >= 0
    out[valid, indices[valid]] = 1
    return out


# ---------------------------------------------------------------- checking


def grad_check(
    fn: Callable[..., tuple[float, Sequence[np.ndarray]]],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
    rounding_floor: bool = False,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``fn(*inputs)`` must return ``(loss, grads)`` with one gradient per input.
    Inputs are perturbed in place and restored. With ``max_entries`` only a
    random subset of entries per input is probed.

    Returns the max over probed entries of
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.

    With ``rounding_floor`` an entry whose disagreement is below the rounding
    bound of the difference quotient, ``64 * ulp * max(1, |f|) / eps``, counts
    as exact. This matters for gradients that are exactly zero (biases ahead
    of batch norm) or far below the loss's resolution.
    """
    loss, grads = fn(*inputs)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss in grad_check")
    rng = np.random.default_rng(seed)
    floor = 64 * np.finfo(np.float64).eps * max(1.0, abs(float(loss))) / eps
    worst = 0.0
    for arr, g in zip(inputs, grads):
        flat = arr.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp, _ = fn(*inputs)
            flat[i] = orig - eps
            fm, _ = fn(*inputs)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError("non-finite loss in grad_check")
            num = (fp - fm) / (2 * eps)
            ana = float(gflat[i])
            if rounding_floor and abs(ana - num) <= floor:
                continue
            err = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
            worst = max(worst, err)
    return worst
