"""Dense numeric kernels with hand-written forward and backward passes.

Every layer in the model is composed from the kernels here. There is no
autodiff graph: each forward returns a cache of exactly the intermediates
its backward needs, and each backward is derived by hand. All kernels are
pure functions, safe to call concurrently on disjoint outputs.

Two precision modes are supported by convention rather than machinery:
tests build everything in float64, training runs in float32. Kernels
preserve the dtype of their inputs.

`finite_difference_grad` and `rel_error` provide the central-difference
oracle used throughout the test suite to validate the hand-written
backwards.
"""

from __future__ import annotations

import math

import numpy as np

NEG_INF = -np.inf

_erf = np.vectorize(math.erf, otypes=[np.float64])


class MaskedRowError(ValueError):
    """A softmax row had no finite entry (every key masked out)."""


class NumericError(ValueError):
    """A tensor that must be finite contained inf or nan."""


def sigmoid(x):
    """Numerically stable logistic function, elementwise."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def check_finite(x, what="tensor"):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} contains non-finite values")
    return x


def check_binary(s, what="spike tensor"):
    """Every element must be exactly 0 or 1."""
    if not np.all((s == 0.0) | (s == 1.0)):
        raise ValueError(f"{what} has entries outside {{0, 1}}")
    return s


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a, b):
    """[m x k] @ [k x n] -> [m x n]."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner extents differ: {a.shape} vs {b.shape}")
    return a @ b


def matmul_backward(grad_out, a, b):
    """Gradients w.r.t. both operands of matmul."""
    return grad_out @ b.T, a.T @ grad_out


# ---------------------------------------------------------------------------
# layer norm
# ---------------------------------------------------------------------------

def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean, unit variance, then affine.

    Returns (y, cache). Accepts any leading shape; gain/bias are [D].
    """
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"gain/bias must be [{d}], got {gain.shape} and {bias.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mu) * inv_std
    y = x_hat * gain + bias
    return y, (x_hat, inv_std, gain)


def layer_norm_backward(grad_y, cache):
    """Returns (grad_x, grad_gain, grad_bias)."""
    x_hat, inv_std, gain = cache
    d = x_hat.shape[-1]
    g = grad_y * gain
    # dx = (g - mean(g) - x_hat * mean(g * x_hat)) / std, per row
    mean_g = g.mean(axis=-1, keepdims=True)
    mean_gx = (g * x_hat).mean(axis=-1, keepdims=True)
    grad_x = (g - mean_g - x_hat * mean_gx) * inv_std
    axes = tuple(range(x_hat.ndim - 1))
    grad_gain = (grad_y * x_hat).sum(axis=axes)
    grad_bias = grad_y.sum(axis=axes)
    return grad_x, grad_gain, grad_bias


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def softmax_rows(x):
    """Row-wise softmax over the last axis with -inf mask sentinels.

    -inf entries map to exactly 0. A row whose entries are all -inf has
    no distribution to return; callers must guarantee at least one
    visible key per row (the attention layer guards this itself).
    """
    m = np.max(x, axis=-1, keepdims=True)
    if np.any(np.isneginf(m)):
        raise MaskedRowError("softmax row with every entry masked")
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(grad_p, p):
    """Backward of softmax_rows; rows of all-zero p yield zero grads."""
    inner = (grad_p * p).sum(axis=-1, keepdims=True)
    return p * (grad_p - inner)


# ---------------------------------------------------------------------------
# GELU (exact erf form)
# ---------------------------------------------------------------------------

def gelu(x):
    """Exact-erf GELU, y = x * Phi(x). Returns (y, cache)."""
    phi = 0.5 * (1.0 + _erf(x / math.sqrt(2.0))).astype(x.dtype, copy=False)
    return x * phi, (x, phi)


def gelu_backward(grad_y, cache):
    x, phi = cache
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return grad_y * (phi + x * pdf)


# ---------------------------------------------------------------------------
# rotary position embedding
# ---------------------------------------------------------------------------

ROPE_BASE = 10000.0


def _rope_angles(positions, d_k, dtype):
    if d_k % 2 != 0:
        raise ValueError("rope requires an even head dimension")
    half = d_k // 2
    inv_freq = ROPE_BASE ** (-np.arange(half, dtype=np.float64) * 2.0 / d_k)
    theta = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(theta).astype(dtype), np.sin(theta).astype(dtype)


def rope_rotate(x, positions):
    """Rotate adjacent feature pairs of each head vector by position.

    x has shape [..., S, H, d_k]; positions is a length-S integer
    sequence. Each pair (2i, 2i+1) is rotated by angle
    pos * base^(-2i/d_k), which preserves the per-head norm. Returns
    (y, cache).
    """
    s, d_k = x.shape[-3], x.shape[-1]
    if len(positions) != s:
        raise ValueError("positions length must match the sequence axis")
    cos, sin = _rope_angles(positions, d_k, x.dtype)
    cos = cos[:, None, :]  # broadcast over heads
    sin = sin[:, None, :]
    even, odd = x[..., 0::2], x[..., 1::2]
    y = np.empty_like(x)
    y[..., 0::2] = even * cos - odd * sin
    y[..., 1::2] = even * sin + odd * cos
    return y, (cos, sin)


def rope_backward(grad_y, cache):
    """Inverse rotation applied to the gradient."""
    cos, sin = cache
    g_even, g_odd = grad_y[..., 0::2], grad_y[..., 1::2]
    grad_x = np.empty_like(grad_y)
    grad_x[..., 0::2] = g_even * cos + g_odd * sin
    grad_x[..., 1::2] = -g_even * sin + g_odd * cos
    return grad_x


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_difference_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar f at x, one entry at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f(x)
        flat[i] = orig - h
        f_minus = f(x)
        flat[i] = orig
        g[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def rel_error(a, b):
    """Scale-normalized worst-case difference between two gradients."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), 1e-12)
    return float(np.max(np.abs(a - b), initial=0.0) / denom)
