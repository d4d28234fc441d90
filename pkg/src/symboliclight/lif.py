"""Spike gates: LIF neuron dynamics and the deterministic top-k substitute.

The LIF recurrence runs over the sequence axis in chunks, carrying the
membrane potential across chunk boundaries, so any chunk size produces
the same spikes as the unchunked loop. Backward-through-time replaces
the threshold's zero-almost-everywhere derivative with a surrogate.

The forward threshold is non-differentiable, so finite differences
cannot validate the surrogate backward directly. For gradient checking,
`smooth_gate=True` swaps the hard threshold for the antiderivative of
the surrogate (so the analytic backward becomes the true derivative of
the forward); it is paired with `surrogate_reset=True` so the reset
factor is differentiated too.

Order of operations per step is fixed: leak-accumulate, clamp,
threshold, reset.
"""

from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .numerics import check_finite, sigmoid


# ---------------------------------------------------------------------------
# surrogate gradients
# ---------------------------------------------------------------------------

def atan_surrogate(u, theta, kappa):
    """1 / (1 + (kappa*(u - theta))^2); peak exactly 1.0 at u = theta."""
    z = kappa * (u - theta)
    return 1.0 / (1.0 + z * z)


def scaled_sigmoid_surrogate(u, theta, alpha):
    """alpha * sg * (1 - sg) with sg = sigmoid(alpha*(u - theta)); peak alpha/4."""
    sg = sigmoid(alpha * (u - theta))
    return alpha * sg * (1.0 - sg)


def surrogate_grad(u, theta, cfg: ModelConfig):
    if cfg.surrogate == "atan":
        return atan_surrogate(u, theta, cfg.kappa)
    return scaled_sigmoid_surrogate(u, theta, cfg.sigmoid_alpha)


def smooth_gate_value(v, cfg: ModelConfig):
    """Antiderivative of the surrogate: a soft spike whose exact
    derivative is surrogate_grad. Used only in gradient-check mode."""
    if cfg.surrogate == "atan":
        return 0.5 + np.arctan(cfg.kappa * (v - cfg.theta)) / cfg.kappa
    return sigmoid(cfg.sigmoid_alpha * (v - cfg.theta))


# ---------------------------------------------------------------------------
# LIF forward
# ---------------------------------------------------------------------------

def lif_step(v, x, cfg: ModelConfig):
    """One membrane update: leak-accumulate, clamp, threshold, reset.

    v and x are [B x D]. Returns (s, v_next, (u, vc)) where u is the
    pre-clamp potential and vc the post-clamp potential the threshold
    saw. On a spike the membrane resets hard to zero.
    """
    check_finite(x, "lif input")
    u = cfg.beta * v + x
    vc = np.clip(u, cfg.clamp_lo, cfg.clamp_hi)
    if cfg.smooth_gate:
        s = smooth_gate_value(vc, cfg)
    else:
        s = (vc >= cfg.theta).astype(x.dtype)
    v_next = vc * (1.0 - s)
    return s, v_next, (u, vc)


def lif_sequence(x, v0, cfg: ModelConfig, chunk_size=None):
    """Run the LIF recurrence along the time axis of x [B x S x D].

    Processing walks chunks of `chunk_size` steps, explicitly forwarding
    the terminal membrane potential into the next chunk; the result is
    identical to the unchunked loop for every chunk size. Returns
    (s [B x S x D], v_final [B x D], cache).
    """
    b, s_len, d = x.shape
    if chunk_size is None:
        chunk_size = cfg.chunk_size
    if chunk_size < 1:
        raise ValueError("chunk size must be >= 1")
    v = np.array(v0, copy=True)
    spikes = np.empty_like(x)
    u_all = np.empty_like(x)
    vc_all = np.empty_like(x)
    for start in range(0, s_len, chunk_size):
        stop = min(start + chunk_size, s_len)
        for t in range(start, stop):
            s_t, v, (u, vc) = lif_step(v, x[:, t, :], cfg)
            spikes[:, t, :] = s_t
            u_all[:, t, :] = u
            vc_all[:, t, :] = vc
    return spikes, v, (u_all, vc_all, spikes)


# ---------------------------------------------------------------------------
# LIF backward-through-time
# ---------------------------------------------------------------------------

def lif_backward(grad_s, cache, cfg: ModelConfig, grad_v_final=None):
    """BPTT over the saved trajectory.

    ds/dv uses the surrogate at the post-clamp potential; the clamp
    passes gradient 1 inside [clamp_lo, clamp_hi] inclusive and 0
    outside; the reset factor (1 - s) treats s as constant unless
    surrogate_reset (or smooth_gate) routes the surrogate through the
    reset as well. Returns (grad_x, grad_v0).
    """
    u_all, vc_all, s_all = cache
    b, s_len, d = u_all.shape
    if grad_s.shape != u_all.shape:
        raise ValueError("upstream grad shape does not match the trajectory")
    reset_through = cfg.surrogate_reset or cfg.smooth_gate
    gv = np.zeros((b, d), dtype=u_all.dtype) if grad_v_final is None else np.array(grad_v_final, copy=True)
    grad_x = np.empty_like(u_all)
    for t in range(s_len - 1, -1, -1):
        u, vc, s = u_all[:, t, :], vc_all[:, t, :], s_all[:, t, :]
        g_vc = gv * (1.0 - s)
        g_s = grad_s[:, t, :]
        if reset_through:
            g_s = g_s - gv * vc
        g_vc = g_vc + g_s * surrogate_grad(vc, cfg.theta, cfg)
        inside = (u >= cfg.clamp_lo) & (u <= cfg.clamp_hi)
        g_u = g_vc * inside
        grad_x[:, t, :] = g_u
        gv = cfg.beta * g_u
    return grad_x, gv


# ---------------------------------------------------------------------------
# deterministic top-k mask (ablation substitute for LIF)
# ---------------------------------------------------------------------------

def topk_mask(x, keep_ratio, multiplicative=False):
    """Keep the k = max(1, round(keep_ratio * D)) largest-|x| positions
    per token, ties broken toward the lower index. Binary output by
    default; multiplicative=True keeps the surviving magnitudes."""
    if not (0.0 < keep_ratio <= 1.0):
        raise ValueError("keep_ratio must be in (0, 1]")
    d = x.shape[-1]
    k = max(1, round(keep_ratio * d))
    order = np.argsort(-np.abs(x), axis=-1, kind="stable")
    mask = np.zeros_like(x)
    np.put_along_axis(mask, order[..., :k], 1.0, axis=-1)
    return mask * x if multiplicative else mask


# ---------------------------------------------------------------------------
# unified gate interface (LIF by default, top-k under the ablation)
# ---------------------------------------------------------------------------

def gate_forward(x, cfg: ModelConfig):
    """Spike-gate a [B x S x D] stream. Returns (s, cache)."""
    if cfg.variant == "topk_mask":
        s = topk_mask(x, cfg.keep_ratio, cfg.topk_multiplicative)
        active = s != 0.0 if cfg.topk_multiplicative else s
        return s, ("topk", active)
    v0 = np.zeros((x.shape[0], x.shape[2]), dtype=x.dtype)
    s, _, traj = lif_sequence(x, v0, cfg)
    return s, ("lif", traj)


def gate_backward(grad_s, cache, cfg: ModelConfig):
    kind, payload = cache
    if kind == "topk":
        # kept positions pass gradient straight through; dropped block it
        return grad_s * payload
    grad_x, _ = lif_backward(grad_s, payload, cfg)
    return grad_x
