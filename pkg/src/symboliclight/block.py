"""One mixer block: decay recurrence + spike-gated local attention.

The block mixes a binary spike stream s and a continuous stream c:

  z = W_tcam s  -> per-head exponential-decay recurrence
  local attention over c, gated by s through the position mask
  gated fusion of the two paths, residual, LayerNorm
  re-spike, spiking FFN, second residual + LayerNorm, final re-spike

All backwards are hand-written. The spike mask and attention mask are
locally constant functions of s, so no gradient flows through mask
construction; the spike stream receives gradient through the decay
path's projection.
"""

from __future__ import annotations

import math

import numpy as np

from .config import ModelConfig
from .lif import gate_backward, gate_forward
from .numerics import (
    NEG_INF,
    NumericError,
    layer_norm,
    layer_norm_backward,
    rope_backward,
    rope_rotate,
    sigmoid,
    softmax_backward,
    softmax_rows,
)


def decay_half_life(alpha: float) -> float:
    """Tokens until a unit impulse decays to half: ln(0.5) / ln(alpha)."""
    return math.log(0.5) / math.log(alpha)


# ---------------------------------------------------------------------------
# decay path
# ---------------------------------------------------------------------------

def decay_aggregate(z, alpha, h0):
    """Per-head first-order recurrence h_t = a*h_{t-1} + (1-a)*z_t.

    z is [B x S x H x d_k], alpha is [H] in (0,1), h0 is [B x H x d_k].
    Returns (h_all, h_final, cache); h_final supports streaming: running
    the recurrence on a suffix seeded with h_final of the prefix equals
    the unsplit run exactly.
    """
    if np.any(alpha <= 0.0) or np.any(alpha >= 1.0):
        # NumericError (a ValueError) so a run whose gammas saturate the
        # sigmoid surfaces as training divergence, not a usage error
        raise NumericError("decay factors must lie strictly inside (0, 1)")
    b, s_len, n_heads, d_k = z.shape
    a = alpha[None, :, None]
    h = np.array(h0, copy=True)
    h_all = np.empty_like(z)
    for t in range(s_len):
        h = a * h + (1.0 - a) * z[:, t]
        h_all[:, t] = h
    return h_all, h, (z, alpha, h0, h_all)


def decay_closed_form(z, alpha, h0):
    """Direct-summation oracle: h_t = a^t h0 + (1-a) sum_k a^(t-k) z_k."""
    b, s_len, n_heads, d_k = z.shape
    a = alpha[None, :, None]
    out = np.empty_like(z)
    for t in range(s_len):
        acc = a ** (t + 1) * h0
        for k in range(t + 1):
            acc = acc + (1.0 - a) * a ** (t - k) * z[:, k]
        out[:, t] = acc
    return out


def decay_backward(grad_h, cache, grad_h_final=None):
    """Returns (grad_z, grad_alpha, grad_h0)."""
    z, alpha, h0, h_all = cache
    b, s_len, n_heads, d_k = z.shape
    a = alpha[None, :, None]
    g = np.zeros_like(h0) if grad_h_final is None else np.array(grad_h_final, copy=True)
    grad_z = np.empty_like(z)
    grad_alpha = np.zeros_like(alpha)
    for t in range(s_len - 1, -1, -1):
        g = g + grad_h[:, t]
        h_prev = h_all[:, t - 1] if t > 0 else h0
        grad_z[:, t] = (1.0 - a) * g
        grad_alpha += (g * (h_prev - z[:, t])).sum(axis=(0, 2))
        g = a * g
    return grad_z, grad_alpha, g


# ---------------------------------------------------------------------------
# spike-gated local attention
# ---------------------------------------------------------------------------

def spike_position_mask(s):
    """m_t = 1 iff any of the D spike channels at position t is active.

    Accepts [S x D] or [B x S x D]; reduces the last axis.
    """
    return (np.abs(s).sum(axis=-1) > 0.0).astype(s.dtype)


def build_attention_mask(s_len, window, n_global, m):
    """Additive {0, -inf} mask over (query i, key j) for one sequence.

    Key j is visible from query i iff
      j <= i                                (causality, never overridden)
      and (j >= i - window + 1 or j < n_global)
      and (m[j] == 1 or j < n_global).
    The leading n_global anchor positions override the window and spike
    conditions but not causality.
    """
    i = np.arange(s_len)[:, None]
    j = np.arange(s_len)[None, :]
    anchor = j < n_global
    visible = (j <= i) & ((j >= i - window + 1) | anchor) & ((m[None, :] == 1.0) | anchor)
    mask = np.where(visible, 0.0, NEG_INF)
    return mask, visible


def _split_heads(x, n_heads):
    b, s_len, d = x.shape
    return x.reshape(b, s_len, n_heads, d // n_heads)


def _merge_heads(x):
    b, s_len, n_heads, d_k = x.shape
    return x.reshape(b, s_len, n_heads * d_k)


def local_attention(c, s, p, cfg: ModelConfig):
    """Windowed causal attention over c, gated by the spike mask of s.

    Q and K are position-encoded with the rotary rotation; V is not.
    Rows whose query position carries no spike (m_t = 0) are zeroed
    before the output projection. Query rows with no visible key (only
    possible when n_global = 0) are defined as zero without evaluating
    softmax. Returns (out, cache).
    """
    b, s_len, d = c.shape
    n_heads, d_k = cfg.n_heads, cfg.d_k
    scale = 1.0 / math.sqrt(d_k)
    positions = list(range(s_len))

    c2 = c.reshape(b * s_len, d)
    q0 = _split_heads((c2 @ p["w_q"].T).reshape(b, s_len, d), n_heads)
    k0 = _split_heads((c2 @ p["w_k"].T).reshape(b, s_len, d), n_heads)
    v = _split_heads((c2 @ p["w_v"].T).reshape(b, s_len, d), n_heads)
    q, rope_cache_q = rope_rotate(q0, positions)
    k, rope_cache_k = rope_rotate(k0, positions)

    m = spike_position_mask(s)  # [B x S]
    masks = np.empty((b, s_len, s_len), dtype=c.dtype)
    row_ok = np.empty((b, s_len), dtype=bool)
    for bi in range(b):
        mask, visible = build_attention_mask(s_len, cfg.window, cfg.n_global, m[bi])
        masks[bi] = mask
        row_ok[bi] = visible.any(axis=1)

    scores = np.einsum("bihd,bjhd->bhij", q, k) * scale + masks[:, None, :, :]
    ok4 = row_ok[:, None, :, None]
    probs = softmax_rows(np.where(ok4, scores, 0.0))
    probs = probs * ok4

    o = np.einsum("bhij,bjhd->bihd", probs, v)
    o = _merge_heads(o) * m[:, :, None]
    out = (o.reshape(b * s_len, d) @ p["w_out"].T).reshape(b, s_len, d)
    cache = (c, q, k, v, probs, m, rope_cache_q, rope_cache_k, o, scale)
    return out, cache


def local_attention_backward(grad_out, cache, p):
    """Returns (grad_c, param grads dict). No gradient reaches s: the
    spike mask enters only through locally constant masking."""
    c, q, k, v, probs, m, rope_cache_q, rope_cache_k, o, scale = cache
    b, s_len, d = c.shape
    n_heads = q.shape[2]

    g2 = grad_out.reshape(b * s_len, d)
    grad_w_out = g2.T @ o.reshape(b * s_len, d)
    go = (g2 @ p["w_out"]).reshape(b, s_len, d) * m[:, :, None]
    go_h = go.reshape(b, s_len, n_heads, d // n_heads)

    grad_probs = np.einsum("bihd,bjhd->bhij", go_h, v)
    grad_v = np.einsum("bhij,bihd->bjhd", probs, go_h)
    grad_scores = softmax_backward(grad_probs, probs)

    grad_q = np.einsum("bhij,bjhd->bihd", grad_scores, k) * scale
    grad_k = np.einsum("bhij,bihd->bjhd", grad_scores, q) * scale
    grad_q0 = rope_backward(grad_q, rope_cache_q)
    grad_k0 = rope_backward(grad_k, rope_cache_k)

    c2 = c.reshape(b * s_len, d)
    gq2 = _merge_heads(grad_q0).reshape(b * s_len, d)
    gk2 = _merge_heads(grad_k0).reshape(b * s_len, d)
    gv2 = _merge_heads(grad_v).reshape(b * s_len, d)
    grads = {
        "w_q": gq2.T @ c2,
        "w_k": gk2.T @ c2,
        "w_v": gv2.T @ c2,
        "w_out": grad_w_out,
    }
    grad_c = (gq2 @ p["w_q"] + gk2 @ p["w_k"] + gv2 @ p["w_v"]).reshape(b, s_len, d)
    return grad_c, grads


# ---------------------------------------------------------------------------
# gated fusion
# ---------------------------------------------------------------------------

def fuse(attn, decay_out, w_g):
    """Convex combination g*attn + (1-g)*decay with g = sigmoid(w_g)."""
    g = float(sigmoid(w_g[0]))
    out = g * attn + (1.0 - g) * decay_out
    return out, (attn, decay_out, g)


def fuse_backward(grad_out, cache):
    attn, decay_out, g = cache
    grad_attn = g * grad_out
    grad_decay = (1.0 - g) * grad_out
    grad_w_g = np.array([(grad_out * (attn - decay_out)).sum() * g * (1.0 - g)])
    return grad_attn, grad_decay, grad_w_g


# ---------------------------------------------------------------------------
# spiking FFN
# ---------------------------------------------------------------------------

def spiking_ffn(c, p, cfg: ModelConfig):
    """Up-project, spike-gate over the wide stream, down-project spikes.

    Returns (out, s_ffn, cache); s_ffn is exposed for sparsity
    instrumentation.
    """
    b, s_len, d = c.shape
    up = (c.reshape(b * s_len, d) @ p["w_up"].T).reshape(b, s_len, -1)
    s_ffn, gcache = gate_forward(up, cfg)
    d_ff = up.shape[-1]
    out = (s_ffn.reshape(b * s_len, d_ff) @ p["w_down"].T).reshape(b, s_len, d)
    return out, s_ffn, (c, up, s_ffn, gcache)


def spiking_ffn_backward(grad_out, cache, p, cfg: ModelConfig):
    c, up, s_ffn, gcache = cache
    b, s_len, d = c.shape
    d_ff = up.shape[-1]
    g2 = grad_out.reshape(b * s_len, d)
    grad_w_down = g2.T @ s_ffn.reshape(b * s_len, d_ff)
    grad_s = (g2 @ p["w_down"]).reshape(b, s_len, d_ff)
    grad_up = gate_backward(grad_s, gcache, cfg)
    gu2 = grad_up.reshape(b * s_len, d_ff)
    grad_w_up = gu2.T @ c.reshape(b * s_len, d)
    grad_c = (gu2 @ p["w_up"]).reshape(b, s_len, d)
    return grad_c, {"w_up": grad_w_up, "w_down": grad_w_down}


# ---------------------------------------------------------------------------
# full block
# ---------------------------------------------------------------------------

def block_forward(s_in, c_in, p, cfg: ModelConfig):
    """Run one block. Returns (s_out, c_out, telemetry, cache).

    p maps parameter names (w_tcam, gamma, w_q, w_k, w_v, w_out, w_g,
    ln1_gain, ln1_bias, ln2_gain, ln2_bias, w_up, w_down) to arrays;
    attention entries are absent under the no_attention / decay_only
    variants.
    """
    b, s_len, d = c_in.shape
    n_heads, d_k = cfg.n_heads, cfg.d_k

    z = (s_in.reshape(b * s_len, d) @ p["w_tcam"].T).reshape(b, s_len, n_heads, d_k)
    alpha = sigmoid(p["gamma"])
    h0 = np.zeros((b, n_heads, d_k), dtype=c_in.dtype)
    h_all, _, decay_cache = decay_aggregate(z, alpha, h0)
    decay_out = h_all.reshape(b, s_len, d)

    if cfg.has_attention:
        attn_out, attn_cache = local_attention(c_in, s_in, p, cfg)
        fused, fuse_cache = fuse(attn_out, decay_out, p["w_g"])
        gate_value = fuse_cache[2]
    else:
        fused, attn_cache, fuse_cache = decay_out, None, None
        gate_value = 0.0

    c1, ln1_cache = layer_norm(c_in + fused, p["ln1_gain"], p["ln1_bias"])
    s_mid, _ = gate_forward(c1, cfg)  # re-spike at the mixer boundary; telemetry only

    ffn_out, s_ffn, ffn_cache = spiking_ffn(c1, p, cfg)
    c2, ln2_cache = layer_norm(c1 + ffn_out, p["ln2_gain"], p["ln2_bias"])
    s_out, out_gate_cache = gate_forward(c2, cfg)

    telemetry = {
        "gate": gate_value,
        "alpha": np.array(alpha, copy=True),
        "sparsity_mid": float((s_mid == 0.0).mean()),
        "sparsity_ffn": float((s_ffn == 0.0).mean()),
        "sparsity_out": float((s_out == 0.0).mean()),
    }
    cache = (s_in, c_in, alpha, decay_cache, attn_cache, fuse_cache,
             ln1_cache, c1, ffn_cache, ln2_cache, out_gate_cache)
    return s_out, c2, telemetry, cache


def block_backward(grad_s_out, grad_c_out, cache, p, cfg: ModelConfig):
    """Returns (grad_s_in, grad_c_in, param grads dict)."""
    (s_in, c_in, alpha, decay_cache, attn_cache, fuse_cache,
     ln1_cache, c1, ffn_cache, ln2_cache, out_gate_cache) = cache
    b, s_len, d = c_in.shape
    grads = {}

    grad_c2 = grad_c_out + gate_backward(grad_s_out, out_gate_cache, cfg)
    grad_pre_ln2, grads["ln2_gain"], grads["ln2_bias"] = layer_norm_backward(grad_c2, ln2_cache)

    grad_c1 = grad_pre_ln2.copy()
    grad_ffn_c, ffn_grads = spiking_ffn_backward(grad_pre_ln2, ffn_cache, p, cfg)
    grads.update(ffn_grads)
    grad_c1 += grad_ffn_c

    grad_pre_ln1, grads["ln1_gain"], grads["ln1_bias"] = layer_norm_backward(grad_c1, ln1_cache)
    grad_c_in = grad_pre_ln1.copy()
    grad_fused = grad_pre_ln1

    if cfg.has_attention:
        grad_attn, grad_decay, grads["w_g"] = fuse_backward(grad_fused, fuse_cache)
        grad_c_attn, attn_grads = local_attention_backward(grad_attn, attn_cache, p)
        grads.update(attn_grads)
        grad_c_in += grad_c_attn
    else:
        grad_decay = grad_fused

    grad_h = grad_decay.reshape(b, s_len, cfg.n_heads, cfg.d_k)
    grad_z, grad_alpha, _ = decay_backward(grad_h, decay_cache)
    grads["gamma"] = grad_alpha * alpha * (1.0 - alpha)
    gz2 = grad_z.reshape(b * s_len, d)
    grads["w_tcam"] = gz2.T @ s_in.reshape(b * s_len, d)
    grad_s_in = (gz2 @ p["w_tcam"]).reshape(b, s_len, d)

    return grad_s_in, grad_c_in, grads
