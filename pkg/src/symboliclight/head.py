"""Decoding head: vocabulary projection plus a context-conditioned prior.

The default head adds a small bottleneck MLP over the continuous stream,
scaled by prior_scale so the prior cannot dominate the direct
projection:

    logits = W_vocab c + prior_scale * (W2 gelu(W1 c))

The static_prior variant replaces the MLP with a learned
position-independent bias over the vocabulary; decay_only drops the
prior entirely. W_vocab is never tied to the input embedding.
"""

from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .numerics import gelu, gelu_backward


def dynamic_prior_logits(c, p, cfg: ModelConfig):
    """logits = W_vocab c + prior_scale * (W2 gelu(W1 c)).

    c is [.. x D]; returns (logits [.. x V], cache).
    """
    lead = c.shape[:-1]
    d = c.shape[-1]
    c2 = c.reshape(-1, d)
    base = c2 @ p["w_vocab"].T
    hidden = c2 @ p["w1"].T
    act, gelu_cache = gelu(hidden)
    prior = act @ p["w2"].T
    logits = base + cfg.prior_scale * prior
    return logits.reshape(*lead, -1), (c2, hidden, act, gelu_cache, lead)


def dynamic_prior_backward(grad_logits, cache, p, cfg: ModelConfig):
    c2, hidden, act, gelu_cache, lead = cache
    g2 = grad_logits.reshape(-1, grad_logits.shape[-1])
    grads = {"w_vocab": g2.T @ c2}
    grad_c = g2 @ p["w_vocab"]
    grad_prior = cfg.prior_scale * g2
    grads["w2"] = grad_prior.T @ act
    grad_act = grad_prior @ p["w2"]
    grad_hidden = gelu_backward(grad_act, gelu_cache)
    grads["w1"] = grad_hidden.T @ c2
    grad_c += grad_hidden @ p["w1"]
    return grad_c.reshape(*lead, -1), grads


def static_prior_logits(c, p):
    """logits = W_vocab c + log_pi (learned, position independent)."""
    lead = c.shape[:-1]
    c2 = c.reshape(-1, c.shape[-1])
    logits = c2 @ p["w_vocab"].T + p["log_pi"][None, :]
    return logits.reshape(*lead, -1), (c2, lead)


def static_prior_backward(grad_logits, cache, p):
    c2, lead = cache
    g2 = grad_logits.reshape(-1, grad_logits.shape[-1])
    grads = {"w_vocab": g2.T @ c2, "log_pi": g2.sum(axis=0)}
    grad_c = (g2 @ p["w_vocab"]).reshape(*lead, -1)
    return grad_c, grads


def plain_logits(c, p):
    """logits = W_vocab c with no prior (decay_only variant)."""
    lead = c.shape[:-1]
    c2 = c.reshape(-1, c.shape[-1])
    logits = c2 @ p["w_vocab"].T
    return logits.reshape(*lead, -1), (c2, lead)


def plain_backward(grad_logits, cache, p):
    c2, lead = cache
    g2 = grad_logits.reshape(-1, grad_logits.shape[-1])
    grads = {"w_vocab": g2.T @ c2}
    grad_c = (g2 @ p["w_vocab"]).reshape(*lead, -1)
    return grad_c, grads


def head_forward(c, p, cfg: ModelConfig):
    """Dispatch on variant. Returns (logits, cache)."""
    if cfg.has_dynamic_prior:
        return dynamic_prior_logits(c, p, cfg)
    if cfg.has_static_prior:
        return static_prior_logits(c, p)
    return plain_logits(c, p)


def head_backward(grad_logits, cache, p, cfg: ModelConfig):
    if cfg.has_dynamic_prior:
        return dynamic_prior_backward(grad_logits, cache, p, cfg)
    if cfg.has_static_prior:
        return static_prior_backward(grad_logits, cache, p)
    return plain_backward(grad_logits, cache, p)
