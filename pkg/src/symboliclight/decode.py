"""Autoregressive decoding, diversity metrics, token-weighted perplexity.

Three decoding modes: greedy (argmax, lowest index on ties), top-k
temperature sampling, and entropy-adaptive sampling where the effective
temperature scales with the normalized entropy of the model's
next-token distribution:

    T_eff = clamp(base_T * H(p) / ln V, t_min, t_max)

so a confident (low-entropy) model samples nearly greedily and an
uncertain one samples hotter.

Generation is a naive full re-forward per emitted token; correctness
over speed. n-gram metrics operate on token ids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import softmax_rows


class ContextOverflowError(ValueError):
    """Prompt plus requested tokens exceed the model's sequence length."""


@dataclass
class DecodeConfig:
    mode: str = "greedy"          # greedy | sampling | adaptive
    temperature: float = 0.7
    top_k: int = 50
    base_temperature: float = 0.8
    t_min: float = 0.1
    t_max: float = 2.0
    max_tokens: int = 150
    seed: int = 0

    def validate(self, vocab_size=None):
        if self.mode not in ("greedy", "sampling", "adaptive"):
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if self.mode == "sampling" and self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if vocab_size is not None and self.top_k > vocab_size:
            raise ValueError("top_k exceeds the vocabulary")
        if self.t_min > self.t_max:
            raise ValueError("t_min must be <= t_max")
        if self.max_tokens < 0:
            raise ValueError("max_tokens must be >= 0")
        return self


def entropy_nats(p):
    """Shannon entropy in nats; zero-probability entries contribute 0."""
    p = np.asarray(p, dtype=np.float64)
    nz = p > 0.0
    return float(-(p[nz] * np.log(p[nz])).sum())


def adaptive_temperature(p, base_t, t_min=0.1, t_max=2.0):
    """Effective temperature, linear in normalized entropy and clamped."""
    v = len(p)
    ratio = entropy_nats(p) / math.log(v)
    return float(min(max(base_t * ratio, t_min), t_max))


def _draw(p, rng):
    """Inverse-CDF draw; deterministic given the rng state."""
    cum = np.cumsum(p)
    r = rng.random()
    return int(np.searchsorted(cum, r, side="right").clip(0, len(p) - 1))


def sample_next(logits, cfg: DecodeConfig, rng) -> int:
    """Pick the next token id from a [V] logit vector."""
    logits = np.asarray(logits, dtype=np.float64)
    if cfg.mode == "greedy":
        return int(np.argmax(logits))  # argmax takes the lowest index on ties
    if cfg.mode == "adaptive":
        probs = softmax_rows(logits[None, :])[0]
        temperature = adaptive_temperature(probs, cfg.base_temperature, cfg.t_min, cfg.t_max)
    else:
        temperature = cfg.temperature
    order = np.argsort(-logits, kind="stable")[: cfg.top_k]  # stable: ties keep lower index
    p = softmax_rows(logits[order][None, :] / temperature)[0]
    return int(order[_draw(p, rng)])


def generate(model, prompt, cfg: DecodeConfig):
    """Autoregressive continuation. Returns (all tokens, entropy trace).

    Each step re-forwards the whole context (the decay path could stream
    via its split-state property; attention would still need its window,
    so the reference implementation recomputes everything). The entropy
    trace records H(softmax(logits)) in nats at each emitted position.
    """
    cfg.validate(model.config.vocab_size)
    tokens = list(prompt)
    if len(tokens) < 1:
        raise ValueError("prompt must be non-empty")
    if len(tokens) + cfg.max_tokens > model.config.seq_len:
        raise ContextOverflowError(
            f"prompt ({len(tokens)}) + max_tokens ({cfg.max_tokens}) exceeds context {model.config.seq_len}")
    rng = np.random.default_rng(cfg.seed)
    entropies = []
    for _ in range(cfg.max_tokens):
        result = model.forward(np.asarray([tokens]))
        logits = result.logits[0, -1].astype(np.float64)
        entropies.append(entropy_nats(softmax_rows(logits[None, :])[0]))
        tokens.append(sample_next(logits, cfg, rng))
    return tokens, entropies


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def rep_n(tokens, n) -> float:
    """1 - distinct/total over the length-n windows of the sequence."""
    total = len(tokens) - n + 1
    if total < 1:
        raise ValueError(f"sequence of {len(tokens)} tokens has no {n}-grams")
    grams = {tuple(tokens[i:i + n]) for i in range(total)}
    return 1.0 - len(grams) / total


def distinct_n(tokens, n) -> float:
    """distinct/total n-gram ratio; complement of rep_n."""
    return 1.0 - rep_n(tokens, n)


def token_weighted_ppl(chunks) -> float:
    """exp(sum(T*L) / sum(T)) over (loss, token_count) chunks."""
    chunks = list(chunks)
    if not chunks:
        raise ValueError("no evaluation chunks")
    total_tokens = sum(t for _, t in chunks)
    if total_tokens < 1:
        raise ValueError("no tokens in evaluation chunks")
    weighted = sum(loss * t for loss, t in chunks)
    return math.exp(weighted / total_tokens)
