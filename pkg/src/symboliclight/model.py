"""Full model assembly: embed + spike-encode, L mixer blocks, prior head.

Parameters live in a flat name -> array dict (keys like "blocks.3.w_q"),
which keeps the hand-written backward auditable and makes checkpointing
and optimizer bookkeeping trivial. Ablation variants share the assembly:
variant-specific parameters simply do not exist in the dict, and the
forward dispatches on the config.

forward() returns logits plus an opaque cache; backward() consumes the
cache and upstream logit gradients and returns a grads dict with the
same keys as params. Two forwards with identical weights and inputs are
bitwise identical; nothing here draws randomness.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .block import block_backward, block_forward
from .config import ModelConfig
from .head import head_backward, head_forward
from .lif import gate_backward, gate_forward, topk_mask  # noqa: F401  (re-export)
from .numerics import layer_norm, layer_norm_backward


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict:
    """Weight matrices ~ N(0, init_std^2); gains 1, biases 0; fusion
    gates at gate_init; decay logits at gamma_init."""
    rng = np.random.default_rng(seed)
    d, d_ff, v = cfg.d_model, cfg.d_ff, cfg.vocab_size

    def w(*shape):
        return (rng.standard_normal(shape) * cfg.init_std).astype(dtype)

    p = {
        "embedding": w(v, d),
        "enc_ln_gain": np.ones(d, dtype=dtype),
        "enc_ln_bias": np.zeros(d, dtype=dtype),
    }
    for i in range(cfg.n_layers):
        pre = f"blocks.{i}."
        p[pre + "w_tcam"] = w(d, d)
        p[pre + "gamma"] = np.full(cfg.n_heads, cfg.gamma_init, dtype=dtype)
        if cfg.has_attention:
            for name in ("w_q", "w_k", "w_v", "w_out"):
                p[pre + name] = w(d, d)
            p[pre + "w_g"] = np.array([cfg.gate_init], dtype=dtype)
        p[pre + "ln1_gain"] = np.ones(d, dtype=dtype)
        p[pre + "ln1_bias"] = np.zeros(d, dtype=dtype)
        p[pre + "ln2_gain"] = np.ones(d, dtype=dtype)
        p[pre + "ln2_bias"] = np.zeros(d, dtype=dtype)
        p[pre + "w_up"] = w(d_ff, d)
        p[pre + "w_down"] = w(d, d_ff)
    p["final_ln_gain"] = np.ones(d, dtype=dtype)
    p["final_ln_bias"] = np.zeros(d, dtype=dtype)
    p["head.w_vocab"] = w(v, d)
    if cfg.has_dynamic_prior:
        p["head.w1"] = w(cfg.d_p, d)
        p["head.w2"] = w(v, cfg.d_p)
    elif cfg.has_static_prior:
        p["head.log_pi"] = np.zeros(v, dtype=dtype)
    return p


def param_budget(cfg: ModelConfig) -> dict:
    """Parameter counts by component group, from the config alone.

    Agrees exactly with param_count() of an instantiated model; the
    budget form exists so reference-scale configurations can be audited
    without allocating hundreds of megabytes of weights.
    """
    cfg.validate()
    d, d_ff, v, n_layers = cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_layers
    if cfg.has_dynamic_prior:
        prior = cfg.d_p * d + v * cfg.d_p
    elif cfg.has_static_prior:
        prior = v
    else:
        prior = 0
    groups = {
        "embedding": v * d,
        "attention_path": 4 * d * d * n_layers if cfg.has_attention else 0,
        "decay_path": d * d * n_layers,
        "ffn": 2 * d_ff * d * n_layers,
        "output_projection": v * d,
        "prior": prior,
        "gates_and_decay_factors": (cfg.n_heads + (1 if cfg.has_attention else 0)) * n_layers,
        "layer_norms": 2 * d + 4 * d * n_layers + 2 * d,
    }
    groups["total"] = sum(groups.values())
    return groups


@dataclass
class ForwardResult:
    logits: np.ndarray
    exit_logits: list = field(default_factory=list)
    telemetry: dict = field(default_factory=dict)
    cache: tuple = None


class SymbolicLightModel:
    """Owns a config and a flat parameter dict; pure forward/backward."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32, params=None):
        self.config = config.validate()
        self.dtype = dtype
        self.params = params if params is not None else init_params(config, seed, dtype)

    # -- parameter views ---------------------------------------------------

    def block_view(self, i: int) -> dict:
        pre = f"blocks.{i}."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    def head_view(self) -> dict:
        return {k[len("head."):]: v for k, v in self.params.items() if k.startswith("head.")}

    # -- forward / backward -------------------------------------------------

    def encode(self, tokens):
        """Embed + LayerNorm gives the continuous stream; the spike gate
        over it gives the binary stream. Returns (s, c, cache)."""
        cfg, p = self.config, self.params
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ValueError("tokens must be [B x S]")
        if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= cfg.vocab_size:
            raise ValueError("token id out of range")
        if tokens.shape[1] > cfg.seq_len:
            raise ValueError(f"sequence length {tokens.shape[1]} exceeds the model's {cfg.seq_len}")
        emb = p["embedding"][tokens]
        c0, enc_ln_cache = layer_norm(emb, p["enc_ln_gain"], p["enc_ln_bias"])
        s0, enc_gate_cache = gate_forward(c0, cfg)
        return s0, c0, (tokens, enc_ln_cache, enc_gate_cache)

    def forward(self, tokens, collect_exits: bool = False) -> ForwardResult:
        """Returns logits [B x S x V]; exit_logits has one entry per
        block (shared final norm + shared head) when collect_exits."""
        cfg, p = self.config, self.params
        s, c, enc_cache = self.encode(tokens)

        telemetry = {
            "sparsity_encoder": float((s == 0.0).mean()),
            "token_allzero_rate": float((np.abs(s).sum(axis=-1) == 0.0).mean()),
            "gates": [],
            "alphas": [],
            "sparsity_blocks": [],
        }
        block_caches = []
        block_cs = []
        for i in range(cfg.n_layers):
            s, c, tel, bcache = block_forward(s, c, self.block_view(i), cfg)
            block_caches.append(bcache)
            block_cs.append(c)
            telemetry["gates"].append(tel["gate"])
            telemetry["alphas"].append(tel["alpha"])
            telemetry["sparsity_blocks"].append(tel["sparsity_out"])

        c_final, final_ln_cache = layer_norm(c, p["final_ln_gain"], p["final_ln_bias"])
        logits, head_cache = head_forward(c_final, self.head_view(), cfg)

        exit_logits, exit_caches = [], []
        if collect_exits:
            for i in range(cfg.n_layers):
                ec, ecache = layer_norm(block_cs[i], p["final_ln_gain"], p["final_ln_bias"])
                el, ehead = head_forward(ec, self.head_view(), cfg)
                exit_logits.append(el)
                exit_caches.append((ecache, ehead))

        cache = (enc_cache, block_caches, final_ln_cache, head_cache, exit_caches)
        return ForwardResult(logits, exit_logits, telemetry, cache)

    def backward(self, result: ForwardResult, grad_logits, grad_exit_logits=None) -> dict:
        """Hand-rolled backprop. grad_exit_logits, when given, must have
        one entry per block (None entries are skipped). Returns a grads
        dict keyed like params."""
        cfg, p = self.config, self.params
        enc_cache, block_caches, final_ln_cache, head_cache, exit_caches = result.cache
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}

        def add_head_grads(hgrads):
            for k, v in hgrads.items():
                grads["head." + k] += v

        grad_c_final, hgrads = head_backward(grad_logits, head_cache, self.head_view(), cfg)
        add_head_grads(hgrads)
        grad_c, g_gain, g_bias = layer_norm_backward(grad_c_final, final_ln_cache)
        grads["final_ln_gain"] += g_gain
        grads["final_ln_bias"] += g_bias

        grad_s = np.zeros_like(grad_c)
        for i in range(cfg.n_layers - 1, -1, -1):
            if grad_exit_logits is not None and grad_exit_logits[i] is not None:
                ecache, ehead = exit_caches[i]
                g_ec, ehgrads = head_backward(grad_exit_logits[i], ehead, self.head_view(), cfg)
                add_head_grads(ehgrads)
                g_c_exit, g_gain, g_bias = layer_norm_backward(g_ec, ecache)
                grads["final_ln_gain"] += g_gain
                grads["final_ln_bias"] += g_bias
                grad_c = grad_c + g_c_exit
            grad_s, grad_c, bgrads = block_backward(grad_s, grad_c, block_caches[i], self.block_view(i), cfg)
            pre = f"blocks.{i}."
            for k, v in bgrads.items():
                grads[pre + k] += v

        tokens, enc_ln_cache, enc_gate_cache = enc_cache
        grad_c0 = grad_c + gate_backward(grad_s, enc_gate_cache, cfg)
        grad_emb, g_gain, g_bias = layer_norm_backward(grad_c0, enc_ln_cache)
        grads["enc_ln_gain"] += g_gain
        grads["enc_ln_bias"] += g_bias
        np.add.at(grads["embedding"], tokens, grad_emb)
        return grads

    # -- accounting ----------------------------------------------------------

    def param_count(self) -> dict:
        """Named parameter budget by component group, plus total."""
        groups = {
            "embedding": 0, "attention_path": 0, "decay_path": 0, "ffn": 0,
            "output_projection": 0, "prior": 0, "gates_and_decay_factors": 0,
            "layer_norms": 0,
        }
        for name, arr in self.params.items():
            n = arr.size
            leaf = name.rsplit(".", 1)[-1]
            if name == "embedding":
                groups["embedding"] += n
            elif leaf in ("w_q", "w_k", "w_v", "w_out"):
                groups["attention_path"] += n
            elif leaf == "w_tcam":
                groups["decay_path"] += n
            elif leaf in ("w_up", "w_down"):
                groups["ffn"] += n
            elif name == "head.w_vocab":
                groups["output_projection"] += n
            elif name in ("head.w1", "head.w2", "head.log_pi"):
                groups["prior"] += n
            elif leaf in ("gamma", "w_g"):
                groups["gates_and_decay_factors"] += n
            else:
                groups["layer_norms"] += n
        groups["total"] = sum(groups.values())
        return groups
