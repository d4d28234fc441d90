"""Losses, AdamW, LR schedule, clipping, sparsity metrics, train loop.

The loss used for backward is the token-mean cross entropy; token counts
are carried separately so evaluation can aggregate token-weighted
perplexity. The optional deep-supervision term adds per-block exit
losses through the shared readout, exponentially down-weighting
shallower blocks:

    total = main + lam * sum_i rho^(L-1-i) * exit_i

Training is deterministic given the seed: batches come from a cyclic
pad-free packer over the corpus stream and nothing else draws
randomness, so two runs with the same seed produce byte-identical
telemetry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import save_checkpoint
from .numerics import NumericError


class TrainingDivergenceError(RuntimeError):
    """Non-finite loss or gradient; carries the failing step index."""

    def __init__(self, step, what):
        super().__init__(f"step {step}: {what}")
        self.step = step


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cross_entropy(logits, targets, pad_id=None):
    """Mean negative log-softmax over non-pad targets.

    logits [N x V], targets [N]. Returns (loss, token_count, cache);
    pad positions contribute nothing to either.
    """
    n, v = logits.shape
    targets = np.asarray(targets)
    keep = np.ones(n, dtype=bool) if pad_id is None else targets != pad_id
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross entropy over an empty non-pad set")
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1, keepdims=True)
    log_probs = logits - m - np.log(z)
    nll = -log_probs[np.arange(n), np.where(keep, targets, 0)]
    loss = float(nll[keep].sum() / count)
    return loss, count, (e / z, targets, keep, count)


def cross_entropy_backward(cache):
    """d(mean non-pad NLL)/dlogits = (softmax - onehot)/count, 0 on pads."""
    probs, targets, keep, count = cache
    grad = probs.copy()
    n = grad.shape[0]
    grad[np.arange(n), np.where(keep, targets, 0)] -= 1.0
    grad *= keep[:, None] / count
    return grad


def auxce_total(main, exits, lam, rho):
    """total = main + lam * sum_i rho^(L-1-i) * exit_i, i from 0 (shallowest)."""
    n = len(exits)
    if n < 1:
        raise ValueError("need at least one exit loss")
    return main + lam * sum(rho ** (n - 1 - i) * exits[i] for i in range(n))


# ---------------------------------------------------------------------------
# schedule / clipping / optimizer
# ---------------------------------------------------------------------------

@dataclass
class Schedule:
    peak_lr: float = 3e-4
    warmup_steps: int = 2000
    total_steps: int = 10000
    floor_lr: float = 0.0


def lr_at(step, sched: Schedule):
    """Linear warmup to peak, then cosine to the floor."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < sched.warmup_steps:
        return sched.peak_lr * step / sched.warmup_steps
    if step >= sched.total_steps:
        return sched.floor_lr
    span = sched.total_steps - sched.warmup_steps
    progress = (step - sched.warmup_steps) / span
    return sched.floor_lr + 0.5 * (sched.peak_lr - sched.floor_lr) * (1.0 + math.cos(math.pi * progress))


def clip_gradients(grads, max_norm=1.0):
    """Scale all gradients by max_norm/norm when the global L2 norm
    exceeds max_norm. Mutates grads; returns the pre-clip norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if not math.isfinite(norm):
        raise ValueError("non-finite gradient norm")
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def no_decay_param(name: str) -> bool:
    """Gains, biases, fusion gates, decay logits, and the static prior
    bias are excluded from weight decay."""
    leaf = name.rsplit(".", 1)[-1]
    return "gain" in leaf or "bias" in leaf or leaf in ("gamma", "w_g", "log_pi")


@dataclass
class OptimState:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, **kw):
        state = cls(**kw)
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
        return state


def adamw_step(params, grads, state: OptimState, lr):
    """One decoupled-decay AdamW update, in place:
    theta <- theta - lr * (mhat / (sqrt(vhat) + eps) + wd * theta)."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay != 0.0 and not no_decay_param(name):
            update = update + state.weight_decay * p
        p -= lr * update


# ---------------------------------------------------------------------------
# instrumentation
# ---------------------------------------------------------------------------

def measure_sparsity(s):
    """(fraction of zero elements, fraction of all-zero token rows)
    for a spike tensor [B x S x D]."""
    per_element = float((s == 0.0).mean())
    token_allzero = float((np.abs(s).sum(axis=-1) == 0.0).mean())
    return per_element, token_allzero


LOG_FIELDS = ("step", "lr", "main_loss", "total_loss", "grad_norm_preclip",
              "sparsity_encoder", "token_allzero_rate")


def format_log_line(rec: dict) -> str:
    parts = [f"step={rec['step']}", f"lr={rec['lr']:.8f}"]
    for key in LOG_FIELDS[2:]:
        parts.append(f"{key}={rec[key]:.6f}")
    return " ".join(parts)


# ---------------------------------------------------------------------------
# batching and the loop
# ---------------------------------------------------------------------------

def cyclic_batches(stream, batch_size, seq_len):
    """Deterministic pad-free packing: each row takes the next seq_len+1
    tokens from the cyclic corpus stream (inputs = window[:-1], targets
    = window[1:]), the cursor advancing seq_len per row."""
    stream = np.asarray(stream, dtype=np.int64)
    n = len(stream)
    if n == 0:
        raise ValueError("empty corpus")
    cursor = 0
    while True:
        xs = np.empty((batch_size, seq_len), dtype=np.int64)
        ys = np.empty((batch_size, seq_len), dtype=np.int64)
        for b in range(batch_size):
            idx = (cursor + np.arange(seq_len + 1)) % n
            window = stream[idx]
            xs[b] = window[:-1]
            ys[b] = window[1:]
            cursor = (cursor + seq_len) % n
        yield xs, ys


@dataclass
class AuxCESettings:
    lam: float = 0.3
    rho: float = 0.5


def train_loop(model, stream, schedule: Schedule, steps: int, *,
               batch_size=4, clip_norm=1.0, auxce: AuxCESettings | None = None,
               optim: OptimState | None = None, log_fn=None,
               checkpoint_path=None, checkpoint_interval=0):
    """Run `steps` optimizer steps. Returns the telemetry record list.

    Deterministic given the model's weights and the corpus; emits one
    telemetry record per step and optionally writes checkpoints.
    """
    cfg = model.config
    if optim is None:
        optim = OptimState.for_params(model.params)
    batches = cyclic_batches(stream, batch_size, cfg.seq_len)
    records = []
    n_layers = cfg.n_layers
    for step in range(1, steps + 1):
        lr = lr_at(step, schedule)
        xs, ys = next(batches)
        try:
            result = model.forward(xs, collect_exits=auxce is not None)
        except NumericError as err:
            raise TrainingDivergenceError(step, str(err)) from err
        flat_targets = ys.reshape(-1)
        v = result.logits.shape[-1]
        main_loss, _, ce_cache = cross_entropy(result.logits.reshape(-1, v), flat_targets)

        exit_grads = None
        if auxce is not None:
            exit_losses = []
            exit_grads = []
            for i in range(n_layers):
                el, _, ecache = cross_entropy(result.exit_logits[i].reshape(-1, v), flat_targets)
                exit_losses.append(el)
                weight = auxce.lam * auxce.rho ** (n_layers - 1 - i)
                exit_grads.append(weight * cross_entropy_backward(ecache).reshape(result.logits.shape))
            total_loss = auxce_total(main_loss, exit_losses, auxce.lam, auxce.rho)
        else:
            total_loss = main_loss
        if not math.isfinite(total_loss):
            raise TrainingDivergenceError(step, f"non-finite loss {total_loss}")

        grad_logits = cross_entropy_backward(ce_cache).reshape(result.logits.shape)
        grads = model.backward(result, grad_logits, exit_grads)
        try:
            preclip = clip_gradients(grads, clip_norm)
        except ValueError as err:
            raise TrainingDivergenceError(step, str(err)) from err
        adamw_step(model.params, grads, optim, lr)

        rec = {
            "step": step,
            "lr": lr,
            "main_loss": main_loss,
            "total_loss": total_loss,
            "grad_norm_preclip": preclip,
            "sparsity_encoder": result.telemetry["sparsity_encoder"],
            "token_allzero_rate": result.telemetry["token_allzero_rate"],
            "gates": list(result.telemetry["gates"]),
            "alphas": [a.tolist() for a in result.telemetry["alphas"]],
            "sparsity_blocks": list(result.telemetry["sparsity_blocks"]),
        }
        records.append(rec)
        if log_fn is not None:
            log_fn(format_log_line(rec))
        if checkpoint_path and checkpoint_interval and step % checkpoint_interval == 0:
            save_checkpoint(checkpoint_path, model)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model)
    return records
