"""Shared gradient-check helpers and toy-config factories.

Finite-difference checks run in the smooth-gate mode: the hard spike
threshold is replaced by the antiderivative of the surrogate (so the
analytic backward is the true derivative of the forward) and the reset
is differentiated through. All FD work is float64 with a central step
of 1e-5; whole-model checks widen the step to 1e-4 because accumulated
round-off through the block stack dominates differences that small.
"""

import numpy as np

from symboliclight.config import ModelConfig
from symboliclight.numerics import rel_error

FD_STEP = 1e-5


def toy_config(**overrides) -> ModelConfig:
    """Small hard-threshold config for fast structural tests."""
    base = dict(d_model=16, n_layers=2, n_heads=2, d_ff=32, vocab_size=32,
                seq_len=12, chunk_size=4, window=4, n_global=2)
    base.update(overrides)
    return ModelConfig(**base).validate()


def smooth_config(**overrides) -> ModelConfig:
    """Gradient-check mode: smooth gate + reset differentiated through."""
    overrides.setdefault("smooth_gate", True)
    overrides.setdefault("surrogate_reset", True)
    return toy_config(**overrides)


def fd_grad_arrays(loss_fn, arrays: dict, h: float = FD_STEP) -> dict:
    """Central-difference gradient of loss_fn() w.r.t. each named array.

    Perturbs entries in place (arrays must be float64) and restores
    them, so loss_fn can close over the same storage.
    """
    grads = {}
    for name, arr in arrays.items():
        assert arr.dtype == np.float64, f"{name} must be float64 for FD"
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn()
            flat[i] = orig - h
            f_minus = loss_fn()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
        grads[name] = g
    return grads


def max_rel_err(analytic: dict, numeric: dict) -> float:
    """Worst per-array scale-normalized gradient disagreement."""
    assert set(analytic) == set(numeric)
    return max(rel_error(analytic[k], numeric[k]) for k in analytic)


def params_to_float64(params: dict) -> dict:
    return {k: v.astype(np.float64) for k, v in params.items()}
