"""Spike-gated dual-path language model with hand-written backprop.

A from-scratch NumPy implementation of a byte-level language model
whose layers pair a binary spike stream (LIF neurons, surrogate
gradients) with a continuous stream mixed by an exponential-decay
recurrence and spike-gated windowed attention, plus the training loop,
decoding, checkpointing, and an analytical neuromorphic energy model.
"""

from .config import SURROGATES, VARIANTS, ModelConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .decode import (ContextOverflowError, DecodeConfig, adaptive_temperature, distinct_n,
                     generate, rep_n, token_weighted_ppl)
from .energy import (EnergyConstants, EnergyLedger, OpCounts, dense_baseline_energy,
                     dense_baseline_macs, discrepancy_report, effective_sparse,
                     energy_per_token, op_counts, ratio_report)
from .model import ForwardResult, SymbolicLightModel, init_params, param_budget
from .tokenizer import BOS_ID, EOS_ID, PAD_ID, VOCAB_SIZE, ByteTokenizer, load_vocab, save_vocab
from .training import (AuxCESettings, OptimState, Schedule, TrainingDivergenceError,
                       auxce_total, clip_gradients, cross_entropy, cyclic_batches, lr_at,
                       measure_sparsity, train_loop)

__version__ = "0.1.0"

__all__ = [
    "AuxCESettings", "BOS_ID", "ByteTokenizer", "ContextOverflowError", "DecodeConfig",
    "EOS_ID", "EnergyConstants", "EnergyLedger", "ForwardResult", "ModelConfig", "OpCounts",
    "OptimState", "PAD_ID", "SURROGATES", "Schedule", "SymbolicLightModel",
    "TrainingDivergenceError", "VARIANTS", "VOCAB_SIZE", "adaptive_temperature", "auxce_total",
    "clip_gradients", "cross_entropy", "cyclic_batches", "dense_baseline_energy",
    "dense_baseline_macs", "discrepancy_report", "distinct_n", "effective_sparse",
    "energy_per_token", "generate", "init_params", "load_checkpoint", "load_vocab", "lr_at",
    "measure_sparsity", "op_counts", "param_budget", "ratio_report", "rep_n", "save_checkpoint",
    "save_vocab", "token_weighted_ppl", "train_loop",
]
