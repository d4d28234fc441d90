"""Model configuration and validation.

A single flat dataclass carries every architectural hyperparameter. The
same flat key=value codec is used by the CLI config files and by the
checkpoint header, so a config can round-trip through text losslessly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

VARIANTS = ("full", "static_prior", "no_attention", "decay_only", "topk_mask")
SURROGATES = ("atan", "scaled_sigmoid")


@dataclass
class ModelConfig:
    # architecture
    d_model: int = 768
    n_layers: int = 12
    n_heads: int = 12
    d_ff: int = 4096
    vocab_size: int = 48000
    seq_len: int = 512
    # spike gating
    chunk_size: int = 64
    beta: float = 0.95
    theta: float = 1.0
    clamp_lo: float = -3.0
    clamp_hi: float = 3.0
    kappa: float = 2.0
    sigmoid_alpha: float = 10.0
    surrogate: str = "atan"
    surrogate_reset: bool = False
    smooth_gate: bool = False
    # attention
    window: int = 256
    n_global: int = 4
    # head
    prior_scale: float = 0.1
    # init
    gate_init: float = 0.0
    gamma_init: float = math.log(9.0)
    init_std: float = 0.02
    # variants
    variant: str = "full"
    keep_ratio: float = 0.11
    topk_multiplicative: bool = False

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_p(self) -> int:
        return self.d_model // 4

    def validate(self) -> "ModelConfig":
        if self.d_model < 1 or self.n_layers < 1 or self.n_heads < 1:
            raise ValueError("extents must be >= 1")
        if self.d_ff < 1 or self.vocab_size < 1 or self.seq_len < 1:
            raise ValueError("extents must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model % 4 != 0:
            raise ValueError("d_model must be divisible by 4 (prior bottleneck)")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if not (self.clamp_lo < self.theta <= self.clamp_hi):
            raise ValueError("need clamp_lo < theta <= clamp_hi")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.n_global < 0:
            raise ValueError("n_global must be >= 0")
        if self.kappa <= 0 or self.sigmoid_alpha <= 0:
            raise ValueError("surrogate slopes must be positive")
        if self.surrogate not in SURROGATES:
            raise ValueError(f"unknown surrogate {self.surrogate!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; valid: {', '.join(VARIANTS)}")
        if not (0.0 < self.keep_ratio <= 1.0):
            raise ValueError("keep_ratio must be in (0, 1]")
        return self

    def with_variant(self, variant: str) -> "ModelConfig":
        return replace(self, variant=variant).validate()

    @property
    def has_attention(self) -> bool:
        return self.variant not in ("no_attention", "decay_only")

    @property
    def has_dynamic_prior(self) -> bool:
        return self.variant in ("full", "no_attention", "topk_mask")

    @property
    def has_static_prior(self) -> bool:
        return self.variant == "static_prior"

    def to_flat(self) -> dict:
        """Flat key=value view with deterministic key order."""
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_flat(cls, flat: dict) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in flat.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = coerce(value, getattr(cls(), key))
        return cls(**kwargs).validate()

    def canonical_text(self) -> str:
        """Sorted key=value lines; the checkpoint header representation."""
        flat = self.to_flat()
        return "".join(f"{k}={format_value(flat[k])}\n" for k in sorted(flat))

    @classmethod
    def from_canonical_text(cls, text: str) -> "ModelConfig":
        flat = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            flat[key.strip()] = value.strip()
        return cls.from_flat(flat)


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def coerce(value, template):
    """Coerce a string (or already-typed value) to the template's type."""
    if not isinstance(value, str):
        return value
    if isinstance(template, bool):
        low = value.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"bad boolean {value!r}")
    if isinstance(template, int):
        return int(value)
    if isinstance(template, float):
        return float(value)
    return value
