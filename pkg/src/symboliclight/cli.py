"""Command-line entry point: train, eval, generate, energy, ablate.

Run configuration is a flat key=value text file (one key per line, #
comments allowed) mirrored exactly by command-line overrides: any
`--key value` pair not consumed by a command's own flags is treated as
a config override, with file values applied first and flag values
winning. Keys route by name to the model, schedule, decode, or run
sections; unknown keys are usage errors.

Exit codes are a stable contract: 0 success, 2 usage or configuration
error, 3 numeric failure during training. Every command is
deterministic given --seed (or the SL_SEED environment fallback).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, fields, replace

import numpy as np

from .config import VARIANTS, ModelConfig, coerce
from .decode import ContextOverflowError, DecodeConfig, distinct_n, generate, rep_n, token_weighted_ppl
from .energy import EnergyConstants, format_report
from .checkpoint import load_checkpoint
from .model import SymbolicLightModel
from .tokenizer import EOS_ID, VOCAB_SIZE, ByteTokenizer
from .training import (AuxCESettings, Schedule, TrainingDivergenceError, cross_entropy,
                       train_loop)


class UsageError(ValueError):
    """Bad flags, config keys, or unresolvable paths; maps to exit 2."""


RUN_DEFAULTS = {"seed": None, "steps": 200, "batch_size": 4,
                "checkpoint_interval": 0, "auxce_lam": 0.3, "auxce_rho": 0.5}

MODEL_KEYS = {f.name for f in fields(ModelConfig)}
SCHEDULE_KEYS = {f.name for f in fields(Schedule)}
DECODE_KEYS = {f.name for f in fields(DecodeConfig)} - {"seed"}
RUN_KEYS = set(RUN_DEFAULTS)


@dataclass
class RunConfig:
    model: ModelConfig
    schedule: Schedule
    decode: DecodeConfig
    seed: int = 0
    steps: int = 200
    batch_size: int = 4
    checkpoint_interval: int = 0
    auxce_lam: float = 0.3
    auxce_rho: float = 0.5


def parse_flat_file(path) -> dict:
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    flat = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            flat[key.strip()] = value.strip()
    return flat


def parse_override_pairs(rest) -> dict:
    """Leftover `--key value` (or `--key=value`) pairs as raw strings."""
    out = {}
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise UsageError(f"unexpected argument {tok!r}")
        body = tok[2:]
        if "=" in body:
            key, _, value = body.partition("=")
            i += 1
        else:
            key = body
            if i + 1 >= len(rest):
                raise UsageError(f"missing value for --{key}")
            value = rest[i + 1]
            i += 2
        out[key.replace("-", "_")] = value
    return out


def resolve_seed(explicit):
    """Explicit value wins; env SL_SEED is the fallback; default 0."""
    if explicit is not None:
        return int(explicit)
    env = os.environ.get("SL_SEED")
    return int(env) if env is not None else 0


def build_run_config(flat: dict) -> RunConfig:
    model_kw, sched_kw, dec_kw = {}, {}, {}
    run_kw = dict(RUN_DEFAULTS)
    base_sched, base_dec = Schedule(), DecodeConfig()
    for key, value in flat.items():
        if key in MODEL_KEYS:
            model_kw[key] = value
        elif key in SCHEDULE_KEYS:
            sched_kw[key] = coerce(value, getattr(base_sched, key))
        elif key in DECODE_KEYS:
            dec_kw[key] = coerce(value, getattr(base_dec, key))
        elif key in RUN_KEYS:
            template = 0 if key == "seed" else RUN_DEFAULTS[key]
            run_kw[key] = coerce(value, template)
        else:
            raise UsageError(f"unknown config key {key!r}")
    model = ModelConfig.from_flat(model_kw)
    run_kw["seed"] = resolve_seed(run_kw["seed"])
    return RunConfig(model=model, schedule=replace(base_sched, **sched_kw),
                     decode=replace(base_dec, **dec_kw), **run_kw)


def load_corpus(paths) -> np.ndarray:
    """Concatenated byte streams with an end-of-text id between files."""
    tok = ByteTokenizer()
    stream = []
    for path in paths:
        if not os.path.isfile(path):
            raise UsageError(f"data file not found: {path}")
        with open(path, "rb") as fh:
            data = fh.read()
        if data:
            stream.extend(tok.encode(data))
            stream.append(EOS_ID)
    if len(stream) < 2:
        raise UsageError("corpus is empty")
    return np.asarray(stream, dtype=np.int64)


def _run_training(args, overrides, variant=None) -> int:
    flat = parse_flat_file(args.config) if args.config else {}
    flat.update(overrides)
    run = build_run_config(flat)
    if variant is not None:
        run.model = run.model.with_variant(variant)
    stream = load_corpus(args.data)
    if int(stream.max()) >= run.model.vocab_size:
        raise UsageError(f"corpus token id {int(stream.max())} exceeds vocab_size "
                         f"{run.model.vocab_size}")
    tag = variant if variant is not None else "train"
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, f"{tag}.log")
    ckpt_path = os.path.join(args.out, f"{tag}.ckpt" if variant else "model.ckpt")
    model = SymbolicLightModel(run.model, seed=run.seed)
    auxce = AuxCESettings(run.auxce_lam, run.auxce_rho) if run.auxce_lam > 0 else None
    with open(log_path, "w", encoding="utf-8", newline="\n") as log:
        log.write(f"variant={run.model.variant}\n")
        log.write(f"seed={run.seed}\n")
        train_loop(model, stream, run.schedule, run.steps,
                   batch_size=run.batch_size, auxce=auxce,
                   log_fn=lambda line: log.write(line + "\n"),
                   checkpoint_path=ckpt_path,
                   checkpoint_interval=run.checkpoint_interval)
    print(f"wrote {log_path} and {ckpt_path}")
    return 0


def cmd_train(args, overrides) -> int:
    return _run_training(args, overrides)


def cmd_ablate(args, overrides) -> int:
    return _run_training(args, overrides, variant=args.variant)


def _load_model(path) -> SymbolicLightModel:
    if not os.path.isfile(path):
        raise UsageError(f"checkpoint not found: {path}")
    config, params = load_checkpoint(path)
    return SymbolicLightModel(config, params=params)


def _eval_file(model, tokens, batch_size=8):
    """(loss, count) chunks over non-overlapping next-token windows."""
    seq_len = model.config.seq_len
    chunks = []
    for start in range(0, len(tokens) - 1, seq_len):
        window = tokens[start:start + seq_len + 1]
        inputs = np.asarray([window[:-1]], dtype=np.int64)
        targets = np.asarray(window[1:], dtype=np.int64)
        result = model.forward(inputs)
        v = result.logits.shape[-1]
        loss, count, _ = cross_entropy(result.logits.reshape(-1, v), targets)
        chunks.append((loss, count))
    return chunks


def cmd_eval(args, overrides) -> int:
    if overrides:
        raise UsageError(f"eval takes no config overrides: {sorted(overrides)}")
    model = _load_model(args.checkpoint)
    if model.config.vocab_size < VOCAB_SIZE:
        raise UsageError(f"checkpoint vocab_size {model.config.vocab_size} is smaller "
                         f"than the byte vocabulary ({VOCAB_SIZE})")
    tok = ByteTokenizer()
    all_chunks = []
    for path in args.data:
        if not os.path.isfile(path):
            raise UsageError(f"data file not found: {path}")
        with open(path, "rb") as fh:
            tokens = tok.encode(fh.read())
        if len(tokens) < 2:
            raise UsageError(f"data file too short to evaluate: {path}")
        chunks = _eval_file(model, tokens)
        all_chunks.extend(chunks)
        ppl = token_weighted_ppl(chunks)
        print(f"{path} ppl={ppl:.6f} tokens={sum(t for _, t in chunks)}")
    overall = token_weighted_ppl(all_chunks)
    print(f"overall ppl={overall:.6f} tokens={sum(t for _, t in all_chunks)}")
    return 0


def cmd_generate(args, overrides) -> int:
    if overrides:
        raise UsageError(f"generate takes no config overrides: {sorted(overrides)}")
    model = _load_model(args.checkpoint)
    seed = resolve_seed(args.seed)
    decode_cfg = DecodeConfig(mode=args.mode, temperature=args.temperature,
                              top_k=args.top_k, base_temperature=args.base_temperature,
                              t_min=args.t_min, t_max=args.t_max,
                              max_tokens=args.max_tokens, seed=seed)
    tok = ByteTokenizer()
    prompt_ids = tok.encode(args.prompt.encode("utf-8"))
    if not prompt_ids:
        raise UsageError("prompt must be non-empty")
    tokens, _ = generate(model, prompt_ids, decode_cfg)
    record = {
        "prompt": args.prompt,
        "tokens": [int(t) for t in tokens],
        "text": tok.decode_text(tokens),
        "mode": args.mode,
        "seed": seed,
        "rep_4": rep_n(tokens, 4) if len(tokens) >= 4 else None,
    }
    for n in (1, 2, 3, 4):
        record[f"distinct_{n}"] = distinct_n(tokens, n) if len(tokens) >= n else None
    print(json.dumps(record, sort_keys=True))
    return 0


def cmd_energy(args, overrides) -> int:
    bad = set(overrides) - MODEL_KEYS
    if bad:
        raise UsageError(f"energy accepts model config overrides only: {sorted(bad)}")
    cfg = ModelConfig.from_flat(overrides)
    if not (0.0 <= args.sparsity <= 1.0):
        raise UsageError(f"sparsity must lie in [0, 1], got {args.sparsity}")
    regime = {"dense": "dense_accelerator"}.get(args.regime, args.regime)
    print(format_report(cfg, EnergyConstants(), regime, args.sparsity))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="symboliclight",
                                     description="spike-gated dual-path language model toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a model on raw byte corpora")
    train.add_argument("--config", help="flat key=value run config file")
    train.add_argument("--data", action="append", required=True,
                       help="raw byte corpus file (repeatable)")
    train.add_argument("--out", default="run", help="output directory for log and checkpoint")
    train.set_defaults(fn=cmd_train)

    ablate = sub.add_parser("ablate", help="train an ablation variant under the same budget")
    ablate.add_argument("--variant", required=True, choices=VARIANTS)
    ablate.add_argument("--config", help="flat key=value run config file")
    ablate.add_argument("--data", action="append", required=True)
    ablate.add_argument("--out", default="run")
    ablate.set_defaults(fn=cmd_ablate)

    ev = sub.add_parser("eval", help="per-file and token-weighted overall perplexity")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", action="append", required=True)
    ev.set_defaults(fn=cmd_eval)

    gen = sub.add_parser("generate", help="decode a continuation and report diversity metrics")
    gen.add_argument("--checkpoint", required=True)
    gen.add_argument("--prompt", required=True)
    gen.add_argument("--mode", default="greedy", choices=("greedy", "sampling", "adaptive"))
    gen.add_argument("--temperature", type=float, default=0.7)
    gen.add_argument("--top-k", type=int, default=50)
    gen.add_argument("--base-temperature", type=float, default=0.8)
    gen.add_argument("--t-min", type=float, default=0.1)
    gen.add_argument("--t-max", type=float, default=2.0)
    gen.add_argument("--max-tokens", type=int, default=150)
    gen.add_argument("--seed", type=int, default=None)
    gen.set_defaults(fn=cmd_generate)

    energy = sub.add_parser("energy", help="analytical per-token energy report")
    energy.add_argument("--sparsity", type=float, default=0.89)
    energy.add_argument("--regime", default="neuromorphic",
                        choices=("neuromorphic", "dense", "dense_accelerator"))
    energy.set_defaults(fn=cmd_energy)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    try:
        overrides = parse_override_pairs(rest)
        return args.fn(args, overrides)
    except TrainingDivergenceError as err:
        print(f"error: training diverged: {err}", file=sys.stderr)
        return 3
    except (UsageError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
