"""Run configuration: a flat ``key = value`` document with typed defaults."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace

from .model import ModelConfig
from .strategies import INIT_KINDS, UPDATE_KINDS, StrategyConfig

MODES = ("tmr", "electra_baseline")
BUFFER_KEYS = ("buffer_capacity", "alpha", "priority_floor", "init_strategy",
               "update_strategy", "ridge", "ucb_alpha", "lsr_refit_every")


class ConfigError(ValueError):
    """Carries every problem found, not just the first."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def _opt(default, help, choices=None):
    return field(default=default, metadata={"help": help, "choices": choices})


@dataclass(frozen=True)
class TrainConfig:
    mode: str = _opt("tmr", "tmr (replay buffer) or electra_baseline (no buffer)", MODES)
    seed: int = _opt(0, "master seed; data, model, sampling and buffer streams derive from it")
    steps: int = _opt(2000, "pretraining iterations")
    batch_size: int = _opt(16, "mini-batch size K")
    buffer_capacity: int = _opt(1000, "memory buffer size N")
    lambda_: float = _opt(50.0, "weight of the discriminator loss in the combined objective")
    mask_rate: float = _opt(0.15, "fraction of content tokens masked per sequence")
    alpha: float = _opt(1.0, "prioritization exponent; 0 samples uniformly")
    priority_floor: bool = _opt(False, "clamp priorities to at least 1e-8")
    init_strategy: str = _opt("average", "initial weight of new entries", INIT_KINDS)
    update_strategy: str = _opt("loss_diff", "weight refresh for sampled entries", UPDATE_KINDS)
    ridge: float = _opt(1.0, "LSR ridge regularizer")
    ucb_alpha: float = _opt(1.0, "LinUCB exploration coefficient")
    lsr_refit_every: int = _opt(100, "iterations between LSR refits")
    lr: float = _opt(2e-3, "peak Adam learning rate")
    warmup_steps: int = _opt(100, "linear warmup iterations")
    max_seq_len: int = _opt(32, "window length including CLS")
    max_vocab: int = _opt(100, "vocabulary size including the 4 reserved ids")
    emb_dim: int = _opt(16, "shared embedding width")
    gen_layers: int = _opt(2, "generator blocks")
    gen_hidden: int = _opt(16, "generator width")
    gen_heads: int = _opt(2, "generator attention heads")
    disc_layers: int = _opt(2, "discriminator blocks")
    disc_hidden: int = _opt(32, "discriminator width")
    disc_heads: int = _opt(4, "discriminator attention heads")
    init_std: float = _opt(0.02, "std of the normal weight initializer")
    corpus: str = _opt("", "training corpus, one document per line (empty: bundled corpus)")
    out_dir: str = _opt("runs/tmr", "where metrics, report and checkpoints go")
    eval_every: int = _opt(100, "iterations between drift evaluations and buffer label audits")
    eval_batch_size: int = _opt(256, "sequences in the held-out drift batch")
    checkpoint_every: int = _opt(0, "iterations between checkpoints (0: final only)")
    timing: bool = _opt(True, "record wall-clock step_ms (off writes 0 for byte-stable CSVs)")
    jobs: int = _opt(1, "parallel fine-tuning workers for probe")

    @classmethod
    def keys(cls):
        return [config_key(f.name) for f in fields(cls)]

    def validate(self):
        problems = []
        for f in fields(self):
            ch = f.metadata.get("choices")
            if ch and getattr(self, f.name) not in ch:
                problems.append(f"{config_key(f.name)}: {getattr(self, f.name)!r} not in {ch}")
        positive = ("batch_size", "buffer_capacity", "lambda_", "ridge", "ucb_alpha", "lr",
                    "max_seq_len", "lsr_refit_every", "eval_every", "eval_batch_size", "jobs")
        for name in positive:
            if not getattr(self, name) > 0:
                problems.append(f"{config_key(name)} must be > 0")
        if self.steps < 0 or self.warmup_steps < 0 or self.checkpoint_every < 0:
            problems.append("steps, warmup_steps and checkpoint_every must be >= 0")
        if not 0 < self.mask_rate < 1:
            problems.append("mask_rate must lie in (0, 1)")
        if self.alpha < 0:
            problems.append("alpha must be >= 0")
        if self.max_vocab < 5:
            problems.append("max_vocab must be >= 5")
        if self.gen_hidden > self.disc_hidden:
            problems.append("gen_hidden must not exceed disc_hidden")
        for tower in ("gen", "disc"):
            if getattr(self, f"{tower}_hidden") % max(1, getattr(self, f"{tower}_heads")):
                problems.append(f"{tower}_hidden must be divisible by {tower}_heads")
        if problems:
            raise ConfigError(problems)
        return self

    def warnings(self):
        out = []
        if self.mode == "tmr" and self.buffer_capacity < self.batch_size:
            out.append("buffer_capacity < batch_size: the buffer can never hold a full batch")
        return out

    def model_config(self, vocab_size):
        return ModelConfig(
            vocab_size=vocab_size, max_seq_len=self.max_seq_len, emb_dim=self.emb_dim,
            gen_layers=self.gen_layers, gen_hidden=self.gen_hidden, gen_heads=self.gen_heads,
            disc_layers=self.disc_layers, disc_hidden=self.disc_hidden,
            disc_heads=self.disc_heads, init_std=self.init_std)

    def strategy_config(self):
        return StrategyConfig(init_kind=self.init_strategy, update_kind=self.update_strategy,
                              ridge=self.ridge, ucb_alpha=self.ucb_alpha,
                              feature_dim=self.max_seq_len, lsr_refit_every=self.lsr_refit_every)

    def with_overrides(self, **kw):
        return replace(self, **kw)

    def to_dict(self):
        return {config_key(f.name): getattr(self, f.name) for f in fields(self)}

    def dumps(self):
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.to_dict().items())

    def digest(self):
        return hashlib.sha256(self.dumps().encode()).hexdigest()


def config_key(attr):
    return attr.rstrip("_")


def attr_name(key):
    return "lambda_" if key == "lambda" else key


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def parse_value(f, raw):
    raw = raw.strip()
    t = type(f.default)
    if t is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if t is int:
        return int(raw)
    if t is float:
        return float(raw)
    return raw


def parse_pairs(pairs, base=None):
    """Apply ``(key, raw_value)`` pairs to ``base``; all problems are collected."""
    by_key = {config_key(f.name): f for f in fields(TrainConfig)}
    values, problems = {}, []
    for key, raw in pairs:
        f = by_key.get(key)
        if f is None:
            problems.append(f"unknown config key {key!r}")
            continue
        try:
            values[f.name] = parse_value(f, raw)
        except ValueError as exc:
            problems.append(f"{key}: {exc}")
    cfg = replace(base or TrainConfig(), **values)
    if problems:
        # report range problems in the values that did parse, too
        try:
            cfg.validate()
        except ConfigError as exc:
            problems += exc.problems
        raise ConfigError(problems)
    return cfg


def read_config_file(path):
    """Lines of ``key = value``; ``#`` starts a comment."""
    pairs, problems = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                problems.append(f"{path}:{lineno}: expected key = value")
                continue
            k, v = line.split("=", 1)
            pairs.append((k.strip(), v))
    if problems:
        raise ConfigError(problems)
    return pairs
