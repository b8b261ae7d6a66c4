"""Joint generator/discriminator pretraining with an optional replay buffer."""

from __future__ import annotations

import csv
import json
import logging
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .checkpoint import write_checkpoint
from .config import TrainConfig
from .gradcheck import per_example_grad_norms
from .model import (ModelParams, discriminator_loss, forward_discriminator,
                    forward_generator, generator_loss, grad_bound_norms,
                    sample_replacements)
from .optim import Adam
from .replay_buffer import ReplayBuffer, StaleEntryError
from .strategies import (WeightPolicy, update_weight_grad_bound,
                         update_weight_grad_norm, update_weight_loss_diff)
from .text import (assemble_corrupted, bundled_path, load_corpus_sequences,
                   mask_sequence, replaced_fraction)

log = logging.getLogger(__name__)

CSV_COLUMNS = ("step", "loss_g", "loss_d", "loss_combined", "drift_exact_recovery",
               "fresh_replaced_fraction", "buffer_live", "buffer_mean_w", "buffer_min_w",
               "buffer_max_w", "step_ms")


class TrainingAborted(RuntimeError):
    def __init__(self, step, cause):
        self.step = step
        super().__init__(f"aborted at step {step}: {cause}")


@dataclass
class StepMetrics:
    step: int
    loss_g: float
    loss_d: float
    loss_combined: float
    drift_exact_recovery: float
    fresh_replaced_fraction: float
    buffer_live: int
    buffer_mean_w: float
    buffer_min_w: float
    buffer_max_w: float
    step_ms: float
    cold: bool = False
    sampled_ids: list = field(default_factory=list)
    age_mean: float = 0.0
    age_max: int = 0
    update_attempts: int = 0
    stale_updates: int = 0
    backward_calls: int = 0

    def row(self):
        return [self.step, self.loss_g, self.loss_d, self.loss_combined,
                self.drift_exact_recovery, self.fresh_replaced_fraction, self.buffer_live,
                self.buffer_mean_w, self.buffer_min_w, self.buffer_max_w, self.step_ms]


def drift_metric(params, eval_batch, seed=0):
    """Fraction of masked positions where a sampled replacement equals the original."""
    out = forward_generator(params, eval_batch)
    sampled = np.concatenate(sample_replacements(out, np.random.default_rng(seed)))
    return float(np.mean(sampled == out.targets))


def make_eval_batch(sequences, n, mask_rate, rng):
    idx = rng.integers(len(sequences), size=n)
    return [mask_sequence(sequences[i], mask_rate, rng) for i in idx]


class Trainer:
    """Holds model, optimizer, buffer and rng streams; ``step()`` runs one iteration."""

    def __init__(self, cfg: TrainConfig, sequences, vocab):
        cfg.validate()
        self.cfg = cfg
        self.vocab = vocab
        self.sequences = sequences
        root = np.random.SeedSequence(cfg.seed)
        init_ss, data_ss, gen_ss, buf_ss, eval_ss = root.spawn(5)
        self.params = ModelParams.init(cfg.model_config(len(vocab)), seed=init_ss)
        self.opt = Adam(self.params.params, lr=cfg.lr, warmup_steps=cfg.warmup_steps)
        self.data_rng = np.random.default_rng(data_ss)
        self.gen_rng = np.random.default_rng(gen_ss)
        self.buffer_rng = np.random.default_rng(buf_ss)
        self.eval_seed = int(eval_ss.generate_state(1)[0])
        self.eval_batch = make_eval_batch(sequences, cfg.eval_batch_size, cfg.mask_rate,
                                          np.random.default_rng(eval_ss))
        self.tmr = cfg.mode == "tmr"
        self.buffer = ReplayBuffer(cfg.buffer_capacity, cfg.alpha, cfg.priority_floor) if self.tmr else None
        self.policy = WeightPolicy(cfg.strategy_config(), len(vocab))
        self.lambda_ = cfg.lambda_
        self.step_count = 0
        self.last_drift = self.drift()
        self.audit_failures = []

    def drift(self):
        return drift_metric(self.params, self.eval_batch, self.eval_seed)

    def buffer_counters(self):
        if self.buffer is None:
            return {"add": 0, "evict": 0, "update": 0, "stale": 0, "sample": 0}
        return dict(self.buffer.counters)

    def step(self, include_disc_loss=True):
        """One pretraining iteration.

        ``include_disc_loss=False`` drops the discriminator term entirely
        (used to check that the generator never sees it).
        """
        cfg = self.cfg
        K = cfg.batch_size
        t0 = time.perf_counter()
        calls0 = ag.COUNTERS["backward_calls"]
        self.step_count += 1
        step = self.step_count

        originals = [self.sequences[i] for i in self.data_rng.integers(len(self.sequences), size=K)]
        masked = [mask_sequence(s, cfg.mask_rate, self.data_rng) for s in originals]

        with ag.Tape() as tape:
            gout = forward_generator(self.params, masked)
            loss_g = generator_loss(gout)
            sampled = sample_replacements(gout, self.gen_rng)
            fresh = [assemble_corrupted(m, s) for m, s in zip(masked, sampled)]

            draws = None
            cold = False
            if self.tmr:
                cold = self.buffer.live_count < K
                self.policy.maybe_refit(self.buffer, step)
                weights = self.policy.initial_weights(fresh, self.buffer.stats())
                for ex, w in zip(fresh, weights):
                    self.buffer.add(ex, w, step)
                if not cold:
                    draws = self.buffer.sample(K, self.buffer_rng)
            disc_batch = [ex for _, ex, _ in draws] if draws else fresh

            dout = forward_discriminator(self.params, disc_batch)
            loss_d, per_example = discriminator_loss(dout)
            if include_disc_loss:
                total = ag.add(loss_g, ag.scale(loss_d, self.lambda_))
            else:
                total = loss_g
        self.params.zero_grad()
        tape.backward(total, self.params.tensors())

        new_weights = None
        if draws:
            new_weights = self._new_weights(draws, dout, per_example.data)
        self.opt.step(self.params.grads())

        attempts = stale = 0
        if draws:
            attempts, stale = self._apply_updates(draws, per_example.data, new_weights)

        if step % cfg.eval_every == 0:
            self.last_drift = self.drift()
            if self.tmr:
                self.audit_failures.extend((step, eid) for eid in self.buffer.audit_labels())

        stats = self.buffer.stats() if self.tmr else {
            "mean_weight": 0.0, "min_weight": 0.0, "max_weight": 0.0, "live_count": 0}
        ages = [step - self.buffer.get(eid).insert_step for eid, _, _ in draws] if draws else [0]
        elapsed = (time.perf_counter() - t0) * 1000.0 if cfg.timing else 0.0
        lg, ld = float(loss_g.data), float(loss_d.data)
        return StepMetrics(
            step=step, loss_g=lg, loss_d=ld, loss_combined=float(total.data),
            drift_exact_recovery=self.last_drift,
            fresh_replaced_fraction=float(np.mean([replaced_fraction(e) for e in fresh])),
            buffer_live=stats["live_count"], buffer_mean_w=stats["mean_weight"],
            buffer_min_w=stats["min_weight"], buffer_max_w=stats["max_weight"],
            step_ms=elapsed, cold=cold,
            sampled_ids=[eid for eid, _, _ in draws] if draws else [],
            age_mean=float(np.mean(ages)), age_max=int(np.max(ages)),
            update_attempts=attempts, stale_updates=stale,
            backward_calls=ag.COUNTERS["backward_calls"] - calls0)

    def _new_weights(self, draws, dout, losses):
        """Candidate weights per draw, computed before the optimizer moves the parameters."""
        kind = self.cfg.update_strategy
        if kind == "grad_norm":
            norms, _ = per_example_grad_norms(self.params, [ex for _, ex, _ in draws])
            return [update_weight_grad_norm(n) for n in norms]
        if kind == "grad_bound":
            return list(grad_bound_norms(dout))
        return None

    def _apply_updates(self, draws, losses, new_weights):
        """Refresh every sampled entry's weight; evicted entries are skipped silently."""
        prev = {}
        for eid, _, _ in draws:
            if eid not in prev and eid in self.buffer:
                prev[eid] = self.buffer.get(eid).last_loss
        attempts = stale = 0
        for k, (eid, ex, _) in enumerate(draws):
            attempts += 1
            curr = float(losses[k])
            change = update_weight_loss_diff(prev.get(eid), curr)
            if self.cfg.update_strategy == "loss_diff":
                w = change
            elif self.cfg.update_strategy == "grad_bound":
                w = update_weight_grad_bound([new_weights[k]])
            else:
                w = new_weights[k]
            try:
                if w is not None:
                    self.buffer.update(eid, w)
                self.buffer.get(eid).last_loss = curr
            except StaleEntryError:
                stale += 1
            self.policy.observe_reward(ex, change)
        return attempts, stale

    def state_arrays(self):
        arrays = {k: v for k, v in self.params.arrays().items()}
        if self.tmr:
            arrays.update(self.buffer.to_arrays(self.cfg.max_seq_len))
        return arrays

    def save_checkpoint(self, prefix):
        meta = {"mode": self.cfg.mode, "vocab": "vocab.txt"}
        meta.update({f"model.{k}": v for k, v in self.params.cfg.to_dict().items()})
        return write_checkpoint(prefix, self.state_arrays(), self.step_count,
                                self.cfg.digest(), meta)


@dataclass
class RunReport:
    config: dict
    metrics: list
    checkpoints: list
    drift_slope: float
    aborted_at: int | None = None
    environment: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, default=float)


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def environment_info():
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count": os.cpu_count(),
        "threads": {k: os.environ.get(k) for k in
                    ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")},
    }


def drift_slope(series):
    """Least-squares slope of exact recovery against step."""
    if len(series) < 2:
        return 0.0
    x = np.array([m.step for m in series], dtype=np.float64)
    y = np.array([m.drift_exact_recovery for m in series])
    if np.ptp(x) == 0:
        return 0.0
    return float(np.polyfit(x, y, 1)[0])


def run_pretraining(cfg: TrainConfig, progress=None):
    """Run ``cfg.steps`` iterations, streaming metrics.csv and writing report.json."""
    cfg.validate()
    corpus = cfg.corpus or str(bundled_path("corpus.txt"))
    vocab, seqs = load_corpus_sequences(corpus, cfg.max_vocab, cfg.max_seq_len)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    (out / "config.txt").write_text(cfg.dumps(), encoding="utf-8")
    trainer = Trainer(cfg, seqs, vocab)

    series, checkpoints, aborted = [], [], None
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for _ in range(cfg.steps):
            try:
                m = trainer.step()
            except ag.NumericalError as exc:
                aborted = trainer.step_count
                log.error("numerical failure at step %d: %s", aborted, exc)
                break
            series.append(m)
            writer.writerow([_fmt(v) for v in m.row()])
            fh.flush()
            if progress:
                progress(m)
            if cfg.checkpoint_every and m.step % cfg.checkpoint_every == 0:
                checkpoints.append(str(trainer.save_checkpoint(out / f"ckpt-{m.step:06d}")))
    if aborted is None:
        checkpoints.append(str(trainer.save_checkpoint(out / f"ckpt-{trainer.step_count:06d}")))

    report = RunReport(
        config=cfg.to_dict(),
        metrics=[{c: v for c, v in zip(CSV_COLUMNS, m.row())} for m in series],
        checkpoints=checkpoints,
        drift_slope=drift_slope(series),
        aborted_at=aborted,
        environment=environment_info(),
        counters=trainer.buffer_counters(),
    )
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    if aborted is not None:
        raise TrainingAborted(aborted, "non-finite values")
    return report


BENCH_VARIANTS = (
    ("baseline", {"mode": "electra_baseline"}),
    ("loss_diff", {"mode": "tmr", "update_strategy": "loss_diff"}),
    ("grad_bound", {"mode": "tmr", "update_strategy": "grad_bound"}),
    ("grad_norm", {"mode": "tmr", "update_strategy": "grad_norm"}),
)


def bench_strategies(cfg: TrainConfig, steps=100, rounds=1, variants=BENCH_VARIANTS):
    """Seconds per 100 iterations for each strategy on one shared config.

    All variants advance in lockstep, one step each in rotating order, so a
    slow patch on a shared machine lands on every variant alike. Each step is
    timed on its own; the fastest round's total is kept per variant.
    Returns ``(rows, ordering_ok)``.
    """
    corpus = cfg.corpus or str(bundled_path("corpus.txt"))
    vocab, seqs = load_corpus_sequences(corpus, cfg.max_vocab, cfg.max_seq_len)
    names = [name for name, _ in variants]
    best = {name: float("inf") for name in names}
    calls = {name: 0 for name in names}
    for _ in range(rounds):
        trainers = {name: Trainer(cfg.with_overrides(timing=False, **over), seqs, vocab)
                    for name, over in variants}
        total = dict.fromkeys(names, 0.0)
        for i in range(steps):
            for j in range(len(names)):
                name = names[(i + j) % len(names)]
                t0 = time.perf_counter()
                m = trainers[name].step()
                total[name] += time.perf_counter() - t0
                calls[name] = max(calls[name], m.backward_calls)
        for name in names:
            best[name] = min(best[name], total[name])
    rows = [{"strategy": name, "seconds_per_100_iters": best[name] * 100.0 / max(steps, 1),
             "backward_calls_per_step": calls[name]} for name in names]
    return rows, ordering_verdict(rows)


def ordering_verdict(rows):
    t = {r["strategy"]: r["seconds_per_100_iters"] for r in rows}
    if not all(k in t for k in ("baseline", "loss_diff", "grad_bound", "grad_norm")):
        return None
    return (t["grad_norm"] > t["grad_bound"] > t["loss_diff"]
            and t["loss_diff"] <= 1.10 * t["baseline"])
