"""Property suites behind ``tmr verify``; each check reports measured vs tolerance."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .config import TrainConfig
from .gradcheck import check_gradients
from .model import (DiscriminatorOutput, GeneratorOutput, ModelConfig, ModelParams,
                    collate, discriminator_loss, forward_discriminator,
                    forward_generator, generator_loss, sample_replacements)
from .probe import probe_loss
from .replay_buffer import ReplayBuffer
from .strategies import LinUcbState, linucb_observe, lsr_fit
from .text import (CLS, TokenSequence, assemble_corrupted, bundled_path,
                   load_corpus_sequences, mask_sequence)
from .trainer import Trainer, drift_metric, make_eval_batch


@dataclass
class Check:
    name: str
    measured: float
    tolerance: str
    passed: bool

    def line(self):
        flag = "PASS" if self.passed else "FAIL"
        return f"[{flag}] {self.name}: measured={self.measured:.6g} tolerance {self.tolerance}"


# -- sampling ---------------------------------------------------------------------

def sampling_checks(draws=10**6, seed=0, weights=(1.0, 2.0, 3.0, 4.0), alphas=(0.0, 0.5, 1.0, 2.0)):
    out = []
    rng = np.random.default_rng(seed)
    w = np.asarray(weights)
    for a in alphas:
        buf = ReplayBuffer(len(w), alpha=a)
        for x in w:
            buf.add(None, x)
        slots, _ = buf.sample_slots(draws, rng)
        freq = np.bincount(slots, minlength=len(w)) / draws
        p = w ** a / np.sum(w ** a)
        err = float(np.max(np.abs(freq - p)))
        out.append(Check(f"sampling alpha={a}", err, "<= 0.01 abs per entry", err <= 0.01))
        if a == 0.0:
            exact = np.array(list(buf.probabilities().values()))
            dev = float(np.max(np.abs(exact - 1.0 / len(w))))
            out.append(Check("alpha=0 probabilities exactly uniform", dev, "== 0", dev == 0.0))
    return out


# -- buffer -----------------------------------------------------------------------

def complexity_checks(sizes=tuple(2 ** k for k in range(4, 17)), seed=0):
    """Sum-tree node visits per add (with eviction), update and single draw."""
    rng = np.random.default_rng(seed)
    out = []
    for n in sizes:
        expect = math.ceil(math.log2(n)) + 1
        buf = ReplayBuffer(n)
        for i, x in enumerate(rng.uniform(0.1, 1.0, n)):
            buf.add(None, x, step=i)
        costs = {}
        v = buf.tree.visits
        eid = buf.add(None, 0.5, step=n)
        costs["add"] = buf.tree.visits - v
        v = buf.tree.visits
        buf.update(eid, 0.7)
        costs["update"] = buf.tree.visits - v
        v = buf.tree.visits
        buf.sample(1, rng)
        costs["sample"] = buf.tree.visits - v
        worst = max(costs.values())
        ok = all(c == expect for c in costs.values())
        out.append(Check(f"node visits N={n} (add/update/sample={costs['add']}/"
                         f"{costs['update']}/{costs['sample']})", worst, f"== {expect}", ok))
    return out


def eviction_checks(sequences=10**4, capacity=64, seed=0):
    """Random add/update bursts; every eviction must take a minimum-weight, oldest entry."""
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(capacity)
    levels = np.array([0.0, 0.25, 0.5, 1.0, 2.0])
    step = 0
    violations = over = 0
    for _ in range(sequences):
        for _ in range(int(rng.integers(1, 9))):
            step += 1
            if buf.live_count and rng.random() < 0.4:
                eid = int(rng.choice(list(buf._slot_of)))
                buf.update(eid, float(levels[rng.integers(len(levels))]))
                continue
            victim = None
            if buf.live_count == capacity:
                live = buf.live_entries()
                lo = min(e.weight for e in live)
                victim = min((e for e in live if e.weight == lo),
                             key=lambda e: (e.insert_step, e.entry_id)).entry_id
            buf.add(None, float(levels[rng.integers(len(levels))]), step=step)
            if victim is not None and victim in buf:
                violations += 1
            over += buf.live_count > capacity
    return [Check(f"eviction picks min weight, oldest tie ({sequences} sequences)",
                  violations, "== 0", violations == 0),
            Check("live count never exceeds capacity", over, "== 0", over == 0)]


# -- gradients --------------------------------------------------------------------

TOY = ModelConfig(vocab_size=12, max_seq_len=8, emb_dim=4, gen_layers=2, gen_hidden=4,
                  gen_heads=2, disc_layers=2, disc_hidden=8, disc_heads=2, init_std=0.3)


def toy_setup(seed=1):
    rng = np.random.default_rng(seed)
    params = ModelParams.init(TOY, seed)
    seqs = [TokenSequence(np.array([CLS] + list(rng.integers(4, TOY.vocab_size, size=n))))
            for n in (5, 7, 3)]
    masked = [mask_sequence(s, 0.3, rng) for s in seqs]
    sampled = sample_replacements(forward_generator(params, masked), rng)
    corrupted = [assemble_corrupted(m, s) for m, s in zip(masked, sampled)]
    return params, masked, corrupted, rng


def gradient_checks(tol=1e-4, lam=50.0, seed=1):
    params, masked, corrupted, rng = toy_setup(seed)

    def lg():
        return generator_loss(forward_generator(params, masked))

    def ld():
        return discriminator_loss(forward_discriminator(params, corrupted))[0]

    def comb():
        return ag.add(lg(), ag.scale(ld(), lam))

    out = []
    for name, fn in (("L_G", lg), ("L_D", ld), ("L_G + lambda L_D", comb)):
        rep = check_gradients(fn, params.params)
        err = max(e for e, _ in rep.values())
        out.append(Check(f"finite differences {name}", err, f"<= {tol:g} max rel", err <= tol))

    # probe head composed with the discriminator body
    body = ModelParams(TOY, {k: v for k, v in params.arrays().items()
                             if k == "embed" or k.startswith("disc.")})
    W = ag.parameter(rng.normal(0, 0.3, (3, TOY.disc_hidden)), name="probe.W")
    ids, valid = collate([c.original.ids for c in corrupted])
    labels = np.array([0, 2, 1])
    named = dict(body.params)
    named["probe.W"] = W
    rep = check_gradients(lambda: probe_loss(body, W, ids, valid, labels), named)
    err = max(e for e, _ in rep.values())
    out.append(Check("finite differences probe loss", err, f"<= {tol:g} max rel", err <= tol))

    # L_D recorded on the same tape as the generator forward still never reaches theta_G
    with ag.Tape() as tape:
        gout = forward_generator(params, masked)
        fresh = [assemble_corrupted(m, s) for m, s in
                 zip(masked, sample_replacements(gout, np.random.default_rng(seed)))]
        loss_d = discriminator_loss(forward_discriminator(params, fresh))[0]
    leaves = tape.gradients(loss_d)
    gen_max = max((float(np.max(np.abs(leaves[id(params[k])]))) for k in params.generator_names()
                   if id(params[k]) in leaves), default=0.0)
    out.append(Check("dL_D/dtheta_G", gen_max, "== 0 exactly", gen_max == 0.0))
    return out


# -- loss oracles -------------------------------------------------------------------

def formula_checks(V=100, tol=1e-6):
    out = []
    lp = ag.log_softmax(ag.Tensor(np.zeros((3, V))))
    g = GeneratorOutput(None, lp, np.array([0, 0, 1]), np.array([1, 2, 1]),
                        np.array([5, 6, 7]), np.array([2, 1]))
    val = float(generator_loss(g).data)
    out.append(Check(f"uniform MLM loss vs ln {V}", abs(val - math.log(V)), f"<= {tol:g}",
                     abs(val - math.log(V)) <= tol))

    lp = ag.Tensor(np.log(np.array([[0.5, 0.5], [0.25, 0.75]])))
    g = GeneratorOutput(None, lp, np.array([0, 0]), np.array([1, 2]), np.array([0, 0]), np.array([2]))
    val = float(generator_loss(g).data)
    exp = (math.log(2) + math.log(4)) / 2
    out.append(Check("MLM hand case 1.0397", abs(val - exp), f"<= {tol:g}", abs(val - exp) <= tol))

    def bce(probs, is_orig):
        z = np.log(np.asarray(probs) / (1 - np.asarray(probs)))[None, :]
        d = DiscriminatorOutput(None, ag.Tensor(z), None, np.ones_like(z, dtype=bool),
                                np.asarray(is_orig, dtype=np.int8)[None, :])
        return float(discriminator_loss(d)[0].data)

    val = bce([0.5], [1])
    out.append(Check("BCE at D=0.5 vs ln 2", abs(val - math.log(2)), f"<= {tol:g}",
                     abs(val - math.log(2)) <= tol))
    val = bce([0.9, 0.2], [1, 0])
    exp = (-math.log(0.9) - math.log(0.8)) / 2
    out.append(Check("BCE hand case 0.16425", abs(val - exp), f"<= {tol:g}", abs(val - exp) <= tol))
    return out


# -- strategy state -------------------------------------------------------------------

def strategy_checks(seed=0, dim=5, n=100, noise=0.01):
    rng = np.random.default_rng(seed)
    theta = rng.uniform(-1, 1, dim)
    st = LinUcbState(dim)
    for _ in range(n):
        x = rng.normal(0, 1, dim)
        linucb_observe(st, x, float(theta @ x + rng.normal(0, noise)))
    err = float(np.max(np.abs(st.theta() - theta)))
    out = [Check(f"LinUCB planted reward recovery ({n} obs)", err, "<= 0.05 max-norm", err <= 0.05)]

    X = rng.normal(0, 1, (40, dim))
    r = rng.uniform(0, 2, 40)
    ridge = 1.0
    fit = lsr_fit(list(zip(X, r)), ridge)
    lhs = (X.T @ X + ridge * np.eye(dim)) @ fit.theta
    rhs = X.T @ r
    rel = float(np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs))
    out.append(Check("LSR ridge normal equations", rel, "<= 1e-6 rel", rel <= 1e-6))
    return out


# -- drift -----------------------------------------------------------------------------

def drift_checks(steps=2000, seed=0, factor=5.0, n_eval=12000, min_positions=10_000, progress=None):
    """Step-0 exact recovery against 1/V, then the growth factor after ``steps``."""
    cfg = TrainConfig(seed=seed, steps=steps, timing=False, eval_every=max(steps, 1))
    vocab, seqs = load_corpus_sequences(str(bundled_path("corpus.txt")), cfg.max_vocab, cfg.max_seq_len)
    trainer = Trainer(cfg, seqs, vocab)
    big = make_eval_batch(seqs, n_eval, cfg.mask_rate, np.random.default_rng(seed + 1))
    m = sum(len(b.mask_positions) for b in big)
    V = len(vocab)
    start = drift_metric(trainer.params, big, seed)
    se = math.sqrt((1 / V) * (1 - 1 / V) / m)
    z = abs(start - 1 / V) / se
    out = [Check(f"step-0 exact recovery {start:.5f} vs 1/V={1 / V:.4f} over {m} positions "
                 "(z-score)", z, "<= 3", z <= 3 and m >= min_positions)]
    for _ in range(steps):
        mm = trainer.step()
        if progress:
            progress(mm)
    end = drift_metric(trainer.params, big, seed)
    ratio = end / start if start > 0 else float("inf")
    out.append(Check(f"exact recovery after {steps} steps {end:.5f} / start", ratio,
                     f">= {factor:g}", ratio >= factor))
    return out


SUITES = {
    "sampling": lambda **kw: sampling_checks(),
    "buffer": lambda **kw: complexity_checks() + eviction_checks(),
    "gradients": lambda **kw: gradient_checks() + formula_checks() + strategy_checks(),
    "drift": lambda steps=2000, seed=0, **kw: drift_checks(steps=steps, seed=seed),
}


def run_suite(name, echo=print, **kw):
    checks = SUITES[name](**kw)
    for c in checks:
        echo(c.line())
    return all(c.passed for c in checks)
