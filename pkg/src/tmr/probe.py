"""Downstream probe: fine-tune a classifier on the discriminator's CLS vector."""

from __future__ import annotations

import csv
import glob
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .checkpoint import Checkpoint, CheckpointError
from .model import ModelConfig, ModelParams, collate, tower
from .optim import Adam
from .text import CLS, Vocab, bundled_path, read_corpus, tokenize

COMPARE_COLUMNS = ("mode", "pretrain_step", "mean_acc", "std_acc", "n_seeds")


@dataclass
class ProbeTask:
    train: list          # [(ids array starting with CLS, label)]
    dev: list
    num_classes: int

    def __post_init__(self):
        if not self.train or not self.dev:
            raise ValueError("probe task needs nonempty train and dev splits")
        present = {y for _, y in self.train}
        missing = set(range(self.num_classes)) - present
        if missing:
            raise ValueError(f"classes {sorted(missing)} absent from the train split")

    def shuffled_labels(self, seed=0):
        """Same inputs with labels permuted (no learnable signal)."""
        rng = np.random.default_rng(seed)
        ys = np.array([y for _, y in self.train + self.dev])
        ys = ys[rng.permutation(len(ys))]
        items = [(x, int(y)) for (x, _), y in zip(self.train + self.dev, ys)]
        return ProbeTask(items[: len(self.train)], items[len(self.train):], self.num_classes)


def read_probe_tsv(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            label, sep, text = line.partition("\t")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected label<TAB>text")
            rows.append((int(label), text))
    return rows


def load_probe_task(path, vocab, max_seq_len, dev_every=4):
    """Every ``dev_every``-th line goes to dev; classes are 0..max label."""
    rows = read_probe_tsv(path)
    items = []
    for label, text in rows:
        ids = vocab.encode(text)[: max_seq_len - 1]
        items.append((np.array([CLS] + ids, dtype=np.int64), label))
    train = [it for i, it in enumerate(items) if i % dev_every != dev_every - 1]
    dev = [it for i, it in enumerate(items) if i % dev_every == dev_every - 1]
    return ProbeTask(train, dev, max(y for _, y in items) + 1)


def make_corruption_task(corpus_path, variants=4, n_replace=2, seed=0):
    """Sentences from the corpus (label 0) and copies with words swapped at random (label 1)."""
    rng = np.random.default_rng(seed)
    docs = [tokenize(d) for d in read_corpus(corpus_path)]
    words = sorted({w for d in docs for w in d})
    rows = []
    for _ in range(variants):
        for d in docs:
            rows.append((0, " ".join(d)))
            bad = list(d)
            for pos in rng.choice(len(d), size=min(n_replace, len(d)), replace=False):
                choices = [w for w in words if w != d[pos]]
                bad[pos] = choices[rng.integers(len(choices))]
            rows.append((1, " ".join(bad)))
    order = rng.permutation(len(rows))
    return [rows[i] for i in order]


def write_probe_tsv(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        for label, text in rows:
            fh.write(f"{label}\t{text}\n")


# -- head and loss --------------------------------------------------------------

@dataclass
class ClassifierHead:
    W: np.ndarray  # (C, H)

    @classmethod
    def init(cls, num_classes, hidden, rng, std=0.02):
        return cls(rng.normal(0.0, std, (num_classes, hidden)))


def classify_loss(h1, W, label):
    """Cross-entropy of ``softmax(W h1)`` at ``label``."""
    W = np.asarray(W, dtype=np.float64)
    if not 0 <= label < W.shape[0]:
        raise ValueError(f"class {label} out of range for {W.shape[0]} classes")
    logits = W @ np.asarray(h1, dtype=np.float64)
    return float(-ag.log_softmax_np(logits)[label])


def probe_logits(body, W, ids, valid):
    cfg = body.cfg
    h = tower(body, "disc", ids, valid, cfg.disc_layers, cfg.disc_heads)
    h1 = ag.gather(h, (np.arange(ids.shape[0]), np.zeros(ids.shape[0], dtype=np.int64)))
    return ag.matmul(h1, ag.transpose(W, (1, 0)))


def probe_loss(body, W, ids, valid, labels):
    """Mean cross-entropy over the batch, differentiable in body and head."""
    lp = ag.log_softmax(probe_logits(body, W, ids, valid))
    return ag.scale(ag.neg(ag.sum_all(ag.pick(lp, labels))), 1.0 / len(labels))


# -- fine-tuning -----------------------------------------------------------------

def body_names(ckpt):
    """Tensors fine-tuning may read: the shared table and the discriminator tower."""
    return [n for n in ckpt.names()
            if n == "embed" or (n.startswith("disc.") and n != "disc.head_w")]


def model_config_from(ckpt):
    fields = {k[len("model."):]: v for k, v in ckpt.meta.items() if k.startswith("model.")}
    if "vocab_size" not in fields:
        raise CheckpointError(f"{ckpt.manifest_path}: no model config in manifest")
    kw = {}
    for k, v in fields.items():
        kw[k] = float(v) if k == "init_std" else int(v)
    return ModelConfig(**kw)


def load_body(ckpt):
    cfg = model_config_from(ckpt)
    arrays = ckpt.read_many(body_names(ckpt))
    if arrays["embed"].shape != (cfg.vocab_size, cfg.emb_dim):
        raise CheckpointError("embedding shape disagrees with the manifest config")
    return ModelParams(cfg, arrays)


def checkpoint_vocab(ckpt):
    return Vocab.load(ckpt.manifest_path.parent / ckpt.meta.get("vocab", "vocab.txt"))


@dataclass
class FineTuneResult:
    dev_accuracy: float
    losses: list = field(default_factory=list)
    accessed: frozenset = frozenset()


def evaluate(body, W, items, batch_size=64):
    correct = 0
    for s in range(0, len(items), batch_size):
        chunk = items[s:s + batch_size]
        ids, valid = collate([x for x, _ in chunk])
        pred = np.argmax(probe_logits(body, W, ids, valid).data, axis=1)
        correct += int(np.sum(pred == np.array([y for _, y in chunk])))
    return correct / len(items)


def fine_tune(checkpoint, task, epochs=3, seed=0, lr=5e-4, batch_size=16, warmup_frac=0.1):
    """Whole-body fine-tuning from a checkpoint; generator tensors are never read."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint(checkpoint)
    body = load_body(ckpt)
    rng = np.random.default_rng(seed)
    H = body.cfg.disc_hidden
    W = ag.parameter(ClassifierHead.init(task.num_classes, H, rng).W, name="probe.W")
    params = dict(body.params)
    params["probe.W"] = W
    n_batches = math.ceil(len(task.train) / batch_size)
    opt = Adam(params, lr=lr, warmup_steps=int(warmup_frac * epochs * n_batches))
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(task.train))
        for s in range(0, len(order), batch_size):
            chunk = [task.train[i] for i in order[s:s + batch_size]]
            ids, valid = collate([x for x, _ in chunk])
            labels = np.array([y for _, y in chunk])
            with ag.Tape() as tape:
                loss = probe_loss(body, W, ids, valid, labels)
            leaves = tape.gradients(loss)
            opt.step({k: leaves[id(t)] for k, t in params.items() if id(t) in leaves})
            losses.append(float(loss.data))
    acc = evaluate(body, W, task.dev)
    return FineTuneResult(acc, losses, frozenset(ckpt.accessed))


# -- comparison ------------------------------------------------------------------

def expand_checkpoints(patterns):
    """Glob patterns (or plain paths) to sorted, de-duplicated manifest paths."""
    out = []
    for pat in patterns:
        hits = sorted(glob.glob(pat)) or sorted(glob.glob(pat + ".manifest"))
        hits = [h for h in hits if h.endswith(".manifest")]
        if not hits:
            raise FileNotFoundError(f"no checkpoint matches {pat!r}")
        out.extend(hits)
    return out


def _job(args):
    path, task_path, seed, epochs, lr = args
    ckpt = Checkpoint(path)
    vocab = checkpoint_vocab(ckpt)
    task = load_probe_task(task_path, vocab, model_config_from(ckpt).max_seq_len)
    return fine_tune(ckpt, task, epochs=epochs, seed=seed, lr=lr).dev_accuracy


def compare_checkpoints(paths, task_path=None, seeds=(0, 1, 2), epochs=3, lr=5e-4, jobs=1):
    """Mean and std dev accuracy over seeds for each checkpoint, in input order."""
    if len(paths) < 1:
        raise ValueError("need at least one checkpoint")
    task_path = str(task_path or bundled_path("probe.tsv"))
    work = [(str(p), task_path, s, epochs, lr) for p in paths for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            accs = list(pool.map(_job, work))
    else:
        accs = [_job(w) for w in work]
    rows = []
    for i, p in enumerate(paths):
        a = np.array(accs[i * len(seeds):(i + 1) * len(seeds)])
        ckpt = Checkpoint(p)
        rows.append({"mode": ckpt.meta.get("mode", "unknown"), "pretrain_step": ckpt.step,
                     "mean_acc": float(a.mean()), "std_acc": float(a.std(ddof=1)) if len(a) > 1 else 0.0,
                     "n_seeds": len(a)})
    return rows


def write_comparison(rows, path_or_file):
    own = isinstance(path_or_file, (str, Path))
    fh = open(path_or_file, "w", newline="", encoding="utf-8") if own else path_or_file
    try:
        w = csv.DictWriter(fh, fieldnames=COMPARE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    finally:
        if own:
            fh.close()
