"""Generator / discriminator transformer towers over a shared embedding table."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .text import MASK, ORIGINAL, PAD

NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_seq_len: int = 32
    emb_dim: int = 16
    gen_layers: int = 2
    gen_hidden: int = 16
    gen_heads: int = 2
    disc_layers: int = 2
    disc_hidden: int = 32
    disc_heads: int = 4
    init_std: float = 0.02

    def __post_init__(self):
        if self.gen_hidden > self.disc_hidden:
            raise ValueError("the generator must not be wider than the discriminator")
        for tower in ("gen", "disc"):
            h, k = getattr(self, f"{tower}_hidden"), getattr(self, f"{tower}_heads")
            if h % k:
                raise ValueError(f"{tower}_hidden={h} is not divisible by {tower}_heads={k}")

    def to_dict(self):
        return asdict(self)


def _tower_params(rng, prefix, cfg, layers, hidden):
    std = cfg.init_std
    p = {
        f"{prefix}.in_proj": rng.normal(0, std, (cfg.emb_dim, hidden)),
        f"{prefix}.in_bias": np.zeros(hidden),
        f"{prefix}.pos": rng.normal(0, std, (cfg.max_seq_len, hidden)),
    }
    for i in range(layers):
        L = f"{prefix}.l{i}"
        p[f"{L}.ln1.g"] = np.ones(hidden)
        p[f"{L}.ln1.b"] = np.zeros(hidden)
        for w in ("q", "k", "v", "o"):
            p[f"{L}.w{w}"] = rng.normal(0, std, (hidden, hidden))
            # no key bias: softmax over keys cancels it, so its gradient is always 0
            if w != "k":
                p[f"{L}.b{w}"] = np.zeros(hidden)
        p[f"{L}.ln2.g"] = np.ones(hidden)
        p[f"{L}.ln2.b"] = np.zeros(hidden)
        p[f"{L}.w1"] = rng.normal(0, std, (hidden, 4 * hidden))
        p[f"{L}.b1"] = np.zeros(4 * hidden)
        p[f"{L}.w2"] = rng.normal(0, std, (4 * hidden, hidden))
        p[f"{L}.b2"] = np.zeros(hidden)
    p[f"{prefix}.lnf.g"] = np.ones(hidden)
    p[f"{prefix}.lnf.b"] = np.zeros(hidden)
    return p


class ModelParams:
    """Named parameter tensors. ``embed`` is the one table both towers read."""

    def __init__(self, cfg: ModelConfig, arrays: dict):
        self.cfg = cfg
        self.params = {k: ag.parameter(np.array(v, dtype=np.float64), name=k)
                       for k, v in arrays.items()}

    @classmethod
    def init(cls, cfg: ModelConfig, seed=0):
        rng = np.random.default_rng(seed)
        arrays = {"embed": rng.normal(0, cfg.init_std, (cfg.vocab_size, cfg.emb_dim))}
        arrays.update(_tower_params(rng, "gen", cfg, cfg.gen_layers, cfg.gen_hidden))
        arrays["gen.out_proj"] = rng.normal(0, cfg.init_std, (cfg.gen_hidden, cfg.emb_dim))
        arrays["gen.out_bias"] = np.zeros(cfg.emb_dim)
        arrays.update(_tower_params(rng, "disc", cfg, cfg.disc_layers, cfg.disc_hidden))
        arrays["disc.head_w"] = rng.normal(0, cfg.init_std, cfg.disc_hidden)
        return cls(cfg, arrays)

    def __getitem__(self, name):
        return self.params[name]

    def names(self):
        return list(self.params)

    def generator_names(self):
        return [k for k in self.params if k.startswith("gen.")]

    def discriminator_names(self):
        """Everything the discriminator reads, including the shared table."""
        return ["embed"] + [k for k in self.params if k.startswith("disc.")]

    def tensors(self, names=None):
        return [self.params[k] for k in (names or self.params)]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grads(self):
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self.params.items()}

    def arrays(self):
        return {k: t.data for k, t in self.params.items()}

    def copy(self):
        return ModelParams(self.cfg, {k: v.copy() for k, v in self.arrays().items()})


def collate(seqs, pad_to=None):
    """Right-pad id arrays into a (B, n) matrix plus a 0/1 validity mask."""
    n = pad_to or max(len(s) for s in seqs)
    ids = np.full((len(seqs), n), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, (ids != PAD)


def _attention(P, L, x, n_heads, key_mask_add, keep_attn):
    B, n, H = x.shape
    d = H // n_heads

    def heads(t):
        return ag.transpose(ag.reshape(t, (B, n, n_heads, d)), (0, 2, 1, 3))

    q = heads(ag.matmul(x, P[f"{L}.wq"]) + P[f"{L}.bq"])
    k = heads(ag.matmul(x, P[f"{L}.wk"]))
    v = heads(ag.matmul(x, P[f"{L}.wv"]) + P[f"{L}.bv"])
    scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    attn = ag.softmax(scores, key_mask_add)
    if keep_attn is not None:
        keep_attn.append(attn.data)
    ctx = ag.reshape(ag.transpose(ag.matmul(attn, v), (0, 2, 1, 3)), (B, n, H))
    return ag.matmul(ctx, P[f"{L}.wo"]) + P[f"{L}.bo"]


def tower(params, prefix, ids, valid, layers, n_heads, keep_attn=None):
    """Pre-LN transformer over token ids; returns final hidden states (B, n, H)."""
    P = params.params
    B, n = ids.shape
    key_mask_add = np.where(valid, 0.0, NEG_INF)[:, None, None, :]
    with ag.scope(f"{prefix}.input"):
        e = ag.embedding(P["embed"], ids)
        x = ag.matmul(e, P[f"{prefix}.in_proj"]) + P[f"{prefix}.in_bias"] + ag.rows(P[f"{prefix}.pos"], n)
    for i in range(layers):
        L = f"{prefix}.l{i}"
        with ag.scope(L):
            a = ag.layer_norm(x, P[f"{L}.ln1.g"], P[f"{L}.ln1.b"])
            x = x + _attention(P, L, a, n_heads, key_mask_add, keep_attn)
            f = ag.layer_norm(x, P[f"{L}.ln2.g"], P[f"{L}.ln2.b"])
            f = ag.matmul(ag.gelu(ag.matmul(f, P[f"{L}.w1"]) + P[f"{L}.b1"]), P[f"{L}.w2"]) + P[f"{L}.b2"]
            x = x + f
    with ag.scope(f"{prefix}.final"):
        return ag.layer_norm(x, P[f"{prefix}.lnf.g"], P[f"{prefix}.lnf.b"])


class GeneratorOutput(NamedTuple):
    hidden: ag.Tensor        # h^G in embedding space, (B, n, E)
    log_probs: ag.Tensor     # (M, V) at masked positions, row-major over (example, position)
    batch_index: np.ndarray  # (M,)
    positions: np.ndarray    # (M,)
    targets: np.ndarray      # (M,) original tokens
    counts: np.ndarray       # (B,) masked positions per example


class DiscriminatorOutput(NamedTuple):
    hidden: ag.Tensor        # h^D, (B, n, H)
    logits: ag.Tensor        # z_t = w^T h_t^D, (B, n)
    probs: np.ndarray        # D(x^M, t) = sigmoid(z_t)
    valid: np.ndarray        # (B, n) non-PAD mask
    is_original: np.ndarray  # (B, n) 1 where the token matches the original


def forward_generator(params, batch, keep_attn=None):
    """Softmax over ``e(x)^T h_t^G`` at every masked position."""
    cfg = params.cfg
    ids, valid = collate([m.input for m in batch])
    h = tower(params, "gen", ids, valid, cfg.gen_layers, cfg.gen_heads, keep_attn)
    with ag.scope("gen.output"):
        hG = ag.matmul(h, params["gen.out_proj"]) + params["gen.out_bias"]
        b_idx = np.concatenate([np.full(len(m.mask_positions), i) for i, m in enumerate(batch)])
        pos = np.concatenate([m.mask_positions for m in batch])
        assert np.all(ids[b_idx, pos] == MASK)
        hm = ag.gather(hG, (b_idx, pos))
        logits = ag.matmul(hm, ag.transpose(params["embed"], (1, 0)))
        lp = ag.log_softmax(logits)
    targets = np.concatenate([m.originals for m in batch])
    counts = np.array([len(m.mask_positions) for m in batch])
    return GeneratorOutput(hG, lp, b_idx, pos, targets, counts)


def generator_loss(out: GeneratorOutput):
    """Masked-LM loss: per-example mean NLL over masked positions, then mean over examples."""
    B = len(out.counts)
    w = 1.0 / (out.counts[out.batch_index] * B)
    nll = ag.pick(out.log_probs, out.targets)
    return ag.neg(ag.sum_all(ag.mul(nll, w)))


def sample_replacements(out: GeneratorOutput, rng):
    """One categorical draw per masked position (temperature 1), outside the tape."""
    p = np.exp(out.log_probs.data)
    cdf = np.cumsum(p, axis=1)
    u = rng.random(len(cdf))[:, None] * cdf[:, -1:]
    tokens = (cdf <= u).sum(axis=1)
    tokens = np.minimum(tokens, p.shape[1] - 1)
    splits = np.cumsum(out.counts)[:-1]
    return [t.astype(np.int64) for t in np.split(tokens, splits)]


def forward_discriminator(params, batch, keep_attn=None):
    """``D(x^M, t) = sigmoid(w^T h_t^D)`` per non-PAD position."""
    cfg = params.cfg
    ids, valid = collate([c.tokens for c in batch])
    h = tower(params, "disc", ids, valid, cfg.disc_layers, cfg.disc_heads, keep_attn)
    with ag.scope("disc.head"):
        z = ag.matmul(h, params["disc.head_w"])
    labels = np.full(ids.shape, ORIGINAL, dtype=np.int8)
    for i, c in enumerate(batch):
        labels[i, : len(c)] = c.labels
    is_original = (labels == ORIGINAL) & valid
    return DiscriminatorOutput(h, z, ag.sigmoid_np(z.data), valid, is_original.astype(np.int8))


def discriminator_loss(out: DiscriminatorOutput):
    """Replaced-token-detection BCE as a mini-batch mean.

    Returns ``(batch_loss, per_example)``: per-example mean token BCE over
    non-PAD positions (CLS included), and the mean of those over the batch.
    """
    per_example = ag.bce_with_logits(out.logits, out.is_original, out.valid)
    return ag.mean_all(per_example), per_example


def bce_from_probs(d, is_original):
    """Token BCE evaluated directly from probabilities (reference form)."""
    d = np.asarray(d, dtype=np.float64)
    y = np.asarray(is_original, dtype=np.float64)
    return float(np.mean(-y * np.log(d) - (1 - y) * np.log(1 - d)))


def pre_activation_grads(out: DiscriminatorOutput):
    """d(per-example loss)/dz_t, read off the forward pass: (D - y) / n_valid."""
    counts = out.valid.sum(axis=1)
    return (out.probs - out.is_original) * out.valid / counts[:, None]


def grad_bound_norms(out: DiscriminatorOutput):
    """Per-example Euclidean norm of the loss gradient w.r.t. the sigmoid pre-activations."""
    g = pre_activation_grads(out)
    return np.sqrt(np.einsum("bn,bn->b", g, g))
