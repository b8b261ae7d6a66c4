"""Corpus loading, vocabulary, masking and corrupted-example assembly."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PAD, MASK, CLS, UNK = 0, 1, 2, 3
RESERVED = ("[PAD]", "[MASK]", "[CLS]", "[UNK]")

ORIGINAL, REPLACED = 0, 1


class Vocab:
    """Token <-> id map with the four reserved ids first."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise ValueError("vocab must start with the reserved tokens " + repr(RESERVED))
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocab")
        if len(tokens) < 5:
            raise ValueError("vocab needs at least one non-reserved token")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.itos)

    @property
    def size(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, text):
        return [self.stoi.get(tok, UNK) for tok in tokenize(text)]

    def decode(self, ids):
        return " ".join(self.itos[i] for i in ids if i not in (PAD, CLS))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for i, tok in enumerate(self.itos):
                fh.write(f"{tok}\t{i}\n")

    @classmethod
    def load(cls, path):
        pairs = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, idx = line.split("\t")
                pairs.append((int(idx), tok))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise ValueError(f"{path}: ids are not a contiguous range from 0")
        return cls(tok for _, tok in pairs)


def tokenize(text):
    return text.lower().split()


def read_corpus(path):
    """One document per non-empty line."""
    try:
        with open(path, encoding="utf-8") as fh:
            docs = [line.strip() for line in fh]
    except (OSError, UnicodeDecodeError) as exc:
        raise OSError(f"cannot read corpus {path}: {exc}") from exc
    docs = [d for d in docs if d]
    if not docs:
        raise ValueError(f"corpus {path} is empty")
    return docs


def build_vocab(corpus_path, max_vocab):
    """Most frequent ``max_vocab - 4`` tokens after the reserved ones.

    Ties in frequency are broken lexicographically, so the result depends only
    on the corpus contents.
    """
    if max_vocab < 5:
        raise ValueError("max_vocab must be >= 5")
    counts = Counter()
    for doc in read_corpus(corpus_path):
        counts.update(tokenize(doc))
    for tok in RESERVED:
        counts.pop(tok.lower(), None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab(list(RESERVED) + [t for t, _ in ranked[: max_vocab - 4]])


@dataclass(frozen=True)
class TokenSequence:
    """Original token ids; ``ids[0]`` is always CLS."""

    ids: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        ids.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        if ids.ndim != 1 or len(ids) < 1 or ids[0] != CLS:
            raise ValueError("a TokenSequence starts with CLS")
        if np.any(ids == MASK) or np.any(ids == PAD):
            raise ValueError("original sequences carry no MASK or PAD tokens")

    def __len__(self):
        return len(self.ids)


@dataclass(frozen=True)
class MaskedExample:
    input: np.ndarray
    mask_positions: np.ndarray
    originals: np.ndarray
    original: TokenSequence

    def __len__(self):
        return len(self.input)


@dataclass(frozen=True)
class CorruptedExample:
    tokens: np.ndarray
    original: TokenSequence
    mask_positions: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.tokens)


def encode_corpus(docs, vocab, max_seq_len):
    """Split each document into CLS-prefixed windows of at most ``max_seq_len``.

    Windows with no content token after CLS are dropped; every surviving
    sequence has length >= 2 so it can be masked.
    """
    if max_seq_len < 2:
        raise ValueError("max_seq_len must be >= 2")
    body = max_seq_len - 1
    seqs = []
    for doc in docs:
        ids = vocab.encode(doc)
        for start in range(0, len(ids), body):
            chunk = ids[start:start + body]
            if chunk:
                seqs.append(TokenSequence(np.array([CLS] + chunk)))
    return seqs


def mask_count(n, mask_rate):
    # round half up so the count does not depend on banker's rounding
    return max(1, int(math.floor(mask_rate * (n - 1) + 0.5)))


def mask_sequence(seq, mask_rate, rng):
    n = len(seq)
    if n < 2:
        raise ValueError("need CLS plus at least one content token to mask")
    if not 0.0 < mask_rate < 1.0:
        raise ValueError("mask_rate must lie in (0, 1)")
    r = min(mask_count(n, mask_rate), n - 1)
    positions = np.sort(rng.choice(np.arange(1, n), size=r, replace=False))
    masked = seq.ids.copy()
    originals = masked[positions].copy()
    masked[positions] = MASK
    return MaskedExample(masked, positions, originals, seq)


def corruption_labels(tokens, original_ids):
    """REPLACED wherever the token differs from the original, else ORIGINAL."""
    return (np.asarray(tokens) != np.asarray(original_ids)).astype(np.int8)


def assemble_corrupted(m, sampled):
    sampled = np.asarray(sampled, dtype=np.int64)
    if sampled.shape != m.mask_positions.shape:
        raise ValueError(
            f"got {sampled.shape[0] if sampled.ndim else 0} replacements for "
            f"{len(m.mask_positions)} masked positions"
        )
    tokens = m.original.ids.copy()
    tokens[m.mask_positions] = sampled
    return CorruptedExample(tokens, m.original, m.mask_positions,
                            corruption_labels(tokens, m.original.ids))


def replaced_fraction(ex):
    if len(ex.mask_positions) == 0:
        raise ValueError("example has no recorded mask positions")
    return float(np.mean(ex.labels[ex.mask_positions] == REPLACED))


def example_features(tokens, vocab_size, feature_dim):
    """Token ids scaled into [0, 1] and zero-padded to ``feature_dim``."""
    x = np.zeros(feature_dim)
    ids = np.asarray(tokens, dtype=np.float64)[:feature_dim]
    x[: len(ids)] = ids / vocab_size
    return x


def load_corpus_sequences(path, max_vocab, max_seq_len, vocab=None):
    docs = read_corpus(path)
    if vocab is None:
        vocab = build_vocab(path, max_vocab)
    return vocab, encode_corpus(docs, vocab, max_seq_len)


def bundled_path(name):
    return Path(__file__).with_name("data") / name
