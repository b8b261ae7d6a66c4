"""Fixed-capacity prioritized memory buffer.

Sampling mass lives in a sum tree (leaf = ``weight ** alpha``); the eviction
candidate lives in a min tree keyed on ``(weight, insert_step)``. Both are
updated in O(log N) per add/update, and sampling is O(log N) per draw.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .sumtree import MinTree, SumTree
from .text import CorruptedExample, TokenSequence, corruption_labels

PRIORITY_FLOOR = 1e-8


class StaleEntryError(LookupError):
    """The entry id no longer refers to a live entry (it was evicted)."""


class BufferNotReady(RuntimeError):
    """Sampling was requested from an empty buffer or one with zero total priority."""


@dataclass
class BufferEntry:
    entry_id: int
    example: CorruptedExample
    weight: float
    insert_step: int
    sample_count: int = 0
    last_loss: Optional[float] = None


def _check_weight(w):
    w = float(w)
    if not (w >= 0.0) or not math.isfinite(w):
        raise ValueError(f"buffer weights must be finite and >= 0, got {w}")
    return w


class ReplayBuffer:
    def __init__(self, capacity, alpha=1.0, priority_floor=False):
        capacity = int(capacity)
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if not (alpha >= 0.0) or not math.isfinite(alpha):
            raise ValueError("alpha must be finite and >= 0")
        self.capacity = capacity
        self.alpha = float(alpha)
        self.priority_floor = bool(priority_floor)
        self.entries: list[Optional[BufferEntry]] = [None] * capacity
        self.tree = SumTree(capacity)
        self.mins = MinTree(capacity)
        self._weights = np.zeros(capacity)
        self._occupied = np.zeros(capacity, dtype=bool)
        self._slot_of: dict[int, int] = {}
        self._free = list(range(capacity - 1, -1, -1))
        self._next_id = 0
        self.counters = {"add": 0, "evict": 0, "update": 0, "stale": 0, "sample": 0}

    def __len__(self):
        return len(self._slot_of)

    @property
    def live_count(self):
        return len(self._slot_of)

    def priority(self, weight):
        if self.priority_floor:
            weight = max(weight, PRIORITY_FLOOR)
        return weight ** self.alpha

    def total(self):
        return self.tree.total()

    def _place(self, slot, entry):
        self.entries[slot] = entry
        self._slot_of[entry.entry_id] = slot
        self._weights[slot] = entry.weight
        self._occupied[slot] = True
        self.tree.set(slot, self.priority(entry.weight))
        self.mins.set(slot, entry.weight, entry.insert_step)

    def _forget(self, slot):
        # tree leaves are left as-is; the caller overwrites this slot next
        entry = self.entries[slot]
        del self._slot_of[entry.entry_id]
        self.entries[slot] = None
        self._occupied[slot] = False
        self._weights[slot] = 0.0
        return entry

    def add(self, example, init_weight, step=0):
        """Insert ``example``; a full buffer first evicts its lightest entry.

        Among equal minimum weights the oldest ``insert_step`` goes first.
        Returns the new entry id.
        """
        w = _check_weight(init_weight)
        if self._free:
            slot = self._free.pop()
        else:
            slot = self.mins.argmin()
            self._forget(slot)
            self.counters["evict"] += 1
        entry = BufferEntry(self._next_id, example, w, int(step))
        self._next_id += 1
        self._place(slot, entry)
        self.counters["add"] += 1
        return entry.entry_id

    def get(self, entry_id):
        slot = self._slot_of.get(entry_id)
        if slot is None:
            raise StaleEntryError(entry_id)
        return self.entries[slot]

    def __contains__(self, entry_id):
        return entry_id in self._slot_of

    def update(self, entry_id, new_weight):
        """Replace an entry's weight. Raises StaleEntryError for evicted ids."""
        w = _check_weight(new_weight)
        slot = self._slot_of.get(entry_id)
        if slot is None:
            self.counters["stale"] += 1
            raise StaleEntryError(entry_id)
        entry = self.entries[slot]
        entry.weight = w
        self._weights[slot] = w
        self.tree.set(slot, self.priority(w))
        self.mins.set(slot, w, entry.insert_step)
        self.counters["update"] += 1

    def sample_slots(self, k, rng):
        """Draw ``k`` slots with replacement; returns (slots, probabilities)."""
        total = self.tree.total()
        if not self._slot_of or not (total > 0.0):
            raise BufferNotReady(
                f"cannot sample: live_count={self.live_count}, total priority={total}")
        us = rng.uniform(0.0, total, size=int(k))
        # uniform() may round up to the open endpoint
        np.minimum(us, np.nextafter(total, 0.0), out=us)
        slots = self.tree.find_prefix_batch(us)
        probs = self.tree.leaves()[slots] / total
        return slots, probs

    def sample(self, k, rng):
        """``k`` independent draws, P(i) = w_i^alpha / sum_j w_j^alpha.

        Returns a list of ``(entry_id, example, probability)``; an entry may
        appear more than once.
        """
        slots, probs = self.sample_slots(k, rng)
        out = []
        entries = self.entries
        for slot, p in zip(slots.tolist(), probs.tolist()):
            e = entries[slot]
            e.sample_count += 1
            out.append((e.entry_id, e.example, p))
        self.counters["sample"] += len(out)
        return out

    def stats(self):
        n = self.live_count
        if n == 0:
            return {"mean_weight": 1.0, "min_weight": 0.0, "max_weight": 0.0, "live_count": 0}
        w = self._weights[self._occupied]
        return {
            "mean_weight": float(np.mean(w)),
            "min_weight": float(np.min(w)),
            "max_weight": float(np.max(w)),
            "live_count": n,
        }

    def live_entries(self):
        return [e for e in self.entries if e is not None]

    def probabilities(self):
        """Exact P(i) per live entry id."""
        total = self.tree.total()
        return {e.entry_id: self.tree.get(self._slot_of[e.entry_id]) / total
                for e in self.live_entries()}

    def audit_labels(self):
        """Entry ids whose stored labels disagree with a fresh recomputation."""
        bad = []
        for e in self.live_entries():
            ex = e.example
            if not np.array_equal(ex.labels, corruption_labels(ex.tokens, ex.original.ids)):
                bad.append(e.entry_id)
        return bad

    # -- checkpoint support -------------------------------------------------

    def to_arrays(self, seq_len):
        """Dense float64 arrays describing every slot (for the checkpoint blob)."""
        n = self.capacity
        tokens = np.zeros((n, seq_len))
        original = np.zeros((n, seq_len))
        masks = np.zeros((n, seq_len))
        # entry_id, weight, insert_step, sample_count, has_last_loss, last_loss, length, occupied
        meta = np.zeros((n, 8))
        for slot, e in enumerate(self.entries):
            if e is None:
                continue
            L = len(e.example)
            tokens[slot, :L] = e.example.tokens
            original[slot, :L] = e.example.original.ids
            masks[slot, e.example.mask_positions] = 1.0
            meta[slot] = (e.entry_id, e.weight, e.insert_step, e.sample_count,
                          e.last_loss is not None, e.last_loss or 0.0, L, 1.0)
        state = np.array([self._next_id, self.alpha, float(self.priority_floor)])
        return {"buffer.tokens": tokens, "buffer.original": original,
                "buffer.masks": masks, "buffer.meta": meta, "buffer.state": state}

    @classmethod
    def from_arrays(cls, arrays):
        meta = arrays["buffer.meta"]
        state = arrays["buffer.state"]
        buf = cls(meta.shape[0], alpha=state[1], priority_floor=bool(state[2]))
        slots = [s for s in range(meta.shape[0]) if meta[s, 7] == 1.0]
        for slot in slots:
            eid, w, step, count, has_loss, loss, L, _ = meta[slot]
            L = int(L)
            tokens = arrays["buffer.tokens"][slot, :L].astype(np.int64)
            orig = TokenSequence(arrays["buffer.original"][slot, :L].astype(np.int64))
            positions = np.flatnonzero(arrays["buffer.masks"][slot, :L])
            ex = CorruptedExample(tokens, orig, positions, corruption_labels(tokens, orig.ids))
            entry = BufferEntry(int(eid), ex, float(w), int(step), int(count),
                                float(loss) if has_loss else None)
            buf._place(slot, entry)
        buf._free = [s for s in range(buf.capacity - 1, -1, -1) if buf.entries[s] is None]
        buf._next_id = int(state[0])
        return buf
