"""Pure-Python twin of the compiled ``_kernels`` module.

Same layout, same descent rule and same visit accounting, so swapping
backends never changes which leaf a draw lands on.
"""

import math

import numpy as np


def _padded(capacity):
    size = 1
    while size < capacity:
        size <<= 1
    return size


class SumTree:
    def __init__(self, capacity):
        capacity = int(capacity)
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.size = _padded(capacity)
        self.depth = self.size.bit_length() - 1
        self._nodes = [0.0] * (2 * self.size)
        self.visits = 0

    @property
    def leaf_count(self):
        return self.capacity

    def total(self):
        return self._nodes[1]

    def get(self, leaf):
        if leaf < 0 or leaf >= self.capacity:
            raise IndexError(f"leaf {leaf} out of range [0, {self.capacity})")
        return self._nodes[self.size + leaf]

    def set(self, leaf, weight):
        if leaf < 0 or leaf >= self.capacity:
            raise IndexError(f"leaf {leaf} out of range [0, {self.capacity})")
        weight = float(weight)
        if not (weight >= 0.0) or not math.isfinite(weight):
            raise ValueError(f"weight must be finite and >= 0, got {weight}")
        nodes = self._nodes
        node = self.size + leaf
        nodes[node] = weight
        touched = 1
        node >>= 1
        while node >= 1:
            nodes[node] = nodes[2 * node] + nodes[2 * node + 1]
            touched += 1
            node >>= 1
        self.visits += touched

    def _descend(self, u):
        nodes = self._nodes
        node = 1
        while node < self.size:
            left = 2 * node
            lw = nodes[left]
            rw = nodes[left + 1]
            if (u >= lw and rw > 0.0) or lw <= 0.0:
                u -= lw
                node = left + 1
            else:
                node = left
        return node - self.size

    def find_prefix(self, u):
        tot = self._nodes[1]
        if not (tot > 0.0):
            raise ValueError("cannot search an empty tree (total is 0)")
        if not (0.0 <= u < tot):
            raise ValueError(f"u={u} outside [0, {tot})")
        self.visits += self.depth + 1
        return self._descend(float(u))

    def find_prefix_batch(self, us):
        u = np.array(us, dtype=np.float64)
        m = u.shape[0]
        if m == 0:
            return np.empty(0, dtype=np.int64)
        tot = self._nodes[1]
        if not (tot > 0.0):
            raise ValueError("cannot search an empty tree (total is 0)")
        if not np.all((u >= 0.0) & (u < tot)):
            bad = u[~((u >= 0.0) & (u < tot))][0]
            raise ValueError(f"u={bad} outside [0, {tot})")
        nodes = np.asarray(self._nodes)
        node = np.ones(m, dtype=np.int64)
        for _ in range(self.depth):
            left = 2 * node
            lw = nodes[left]
            rw = nodes[left + 1]
            right = ((u >= lw) & (rw > 0.0)) | (lw <= 0.0)
            u = np.where(right, u - lw, u)
            node = np.where(right, left + 1, left)
        self.visits += m * (self.depth + 1)
        return node - self.size

    def leaves(self):
        return np.array(self._nodes[self.size:self.size + self.capacity])

    def nodes(self):
        return np.array(self._nodes)


class MinTree:
    """Argmin over (weight, stamp) keys; empty leaves hold (+inf, +inf)."""

    def __init__(self, capacity):
        capacity = int(capacity)
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.size = _padded(capacity)
        self.depth = self.size.bit_length() - 1
        self._w = [math.inf] * self.size
        self._s = [math.inf] * self.size
        arg = [0] * (2 * self.size)
        arg[self.size:] = range(self.size)
        for node in range(self.size - 1, 0, -1):
            arg[node] = arg[2 * node]
        self._arg = arg
        self.visits = 0

    def _less(self, a, b):
        w, s = self._w, self._s
        if w[a] != w[b]:
            return w[a] < w[b]
        if s[a] != s[b]:
            return s[a] < s[b]
        return a < b

    def set(self, leaf, weight, stamp):
        if leaf < 0 or leaf >= self.capacity:
            raise IndexError(f"leaf {leaf} out of range [0, {self.capacity})")
        self._w[leaf] = float(weight)
        self._s[leaf] = float(stamp)
        arg = self._arg
        node = (self.size + leaf) >> 1
        touched = 1
        while node >= 1:
            a = arg[2 * node]
            b = arg[2 * node + 1]
            arg[node] = b if self._less(b, a) else a
            touched += 1
            node >>= 1
        self.visits += touched

    def clear(self, leaf):
        self.set(leaf, math.inf, math.inf)

    def argmin(self):
        self.visits += 1
        a = self._arg[1]
        if self._w[a] == math.inf and self._s[a] == math.inf:
            return -1
        return a
