# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled sum tree and min tree used by the replay buffer.

Both trees are 1-indexed binary heaps over a power-of-two number of leaves:
node 1 is the root and leaf ``i`` lives at node ``size + i``. Every method
that walks the tree adds the number of nodes it touched to ``visits`` so the
O(log N) claims can be checked by counting.

The pure-Python twin in ``_kernels_py`` must make bit-identical decisions.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport isfinite, INFINITY

cnp.import_array()


cdef Py_ssize_t _padded(Py_ssize_t capacity):
    cdef Py_ssize_t size = 1
    while size < capacity:
        size <<= 1
    return size


cdef class SumTree:
    cdef double[::1] _nodes
    cdef readonly Py_ssize_t capacity
    cdef readonly Py_ssize_t size
    cdef readonly int depth
    cdef public long long visits

    def __init__(self, Py_ssize_t capacity):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.size = _padded(capacity)
        self.depth = 0
        while (1 << self.depth) < self.size:
            self.depth += 1
        self._nodes = np.zeros(2 * self.size, dtype=np.float64)
        self.visits = 0

    @property
    def leaf_count(self):
        return self.capacity

    cpdef double total(self):
        return self._nodes[1]

    cpdef double get(self, Py_ssize_t leaf):
        if leaf < 0 or leaf >= self.capacity:
            raise IndexError(f"leaf {leaf} out of range [0, {self.capacity})")
        return self._nodes[self.size + leaf]

    cpdef void set(self, Py_ssize_t leaf, double weight) except *:
        if leaf < 0 or leaf >= self.capacity:
            raise IndexError(f"leaf {leaf} out of range [0, {self.capacity})")
        if not (weight >= 0.0) or not isfinite(weight):
            raise ValueError(f"weight must be finite and >= 0, got {weight}")
        cdef Py_ssize_t node = self.size + leaf
        cdef long long touched = 1
        self._nodes[node] = weight
        node >>= 1
        while node >= 1:
            self._nodes[node] = self._nodes[2 * node] + self._nodes[2 * node + 1]
            touched += 1
            node >>= 1
        self.visits += touched

    cdef Py_ssize_t _descend(self, double u) nogil:
        cdef Py_ssize_t node = 1
        cdef Py_ssize_t left
        cdef double lw, rw
        while node < self.size:
            left = 2 * node
            lw = self._nodes[left]
            rw = self._nodes[left + 1]
            if (u >= lw and rw > 0.0) or lw <= 0.0:
                u -= lw
                node = left + 1
            else:
                node = left
        return node - self.size

    cpdef Py_ssize_t find_prefix(self, double u) except -1:
        cdef double tot = self._nodes[1]
        if not (tot > 0.0):
            raise ValueError("cannot search an empty tree (total is 0)")
        if not (u >= 0.0 and u < tot):
            raise ValueError(f"u={u} outside [0, {tot})")
        self.visits += self.depth + 1
        return self._descend(u)

    def find_prefix_batch(self, us):
        cdef double[::1] uv = np.ascontiguousarray(us, dtype=np.float64)
        cdef Py_ssize_t m = uv.shape[0]
        out = np.empty(m, dtype=np.int64)
        cdef long long[::1] ov = out
        cdef double tot = self._nodes[1]
        cdef Py_ssize_t i
        if m == 0:
            return out
        if not (tot > 0.0):
            raise ValueError("cannot search an empty tree (total is 0)")
        for i in range(m):
            if not (uv[i] >= 0.0 and uv[i] < tot):
                raise ValueError(f"u={uv[i]} outside [0, {tot})")
        with nogil:
            for i in range(m):
                ov[i] = self._descend(uv[i])
        self.visits += m * (self.depth + 1)
        return out

    def leaves(self):
        return np.asarray(self._nodes[self.size:self.size + self.capacity]).copy()

    def nodes(self):
        return np.asarray(self._nodes).copy()


cdef class MinTree:
    """Argmin over (weight, stamp) keys; empty leaves hold (+inf, +inf)."""

    cdef double[::1] _w
    cdef double[::1] _s
    cdef long long[::1] _arg
    cdef readonly Py_ssize_t capacity
    cdef readonly Py_ssize_t size
    cdef readonly int depth
    cdef public long long visits

    def __init__(self, Py_ssize_t capacity):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.size = _padded(capacity)
        self.depth = 0
        while (1 << self.depth) < self.size:
            self.depth += 1
        self._w = np.full(self.size, np.inf)
        self._s = np.full(self.size, np.inf)
        arg = np.zeros(2 * self.size, dtype=np.int64)
        arg[self.size:] = np.arange(self.size)
        # ties resolve to the lower leaf index, so the initial fill is exact
        for node in range(self.size - 1, 0, -1):
            arg[node] = arg[2 * node]
        self._arg = arg
        self.visits = 0

    cdef inline bint _less(self, long long a, long long b) nogil:
        if self._w[a] != self._w[b]:
            return self._w[a] < self._w[b]
        if self._s[a] != self._s[b]:
            return self._s[a] < self._s[b]
        return a < b

    cdef void _refresh(self, Py_ssize_t leaf) noexcept nogil:
        cdef Py_ssize_t node = (self.size + leaf) >> 1
        cdef long long a, b
        cdef long long touched = 1
        while node >= 1:
            a = self._arg[2 * node]
            b = self._arg[2 * node + 1]
            self._arg[node] = b if self._less(b, a) else a
            touched += 1
            node >>= 1
        self.visits += touched

    cpdef void set(self, Py_ssize_t leaf, double weight, double stamp) except *:
        if leaf < 0 or leaf >= self.capacity:
            raise IndexError(f"leaf {leaf} out of range [0, {self.capacity})")
        self._w[leaf] = weight
        self._s[leaf] = stamp
        self._refresh(leaf)

    cpdef void clear(self, Py_ssize_t leaf) except *:
        self.set(leaf, INFINITY, INFINITY)

    cpdef Py_ssize_t argmin(self):
        self.visits += 1
        cdef long long a = self._arg[1]
        if self._w[a] == INFINITY and self._s[a] == INFINITY:
            return -1
        return a
