import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmr import _kernels_py
from tmr.sumtree import BACKEND, MinTree, SumTree

BACKENDS = [pytest.param(_kernels_py, id="python")]
try:
    from tmr import _kernels

    BACKENDS.append(pytest.param(_kernels, id="cython"))
except ImportError:  # pragma: no cover
    pass


@pytest.fixture(params=BACKENDS)
def kern(request):
    return request.param


def make_tree(kern, weights):
    t = kern.SumTree(len(weights))
    for i, w in enumerate(weights):
        t.set(i, w)
    return t


def cumsum_oracle(leaves, u):
    """Leaf i with cumsum[:i] <= u < cumsum[:i+1], skipping zero leaves."""
    acc = 0.0
    for i, w in enumerate(leaves):
        if w > 0 and acc <= u < acc + w:
            return i
        acc += w
    raise AssertionError("u outside total")


def test_compiled_backend_is_selected():
    assert BACKEND in ("cython", "python")
    assert SumTree is not None and MinTree is not None


class TestTreeSet:
    def test_set_leaf_to_zero(self, kern):
        t = make_tree(kern, [1, 2, 3, 4])
        t.set(2, 0.0)
        assert list(t.leaves()) == [1, 2, 0, 4]
        assert t.total() == 7

    def test_identity_set(self, kern):
        t = make_tree(kern, [1, 2, 3, 4])
        t.set(1, 2.0)
        assert t.total() == 10

    def test_visits_on_1024_leaves(self, kern):
        t = kern.SumTree(1024)
        before = t.visits
        t.set(517, 3.0)
        assert t.visits - before == 11

    @pytest.mark.parametrize("bad", [-1.0, math.nan, math.inf])
    def test_rejects_bad_weights(self, kern, bad):
        t = kern.SumTree(4)
        with pytest.raises(ValueError):
            t.set(0, bad)

    @pytest.mark.parametrize("leaf", [-1, 4, 100])
    def test_rejects_out_of_range_leaf(self, kern, leaf):
        t = kern.SumTree(4)
        with pytest.raises(IndexError):
            t.set(leaf, 1.0)

    def test_internal_nodes_are_child_sums(self, kern):
        rng = np.random.default_rng(0)
        t = kern.SumTree(37)
        for _ in range(500):
            t.set(int(rng.integers(37)), float(rng.exponential()))
        nodes = t.nodes()
        for node in range(1, t.size):
            assert nodes[node] == nodes[2 * node] + nodes[2 * node + 1]
        assert math.isclose(t.total(), math.fsum(t.leaves()), rel_tol=1e-9)


class TestFindPrefix:
    @pytest.mark.parametrize("u,leaf", [(0.5, 0), (2.9, 1), (6.0, 3), (0.0, 0), (9.999, 3)])
    def test_spec_points(self, kern, u, leaf):
        t = make_tree(kern, [1, 2, 3, 4])
        assert t.find_prefix(u) == leaf == cumsum_oracle([1, 2, 3, 4], u)

    def test_zero_leaf_unreachable(self, kern):
        t = make_tree(kern, [0, 5])
        for u in np.linspace(0, 5, 101)[:-1]:
            assert t.find_prefix(u) == 1

    @pytest.mark.parametrize("u", [-0.1, 10.0, 11.0, math.nan])
    def test_out_of_range(self, kern, u):
        t = make_tree(kern, [1, 2, 3, 4])
        with pytest.raises(ValueError):
            t.find_prefix(u)

    def test_empty_tree(self, kern):
        with pytest.raises(ValueError):
            kern.SumTree(4).find_prefix(0.0)

    def test_uniform_leaves_monte_carlo(self, kern):
        n = 16
        t = make_tree(kern, [1.0] * n)
        rng = np.random.default_rng(1)
        leaves = t.find_prefix_batch(rng.uniform(0, n, size=10**6))
        freq = np.bincount(leaves, minlength=n) / 10**6
        assert np.all(np.abs(freq - 1 / n) < 0.01 / n)

    def test_batch_matches_scalar_and_oracle(self, kern):
        rng = np.random.default_rng(2)
        w = rng.exponential(size=13)
        w[[2, 7]] = 0.0
        t = make_tree(kern, w)
        us = rng.uniform(0, t.total(), size=2000)
        batch = t.find_prefix_batch(us)
        assert list(batch) == [t.find_prefix(u) for u in us]
        # the cumsum oracle differs from the tree only within rounding of a boundary
        agree = np.mean([cumsum_oracle(w, u) == b for u, b in zip(us, batch)])
        assert agree > 0.999
        assert not np.isin(batch, [2, 7]).any()

    @pytest.mark.parametrize("cap", [1, 2, 5, 16, 1000])
    def test_visit_count_per_descent(self, kern, cap):
        t = make_tree(kern, [1.0] * cap)
        v0 = t.visits
        t.find_prefix(0.0)
        assert t.visits - v0 == math.ceil(math.log2(cap)) + 1
        v0 = t.visits
        t.find_prefix_batch(np.zeros(7))
        assert t.visits - v0 == 7 * (math.ceil(math.log2(cap)) + 1)


def test_backends_agree_bitwise():
    if len(BACKENDS) < 2:
        pytest.skip("compiled backend not built")
    rng = np.random.default_rng(3)
    a, b = _kernels_py.SumTree(100), _kernels.SumTree(100)
    for _ in range(1000):
        leaf, w = int(rng.integers(100)), float(rng.exponential())
        a.set(leaf, w)
        b.set(leaf, w)
    assert np.array_equal(a.nodes(), b.nodes())
    us = rng.uniform(0, a.total(), size=5000)
    assert np.array_equal(a.find_prefix_batch(us), b.find_prefix_batch(us))


class TestMinTree:
    def test_empty_returns_minus_one(self, kern):
        assert kern.MinTree(8).argmin() == -1

    def test_lowest_weight_then_oldest(self, kern):
        m = kern.MinTree(5)
        m.set(0, 2.0, 0)
        m.set(1, 1.0, 5)
        m.set(2, 1.0, 3)
        m.set(3, 4.0, 1)
        assert m.argmin() == 2
        m.clear(2)
        assert m.argmin() == 1

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 9), st.floats(0, 5), st.integers(0, 50)),
                    min_size=1, max_size=60))
    def test_matches_brute_force(self, ops):
        for kern in (p.values[0] for p in BACKENDS):
            m = kern.MinTree(10)
            keys = {}
            for leaf, w, s in ops:
                m.set(leaf, w, s)
                keys[leaf] = (w, s, leaf)
            assert m.argmin() == min(keys.values())[2]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20), st.floats(0, 1e6)), min_size=1, max_size=200))
def test_sum_consistency_property(ops):
    for kern in (p.values[0] for p in BACKENDS):
        t = kern.SumTree(21)
        leaves = [0.0] * 21
        for leaf, w in ops:
            t.set(leaf, w)
            leaves[leaf] = w
        assert list(t.leaves()) == leaves
        assert math.isclose(t.total(), math.fsum(leaves), rel_tol=1e-9, abs_tol=1e-300)
