import math

import numpy as np
import pytest

from treecrf import chart, oracle


@pytest.mark.parametrize("n, count", [(1, 1), (3, 2), (6, 42)])
def test_enumerate_counts(n, count):
    assert len(oracle.enumerate_trees(n)) == count


def test_enumeration_matches_catalan_and_is_valid():
    for n in range(1, 13):
        trees = oracle.enumerate_trees(n)
        assert len(trees) == oracle.catalan(n - 1)
        if n <= 8:
            assert len({frozenset(t) for t in trees}) == len(trees)
            for t in trees:
                chart.check_bracketing(t, n)


def test_enumeration_guard():
    with pytest.raises(ValueError):
        oracle.enumerate_trees(0)
    with pytest.raises(ValueError):
        oracle.enumerate_trees(13)


def test_brute_logZ_small():
    assert oracle.brute_logZ(np.zeros((3, 3)), 3) == pytest.approx(math.log(2))
    s = np.array([[0.0, 0.7], [0.0, 0.0]])
    assert oracle.brute_logZ(s, 2) == pytest.approx(0.7)


def test_brute_marginals_small():
    m = oracle.brute_marginals(np.random.default_rng(0).normal(size=(5, 5)), 5)
    assert m[0, 4] == pytest.approx(1.0)
    m = oracle.brute_marginals(np.zeros((3, 3)), 3)
    assert m[0, 1] == m[1, 2] == pytest.approx(0.5)


def test_finite_diff():
    assert oracle.finite_diff(lambda x: float(x[0] ** 2), [3.0], 1e-4)[0] == pytest.approx(6, abs=1e-7)
    assert np.all(oracle.finite_diff(lambda x: 1.0, np.ones(4)) == 0)
    with pytest.raises(ValueError):
        oracle.finite_diff(lambda x: float("inf"), [1.0])


def test_finite_diff_of_logZ_gives_marginals():
    s = np.random.default_rng(2).normal(size=(5, 5))
    fd = oracle.finite_diff(lambda x: chart.inside(x).logZ[0], s)
    np.testing.assert_allclose(np.triu(fd, 1), np.triu(chart.marginals(s)[0], 1), atol=1e-5)
