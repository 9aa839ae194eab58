import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tcmf.errors import InvalidArgument
from tcmf.measures import (
    dirac_flow,
    empirical,
    law_flow,
    law_flow_distance,
    mean_functional,
    wasserstein2,
)
from tcmf.noise import TimeGrid

samples = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=12)


def brute_force_w2(p, q):
    """Equal sizes: the optimal coupling is a permutation."""
    p, q = np.asarray(p), np.asarray(q)
    best = min(np.mean((p - q[list(perm)]) ** 2) for perm in itertools.permutations(range(q.size)))
    return np.sqrt(best)


def test_empty_rejected():
    with pytest.raises(InvalidArgument):
        empirical([])


def test_dirac_distance():
    assert wasserstein2(empirical([2.0]), empirical([-1.0])) == pytest.approx(3.0)


def test_shift_of_measure():
    P = empirical([0.0, 1.0, 5.0])
    assert wasserstein2(P, P.shift(2.5)) == pytest.approx(2.5)


def test_unequal_sizes_exact():
    # {0, 1} against {0, 0.5, 1}: quantile gap 0.5 on (1/3, 1/2) and (1/2, 2/3)
    d = wasserstein2(empirical([0.0, 1.0]), empirical([0.0, 0.5, 1.0]))
    assert d == pytest.approx(np.sqrt(2 * 0.25 / 6), rel=1e-14)


def test_mean_functional():
    P = empirical([1.0, 2.0, 3.0])
    assert mean_functional(P) == 2.0
    assert mean_functional(P, lambda x: x ** 2) == pytest.approx(14 / 3)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: st.tuples(
    st.lists(st.floats(-100, 100), min_size=n, max_size=n),
    st.lists(st.floats(-100, 100), min_size=n, max_size=n))))
def test_sorted_pairing_matches_permutation_search(pq):
    p, q = pq
    assert abs(wasserstein2(empirical(p), empirical(q)) - brute_force_w2(p, q)) <= 1e-12 * max(1, np.max(np.abs(p + q)))


@settings(max_examples=50, deadline=None)
@given(samples, samples)
def test_symmetry_and_nonnegativity(p, q):
    a = wasserstein2(empirical(p), empirical(q))
    b = wasserstein2(empirical(q), empirical(p))
    assert a >= 0
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(samples, samples, samples)
def test_triangle_inequality(p, q, r):
    P, Q, R = empirical(p), empirical(q), empirical(r)
    assert wasserstein2(P, R) <= wasserstein2(P, Q) + wasserstein2(Q, R) + 1e-9 * (1 + wasserstein2(P, R))


@settings(max_examples=50, deadline=None)
@given(samples, st.floats(-50, 50))
def test_translation(p, c):
    P = empirical(p)
    assert wasserstein2(P, P.shift(c)) == pytest.approx(abs(c), rel=1e-9, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(samples)
def test_duplicated_sample_is_same_law(p):
    assert wasserstein2(empirical(p), empirical(p + p)) == pytest.approx(0.0, abs=1e-9)


def test_law_flow_distance_is_max_marginal():
    g = TimeGrid(1.0, 2)
    a = np.array([[0.0, 1.0, 2.0], [0.0, 1.0, 3.0]])
    b = np.array([[0.0, 1.0, 2.0], [0.0, 1.0, 2.0]])
    Qa, Qb = law_flow(g, a), law_flow(g, b)
    expected = max(wasserstein2(Qa.at(i), Qb.at(i)) for i in range(3))
    assert law_flow_distance(Qa, Qb) == pytest.approx(expected)
    assert law_flow_distance(Qa, Qa) == 0.0


def test_law_flow_grid_mismatch():
    with pytest.raises(InvalidArgument):
        law_flow_distance(dirac_flow(TimeGrid(1.0, 2), 0.0), dirac_flow(TimeGrid(1.0, 3), 0.0))


def test_law_flow_at_time_and_csv(tmp_path):
    g = TimeGrid(1.0, 4)
    Q = law_flow(g, np.arange(10.0)[:, None] * np.ones(5))
    assert Q.at_time(0.3).mean() == Q.at(1).mean()
    Q.to_csv(tmp_path / "q.csv")
    header = (tmp_path / "q.csv").read_text().splitlines()[0]
    assert header.startswith("knot,t,q000") and header.endswith("q100")
