import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nalattice.generators import GaussianNearestNeighbor, GeneratorSpec, IidNormal, Multinomial
from nalattice.lattice import Field
from nalattice.oracles import (BRUTE_FORCE_MAX_CELLS, DiscreteLaw, brute_force_partial_sums, exact_distribution_tiny,
                               exact_expectation, monotone_function, multinomial_exact_cov, na_covariance_probe)


def test_brute_force_example():
    s = brute_force_partial_sums(Field.from_array(np.array([[1, -2], [3, 4]])))
    assert (s.total, s.max_abs, s.max_signed) == (6, 6, 6)


def test_brute_force_cap():
    with pytest.raises(ValueError):
        brute_force_partial_sums(Field.from_array(np.zeros(BRUTE_FORCE_MAX_CELLS + 1)))


def test_exact_rademacher_fourth_moment():
    law = DiscreteLaw.iid([-1, 1], [0.5, 0.5], (2,))
    assert exact_expectation(law, "abs_S_pow:4") == 8.0
    assert exact_distribution_tiny(law, "S") == [(-2.0, 0.25), (0.0, 0.5), (2.0, 0.25)]


def test_exact_max_law_on_three_cells():
    law = DiscreteLaw.iid([-1, 1], [0.5, 0.5], (3,))
    dist = dict(exact_distribution_tiny(law, "M"))
    # M = 1 unless the first two steps share a sign (then 2), or all three do (then 3)
    assert dist == pytest.approx({1.0: 0.5, 2.0: 0.25, 3.0: 0.25})


def test_discrete_law_validation():
    with pytest.raises(ValueError):
        DiscreteLaw((2,), [[0, 0], [1, 1]], [0.5, 0.6])
    with pytest.raises(ValueError):
        DiscreteLaw((2,), [[0, 0]], [0.5, 0.5])


@pytest.mark.parametrize("total,shape", [(t, s) for t in (1, 2, 3) for s in ((2,), (3,), (1, 3))])
def test_multinomial_pairwise_covariances_nonpositive(total, shape):
    law = DiscreteLaw.multinomial(total, shape)
    assert law.probs.sum() == pytest.approx(1.0, abs=1e-12)
    x = law.outcomes
    mean = law.probs @ x
    assert np.allclose(mean, 0.0, atol=1e-12)
    cov = (x * law.probs[:, None]).T @ x
    cells = x.shape[1]
    for i, j in itertools.combinations(range(cells), 2):
        assert cov[i, j] <= 1e-15
        assert cov[i, j] == pytest.approx(-total / cells**2, abs=1e-12)


@pytest.mark.parametrize("total,cells,want", [(2, 2, -0.5), (1, 2, -0.25), (4, 4, -0.25)])
def test_multinomial_exact_cov(total, cells, want):
    assert multinomial_exact_cov(total, cells) == pytest.approx(want, abs=1e-15)


@settings(max_examples=30)
@given(st.integers(1, 4), st.integers(2, 9))
def test_enumeration_agrees_with_closed_form(total, cells):
    assert multinomial_exact_cov(total, cells) == pytest.approx(-total / cells**2, abs=1e-14)


def test_probe_multinomial():
    probe = na_covariance_probe(GeneratorSpec(Multinomial(2), (2,), 1), [(1,)], [(2,)], reps=20_000)
    assert abs(probe.estimate.mean + 0.5) < 4 * probe.estimate.stderr
    assert probe.consistent


@pytest.mark.parametrize("f,g", [("sum", "sum"), ("max", "min"), ("clip_sum:0.5", "indicator_sum_gt:0"),
                                 ("first", "max")])
def test_probe_gaussian_nn_consistent(f, g):
    spec = GeneratorSpec(GaussianNearestNeighbor(0.2), (4, 4), 3)
    probe = na_covariance_probe(spec, [(1, 1), (1, 2)], [(2, 1), (2, 2), (1, 3)], f, g, reps=20_000)
    assert probe.consistent


def test_probe_independent_near_zero():
    spec = GeneratorSpec(IidNormal(), (3, 3), 4)
    probe = na_covariance_probe(spec, [(1, 1)], [(3, 3)], reps=20_000)
    assert abs(probe.estimate.mean) < 4 * probe.estimate.stderr


def test_probe_rejects_overlap_and_range():
    spec = GeneratorSpec(IidNormal(), (3, 3))
    with pytest.raises(ValueError):
        na_covariance_probe(spec, [(1, 1)], [(1, 1)], reps=10)
    with pytest.raises(IndexError):
        na_covariance_probe(spec, [(1, 1)], [(4, 1)], reps=10)


@pytest.mark.parametrize("name", ["sum", "max", "min", "first", "clip_sum:1", "indicator_sum_gt:0.5"])
def test_monotone_functions_are_monotone(name):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((500, 4))
    f = monotone_function(name)
    bump = np.abs(rng.standard_normal((500, 4)))
    assert np.all(f(x + bump) >= f(x) - 1e-12)


def test_unknown_monotone_function():
    with pytest.raises(ValueError):
        monotone_function("median")
