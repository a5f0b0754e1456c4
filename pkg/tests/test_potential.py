import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qpnls.potential import (
    PotentialSpec,
    cos_matrix,
    eval_potential,
    potential_batch,
    potential_vector,
    random_spec,
    validate_spec,
)


def spec1(theta=0.0, alpha=0.0, v=1.0, ell=1):
    return PotentialSpec(1, max(1, abs(ell)), (((ell,), v),), (theta,), (alpha,))


def test_validate_accepts_single_frequency():
    assert validate_spec(spec1()) == []


def test_validate_zero_component():
    spec = PotentialSpec(2, 1, (((1, 0), 1.0),))
    (v,) = validate_spec(spec)
    assert v.condition == "a" and "(1, 0)" in v.detail


def test_validate_opposite_pair():
    spec = PotentialSpec(1, 2, (((2,), 1.0), ((-2,), 0.5)))
    (v,) = validate_spec(spec)
    assert v.condition == "b"


def test_validate_reports_every_problem():
    spec = PotentialSpec(2, 1, (((1, 0), 1.0), ((3, 1), 1.0), ((3, 1), 2.0)))
    conds = sorted(v.condition for v in validate_spec(spec))
    assert conds == ["L", "L", "a", "duplicate"]
    assert validate_spec(PotentialSpec(1, 1, ())) [0].condition == "empty"


def test_eval_examples():
    assert eval_potential(spec1(0.0, 0.37), (0,)) == 1.0
    assert abs(eval_potential(spec1(0.25, 0.0), (7,))) < 1e-15
    spec = PotentialSpec(2, 1, (((1, 1), 2.0),), (0.1, 0.2), (0.3, 0.4))
    assert eval_potential(spec, (1, 1)) == pytest.approx(2.0, abs=1e-14)


def test_vector_single_site_and_constant_alpha():
    spec = spec1(0.3, 0.0)
    assert potential_vector(spec, [(5,)])[0] == eval_potential(spec, (5,))
    V = potential_vector(spec, [(j,) for j in range(-10, 11)])
    assert np.all(V == V[0])
    with pytest.raises(ValueError):
        potential_vector(spec, [])


@given(st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_vector_matches_per_site_bitwise(seed, d):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, d, 3, 3)
    sites = [tuple(int(x) for x in rng.integers(-50, 50, d)) for _ in range(12)]
    V = potential_vector(spec, sites)
    assert all(V[i] == eval_potential(spec, s) for i, s in enumerate(sites))


@given(st.integers(0, 2**32 - 1), st.integers(1, 2))
def test_random_spec_valid_and_bounded(seed, d):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, d, 3, 3)
    assert validate_spec(spec) == []
    sites = [tuple(int(x) for x in rng.integers(-1000, 1000, d)) for _ in range(20)]
    assert np.all(np.abs(potential_vector(spec, sites)) <= spec.amplitude_sum + 1e-12)


@given(st.integers(0, 2**32 - 1))
def test_quasi_periodic_shift(seed):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, 2, 2, 2)
    j = tuple(int(x) for x in rng.integers(-20, 20, 2))
    m = tuple(int(x) for x in rng.integers(-20, 20, 2))
    shifted = spec.with_phases([t + k * a for t, k, a in zip(spec.theta, m, spec.alpha)], spec.alpha)
    lhs = eval_potential(spec, tuple(a + b for a, b in zip(j, m)))
    assert lhs == pytest.approx(eval_potential(shifted, j), abs=1e-12)


def test_large_site_reduction_is_accurate():
    # mpmath-free reference: exact rational phase with alpha = 1/8
    spec = spec1(0.0, 0.125, ell=3)
    for j in (10**4, 10**5 + 3, -(10**6) - 1):
        exact = math.cos(2 * math.pi * ((3 * j) % 8) / 8)
        assert eval_potential(spec, (j,)) == pytest.approx(exact, abs=1e-14)


def test_batch_matches_vector():
    rng = np.random.default_rng(5)
    spec = random_spec(rng, 2, 2, 3)
    sites = [(0, 0), (3, -2), (10, 7)]
    theta, alpha = rng.random((4, 2)), rng.random((4, 2))
    B = potential_batch(spec, sites, theta, alpha)
    for s in range(4):
        ref = potential_vector(spec.with_phases(theta[s], alpha[s]), sites)
        np.testing.assert_allclose(B[s], ref, rtol=0, atol=1e-14)


def test_cos_matrix_shape():
    spec = PotentialSpec(1, 2, (((1,), 1.0), ((2,), 0.5)), (0.1,), (0.2,))
    assert cos_matrix(spec, [(0,), (1,), (2,)]).shape == (3, 2)
