import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import naive_bracket, naive_norm, random_poly, random_sites
from qpnls.polynomial import (
    DimensionMismatch,
    HamiltonianPoly,
    Monomial,
    NormParams,
    both,
    dumps,
    grade_by_size,
    loads,
    meets_annulus,
    poisson_bracket,
    poly,
    resonant_split,
    size_at_most,
    sizes,
    truncate,
    weighted_norm,
)


def mono(**kw):
    """mono(s5=(1, 0)) -> q_5; keys are 's<site>' with '_' for a minus sign."""
    return Monomial.from_dict({(int(k[1:].replace("_", "-")),): v for k, v in kw.items()})


def P(terms, d=1):
    return poly(terms, d)


def close(A: HamiltonianPoly, B: dict, rel=1e-12):
    scale = max([abs(c) for c in B.values()] + [A.max_abs(), 1e-300])
    keys = set(A.terms) | set(B)
    return all(abs(A[m] - B.get(m, 0)) <= rel * scale for m in keys)


# --- monomials ------------------------------------------------------------------


def test_monomial_canonical_order_and_invariants():
    m = Monomial.from_dict({(3,): (1, 0), (-1,): (0, 2), (0,): (0, 0)})
    assert m.support == ((-1,), (3,))
    assert m.degree == 3
    assert m.delta == 4.0
    assert m == Monomial.from_dict({(-1,): (0, 2), (3,): (1, 0)})
    assert not m.is_resonant
    assert m.divisor_index == {(-1,): -2, (3,): 1}


def test_delta_is_euclidean_in_2d():
    m = Monomial.from_dict({(0, 0): (1, 0), (3, 4): (0, 1)})
    assert m.delta == 5.0
    assert Monomial.one().delta == 0 and Monomial.one().degree == 0


def test_negative_exponent_rejected():
    with pytest.raises(ValueError):
        Monomial.from_dict({(0,): (-1, 0)})


def test_constant_never_meets_annulus():
    assert not Monomial.one().intersects(0, 100)
    W = HamiltonianPoly({Monomial.one(): 3.0}, 1)
    assert weighted_norm(W, NormParams(1, 5, 3)) == 0


# --- weighted norm --------------------------------------------------------------


def test_norm_of_zero():
    assert weighted_norm(HamiltonianPoly({}, 1), NormParams(5, 2, 4)) == 0


def test_norm_hand_example():
    W = P([({(5,): (1, 0), (6,): (0, 1)}, 0.5)])
    assert weighted_norm(W, NormParams(5, 2, 4)) == pytest.approx(16.0, rel=1e-15)


def test_norm_support_outside_annulus():
    W = P([({(0,): (1, 0), (1,): (0, 1)}, 2.0)])
    assert weighted_norm(W, NormParams(100, 2, 4)) == 0


def test_norm_rejects_small_r():
    with pytest.raises(ValueError):
        NormParams(5, 2, 2.0)


@given(st.integers(0, 2**32 - 1), st.integers(1, 2))
def test_norm_matches_naive_sum(seed, d):
    rng = np.random.default_rng(seed)
    sites = random_sites(rng, d, 5, center=4)
    W = random_poly(rng, sites, d, 8, 4)
    p = NormParams(4, 1.5, 2.5)
    assert weighted_norm(W, p) == pytest.approx(naive_norm(W, 4, 1.5, 2.5), rel=1e-12)


@given(st.integers(0, 2**32 - 1), st.floats(0, 3), st.floats(0, 3), st.floats(2.01, 4), st.floats(0, 2))
def test_norm_monotone_in_N_and_r(seed, N1, dN, r1, dr):
    rng = np.random.default_rng(seed)
    sites = random_sites(rng, 1, 5, center=6)
    W = random_poly(rng, sites, 1, 6, 4)
    lo = weighted_norm(W, NormParams(6, N1, r1))
    hi = weighted_norm(W, NormParams(6, N1 + dN, r1 + dr))
    assert lo <= hi * (1 + 1e-12)


# --- Poisson bracket ------------------------------------------------------------


def test_bracket_of_mass_with_itself():
    W = P([({(3,): (1, 1)}, 1.0)])
    assert not poisson_bracket(W, W)


def test_bracket_hand_example():
    W = P([({(1,): (1, 0), (2,): (0, 1)}, 1.0)])
    U = P([({(2,): (1, 0), (1,): (0, 1)}, 1.0)])
    B = poisson_bracket(W, U)
    assert B.terms == {mono(s2=(1, 1)): 1j, mono(s1=(1, 1)): -1j}


def test_bracket_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        poisson_bracket(HamiltonianPoly({}, 1), HamiltonianPoly({}, 2))


def test_bracket_matches_naive_on_five_sites():
    rng = np.random.default_rng(7)
    sites = [(j,) for j in range(5)]
    for _ in range(20):
        W = random_poly(rng, sites, 1, 6, 4)
        U = random_poly(rng, sites, 1, 6, 4)
        assert close(poisson_bracket(W, U), naive_bracket(W, U))


@given(st.integers(0, 2**32 - 1), st.integers(1, 2))
def test_bracket_antisymmetric(seed, d):
    rng = np.random.default_rng(seed)
    sites = random_sites(rng, d, 4)
    W, U = random_poly(rng, sites, d, 5, 4), random_poly(rng, sites, d, 5, 4)
    assert close(poisson_bracket(W, U), (-poisson_bracket(U, W)).terms)


@given(st.integers(0, 2**32 - 1))
def test_jacobi_identity(seed):
    rng = np.random.default_rng(seed)
    sites = random_sites(rng, 1, 3)
    A, B, C = (random_poly(rng, sites, 1, 3, 3) for _ in range(3))
    total = (poisson_bracket(A, poisson_bracket(B, C)) + poisson_bracket(B, poisson_bracket(C, A))
             + poisson_bracket(C, poisson_bracket(A, B)))
    scale = max(1.0, *(abs(c) for X in (A, B, C) for c in X.terms.values())) ** 3
    assert total.max_abs() <= 1e-12 * scale


def test_disjoint_supports_commute():
    rng = np.random.default_rng(3)
    W = random_poly(rng, [(0,), (1,)], 1, 5, 4)
    U = random_poly(rng, [(5,), (6,)], 1, 5, 4)
    assert not poisson_bracket(W, U)


@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.9))
def test_bracket_norm_estimate(seed, frac):
    rng = np.random.default_rng(seed)
    j0, N, r = 8, 2, 2.5 + 2 * rng.random()
    sigma = frac * r / 2
    inside = [(j,) for j in range(j0 - N, j0 + N + 1)]
    W = random_poly(rng, inside, 1, 5, 4)
    U = random_poly(rng, inside + [(j0 + N + 1,), (j0 + N + 2,)], 1, 6, 4)
    if r - sigma <= 2:
        return
    lhs = weighted_norm(poisson_bracket(W, U), NormParams(j0, N, r - sigma))
    rhs = weighted_norm(W, NormParams(j0, N, r)) * weighted_norm(U, NormParams(j0, N, r)) / sigma
    assert lhs <= rhs * (1 + 1e-12)


# --- splitting and truncation -----------------------------------------------------


def test_resonant_split_examples():
    W = P([({(0,): (2, 2)}, 1.0)])
    Z, R = resonant_split(W)
    assert Z == W and not R
    W = P([({(0,): (1, 0), (1,): (0, 1)}, 1.0)])
    Z, R = resonant_split(W)
    assert not Z and R == W
    W = P([({(0,): (1, 1)}, 1.0), ({(0,): (1, 0), (1,): (0, 1)}, 1.0)])
    Z, R = resonant_split(W)
    assert Z.terms == {mono(s0=(1, 1)): 1.0} and R.terms == {mono(s0=(1, 0), s1=(0, 1)): 1.0}


@given(st.integers(0, 2**32 - 1))
def test_resonant_split_is_a_projection(seed):
    rng = np.random.default_rng(seed)
    W = random_poly(rng, random_sites(rng, 1, 4), 1, 8, 4)
    Z, R = resonant_split(W)
    assert Z + R == W or close(Z + R, W.terms, 0)
    assert resonant_split(Z) == (Z, HamiltonianPoly({}, 1))


def test_truncate_examples():
    W = P([({(5,): (1, 0), (6,): (0, 1)}, 1.0), ({(0,): (1, 0), (1,): (0, 1)}, 1.0)])
    assert truncate(W, lambda *_: True) == W
    assert truncate(W, meets_annulus(5, 2)).terms == {mono(s5=(1, 0), s6=(0, 1)): 1.0}
    seven = P([({(0,): (2, 1), (3,): (1, 0)}, 1.0)])  # Delta 3 + degree 4
    assert not truncate(seven, size_at_most(6))
    assert truncate(seven, both(size_at_most(7), meets_annulus(1, 1))) == seven


def test_grade_by_size_examples():
    W = P([({(0,): (2, 2)}, 1.0)])
    p = NormParams(0, 1, 3)
    assert grade_by_size(W, 4, p) == weighted_norm(W, p)
    assert grade_by_size(W, 3, p) == 0
    assert grade_by_size(HamiltonianPoly({}, 1), 5, p) == 0
    with pytest.raises(ValueError):
        grade_by_size(W, 2, p)


@given(st.integers(0, 2**32 - 1), st.integers(1, 2))
def test_slices_partition_the_norm(seed, d):
    rng = np.random.default_rng(seed)
    W = random_poly(rng, random_sites(rng, d, 5), d, 10, 4)
    W = W.filter(lambda m: m.size >= 3)
    p = NormParams(1, 3, 2.7)
    total = sum(grade_by_size(W, A, p) for A in sizes(W))
    assert total == pytest.approx(weighted_norm(W, p), rel=1e-12, abs=1e-300)


def test_prune_threshold_relative_to_max():
    W = HamiltonianPoly({mono(s0=(1, 1)): 1.0, mono(s1=(1, 1)): 1e-17, mono(s2=(1, 1)): 1e-15}, 1)
    assert mono(s1=(1, 1)) not in W and mono(s2=(1, 1)) in W


def test_conjugation_symmetry():
    W = P([({(0,): (1, 0), (1,): (0, 1)}, 0.5 + 0.25j), ({(1,): (1, 0), (0,): (0, 1)}, 0.5 - 0.25j)])
    assert W.is_real()
    assert not P([({(0,): (1, 0), (1,): (0, 1)}, 1.0)]).is_real()


def test_evaluate_real_hamiltonian_is_real():
    W = P([({(0,): (1, 0), (1,): (0, 1)}, 0.3j), ({(1,): (1, 0), (0,): (0, 1)}, -0.3j), ({(0,): (2, 2)}, 1.0)])
    z = W.evaluate({(0,): 0.3 + 0.4j, (1,): -1 + 0.2j})
    assert abs(z.imag) < 1e-15


# --- serialization -------------------------------------------------------------


@given(st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_text_round_trip_is_bit_exact(seed, d):
    rng = np.random.default_rng(seed)
    W = random_poly(rng, random_sites(rng, d, 5), d, 8, 4)
    back = loads(dumps(W))
    assert back.d == d
    assert back.terms == W.terms


def test_text_format_layout():
    W = P([({(5,): (1, 0), (-6,): (0, 1)}, 0.5)])
    assert dumps(W) == "#! d=1\n-6:(0,1) 5:(1,0) # 0.5 0.0\n"
    assert loads("#! d=2\n1,2:(1,1) # 1.0 -2.0\n").terms == {
        Monomial.from_dict({(1, 2): (1, 1)}): 1 - 2j
    }


@pytest.mark.parametrize("text", ["1:(1,0)\n", "x:(1,0) # 1 0\n", "1:(1,0) # 1\n", "1:(1,0) 1:(0,1) # 1 0\n"])
def test_text_format_rejects_garbage(text):
    with pytest.raises(ValueError):
        loads(text)
