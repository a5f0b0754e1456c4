import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import random_poly
from qpnls.polynomial import (
    HamiltonianPoly,
    Monomial,
    NormParams,
    both,
    diagonal,
    meets_annulus,
    poisson_bracket,
    poly,
    resonant_split,
    size_at_most,
    truncate,
    weighted_norm,
)
from qpnls.potential import PotentialSpec, potential_vector
from qpnls.normal_form import (
    BnfAborted,
    BnfConfig,
    BnfState,
    BoxTooSmall,
    ContractionError,
    SmallDivisorError,
    annulus_box,
    bnf_step,
    bonds,
    build_hamiltonian,
    classify_remainder,
    flux,
    ledger_rows,
    lie_order,
    lie_series,
    lie_transform,
    run_bnf,
    solve_homological,
)

GOLDEN = (math.sqrt(5) - 1) / 2
SPEC = PotentialSpec(1, 1, (((1,), 1.0),), (0.1234,), (GOLDEN,))


def m(**kw):
    return Monomial.from_dict({(int(k[1:].replace("_", "-")),): v for k, v in kw.items()})


def omega_for(sites, spec=SPEC):
    return dict(zip(sites, potential_vector(spec, sites).tolist()))


# --- configuration ---------------------------------------------------------------


def test_config_schedule():
    c = BnfConfig(M=2, j0=12, r=4.2, epsilon1=5e-5, epsilon2=9.5e-4)
    assert c.sigma == pytest.approx(1.05)
    assert c.radius(3) == pytest.approx(2.1)
    assert [c.N(s) for s in (1, 2, 3)] == [4, 2, 2]
    big = BnfConfig(M=10, j0=200, r=5, epsilon1=0, epsilon2=0)
    assert [big.N(s) for s in (1, 2, 3, 4)] == [100, 80, 60, 50]


@pytest.mark.parametrize("kw", [dict(r=4.0), dict(epsilon1=1.5), dict(M=0), dict(tau=-1.0)])
def test_config_rejects_bad_values(kw):
    base = dict(M=2, j0=12, r=4.2, epsilon1=0.0, epsilon2=0.0)
    with pytest.raises(ValueError):
        BnfConfig(**{**base, **kw})


def test_lie_order():
    assert lie_order(0.0, 60) == 0
    assert lie_order(0.5, 60) == math.ceil(math.log(1e-14) / math.log(0.5)) - 1
    assert 0.5 ** (lie_order(0.5, 60) + 1) <= 1e-14
    assert lie_order(2.0, 7) == 7


# --- build_hamiltonian ------------------------------------------------------------


def test_build_zero_coupling():
    D, Z1, R1 = build_hamiltonian(SPEC, [(j,) for j in range(5)], 0.0, 0.0)
    assert not Z1 and not R1 and len(D) == 5


def test_build_two_site_box():
    D, Z1, R1 = build_hamiltonian(SPEC, [(0,), (1,)], 0.3, 0.2)
    assert R1.terms == {m(s0=(1, 0), s1=(0, 1)): 0.15, m(s1=(1, 0), s0=(0, 1)): 0.15}
    assert Z1.terms == {m(s0=(2, 2)): 0.05, m(s1=(2, 2)): 0.05}
    V = potential_vector(SPEC, [(0,), (1,)])
    assert D.terms == {m(s0=(1, 1)): 0.5 * V[0], m(s1=(1, 1)): 0.5 * V[1]}


def test_bonds_in_two_dimensions():
    box = [(i, j) for i in range(3) for j in range(2)]
    assert len(bonds(box)) == 2 * (2 * 2 + 3 * 1)


def test_box_too_small():
    box = [(j,) for j in range(-14, 14)]  # misses the neighbour 14 of A(12, 1)
    with pytest.raises(BoxTooSmall, match="14"):
        build_hamiltonian(SPEC, box, 0.1, 0.1, j0=12, N=1)
    build_hamiltonian(SPEC, [(j,) for j in range(-14, 15)], 0.1, 0.1, j0=12, N=1)


def test_annulus_box_is_euclidean():
    box = annulus_box(2, 5, 1)
    assert all(4 - 1e-12 <= math.hypot(*s) <= 6 + 1e-12 for s in box)
    assert (3, 4) in box and (0, 0) not in box


# --- homological equation -------------------------------------------------------


def test_solve_bond_term():
    om = {(3,): 0.7, (4,): -0.2}
    F, dropped = solve_homological(poly([({(3,): (1, 0), (4,): (0, 1)}, 0.25)]), om, 1e-8)
    assert not dropped
    assert F.terms == {m(s3=(1, 0), s4=(0, 1)): pytest.approx(0.25 / (0.5j * (0.7 + 0.2)))}


def test_solve_resonant_term_is_dropped():
    W = poly([({(2,): (2, 2)}, 1.0)])
    F, dropped = solve_homological(W, {(2,): 0.3}, 1e-8)
    assert not F and dropped == W


def test_small_divisor_names_monomial():
    W = poly([({(3,): (1, 0), (4,): (0, 1)}, 1.0)])
    with pytest.raises(SmallDivisorError) as info:
        solve_homological(W, {(3,): 0.5, (4,): 0.5 - 1e-9}, 1e-6)
    assert str(next(iter(W))) in str(info.value)


@given(st.integers(0, 2**32 - 1))
def test_homological_residual(seed):
    rng = np.random.default_rng(seed)
    sites = [(j,) for j in range(6)]
    om = dict(zip(sites, rng.uniform(-1, 1, 6).tolist()))
    R = random_poly(rng, sites, 1, 10, 4)
    F, dropped = solve_homological(R, om, 0.0)
    D = diagonal(om, 1)
    nonres = R - dropped
    res = poisson_bracket(F, D) - nonres
    assert res.max_abs() <= 1e-12 * max(nonres.max_abs(), 1e-300)
    assert not resonant_split(dropped)[1]


# --- Lie transform ----------------------------------------------------------------


def test_lie_transform_zero_generator():
    D = diagonal({(0,): 1.0, (1,): 2.0}, 1)
    Z = poly([({(0,): (2, 2)}, 0.1)])
    R = poly([({(0,): (1, 0), (1,): (0, 1)}, 0.2)])
    out = lie_transform((D, Z, R), HamiltonianPoly({}, 1), 10)
    assert out == D + Z + R


def test_first_order_annihilates_selected_terms():
    sites = [(j,) for j in range(10, 15)]
    om = omega_for(sites)
    D = diagonal(om, 1)
    R = HamiltonianPoly({Monomial.from_dict({a: (1, 0), b: (0, 1)}): 1e-3 for a, b in bonds(sites)}, 1)
    F, _ = solve_homological(R, om, 1e-8)
    assert (poisson_bracket(D, F) + R).max_abs() <= 1e-12 * R.max_abs()
    out = lie_transform((D, HamiltonianPoly({}, 1), R), F, 1) - D
    # only the second-order term {R, F} is left over
    assert (out - poisson_bracket(R, F)).max_abs() <= 1e-12 * R.max_abs()


@given(st.integers(0, 2**32 - 1), st.floats(0.1, 0.9))
def test_lie_series_first_order_estimate(seed, frac):
    rng = np.random.default_rng(seed)
    j0, N, r = 8, 2, 2.5 + 2 * rng.random()
    sigma = frac * (r - 2)
    inside = [(j,) for j in range(j0 - N, j0 + N + 1)]
    F = random_poly(rng, inside, 1, 4, 2, gauge=True)  # quadratic: ad_F keeps degrees bounded
    p_r = NormParams(j0, N, r)
    normF = weighted_norm(F, p_r)
    if normF == 0:
        return
    F = F * (0.4 * sigma / (math.e * normF))  # enforce (e/sigma)||F|| = 0.4
    U = random_poly(rng, inside + [(j0 + N + 1,)], 1, 6, 4)
    diff = lie_series(U, F, 40) - U
    lhs = weighted_norm(diff, NormParams(j0, N, r - sigma))
    rhs = math.e / sigma * weighted_norm(F, p_r) * weighted_norm(U, p_r)
    assert lhs <= rhs * (1 + 1e-9)


# --- one step ---------------------------------------------------------------------


def _state(Z, R, sites):
    om = omega_for(sites)
    return BnfState(1, diagonal(om, 1), om, Z, R)


def test_resonant_remainder_moves_into_Z():
    cfg = BnfConfig(M=2, j0=12, r=4.2, epsilon1=0.0, epsilon2=1e-3)
    sites = annulus_box(1, 12, 6)
    R = poly([({(12,): (2, 2)}, 1e-4)])
    new, log = bnf_step(_state(HamiltonianPoly({}, 1), R, sites), cfg)
    assert not log.F
    assert new.Z == R and not new.R
    assert new.D is _state(R, R, sites).D or new.D == diagonal(omega_for(sites), 1)


def test_linear_chain_generator_coefficients():
    cfg = BnfConfig(M=2, j0=12, r=4.2, epsilon1=5e-5, epsilon2=0.0, tau=1e-8)
    box = annulus_box(1, 12, 6)
    D, Z1, R1 = build_hamiltonian(SPEC, box, cfg.epsilon1, 0.0)
    om = omega_for(box)
    new, log = bnf_step(BnfState(1, D, om, Z1, R1), cfg)
    select = both(meets_annulus(12, cfg.N(2)), size_at_most(3))
    assert log.selected == truncate(R1, select) and log.selected
    for mono, c in log.F.items():
        (i, _, _), (j, _, _) = sorted(mono.entries, key=lambda e: -e[1])
        assert c == pytest.approx(2.5e-5 / (0.5j * (om[i] - om[j])), rel=1e-12)
    assert new.D == D


def test_step_clears_selected_terms():
    cfg = BnfConfig(M=2, j0=12, r=4.2, epsilon1=5e-5, epsilon2=9.5e-4, tau=1e-6)
    box = annulus_box(1, 12, 6)
    D, Z1, R1 = build_hamiltonian(SPEC, box, cfg.epsilon1, cfg.epsilon2)
    new, log = bnf_step(BnfState(1, D, omega_for(box), Z1, R1), cfg)
    left = truncate(new.R, both(meets_annulus(12, cfg.N(2)), size_at_most(3)))
    left = left.filter(lambda mono: mono in log.selected)
    assert weighted_norm(left, cfg.norm(2)) <= 1e-6 * weighted_norm(log.selected, cfg.norm(1))
    assert resonant_split(new.Z)[1].max_abs() == 0


def test_contraction_failure_aborts_with_step():
    cfg = BnfConfig(M=2, j0=12, r=4.2, epsilon1=0.5, epsilon2=0.0, tau=1e-12, prescan=False)
    with pytest.raises(BnfAborted) as info:
        run_bnf(SPEC, cfg)
    assert info.value.step == 1 and isinstance(info.value.cause, ContractionError)
    assert any(e.name == "contraction" and e.passed is False for e in info.value.ledger)


def test_small_divisor_prescan():
    cfg = BnfConfig(M=2, j0=12, r=4.2, epsilon1=1e-4, epsilon2=1e-4, tau=10.0)
    with pytest.raises(SmallDivisorError, match="pre-scan"):
        run_bnf(SPEC, cfg)


# --- classification ---------------------------------------------------------------


CFG = BnfConfig(M=2, j0=12, r=4.2, epsilon1=0.0, epsilon2=0.0)


def test_classify_examples():
    inner = m(s3=(1, 0), s4=(0, 1))
    straddle = m(s9=(1, 0), s11=(0, 1))
    far = m(s0=(1, 0), s8=(0, 1))
    outer = m(s16=(1, 1))
    leak = m(s_3=(1, 0), s3=(0, 1))
    W = HamiltonianPoly({inner: 1.0, straddle: 1.0, far: 1.0, outer: 1.0, leak: 1.0}, 1)
    cls = classify_remainder(W, CFG)
    assert set(cls.barrier) == {straddle}
    assert set(cls.long_range) == {far, leak}
    assert set(cls.local) == {inner, outer}
    assert cls.flux_violations == []
    total = cls.barrier + cls.long_range + cls.local
    assert total == W


def test_flux_counts_outside_sites():
    assert flux(m(s13=(1, 0), s16=(0, 1)), 12) == 0
    assert flux(m(s16=(1, 0), s8=(0, 1)), 12) == 1
    one_sided = m(s16=(2, 0), s17=(0, 1), s18=(0, 1))
    crossing = m(s17=(1, 0), s8=(0, 1))  # crossing |j| = j0 without meeting the barrier needs Delta > M + 3
    cls = classify_remainder(HamiltonianPoly({one_sided: 1.0, crossing: 1.0}, 1), CFG)
    assert set(cls.local) == {one_sided} and set(cls.long_range) == {crossing}
    assert cls.flux_violations == []


# --- full runs ----------------------------------------------------------------------


def test_zero_coupling_run_is_identity():
    res = run_bnf(SPEC, BnfConfig(M=2, j0=12, r=4.2, epsilon1=0.0, epsilon2=0.0, tau=1e-6))
    assert not res.state.Z and not res.state.R
    assert all(not log.F for log in res.steps)


@pytest.fixture(scope="module")
def regression():
    cfg = BnfConfig(M=2, j0=12, r=4.2, epsilon1=5e-5, epsilon2=9.5e-4, tau=1e-6)
    return cfg, run_bnf(SPEC, cfg)


def test_regression_structure(regression):
    cfg, res = regression
    assert len(res.steps) == 2
    by_name = {(e.step, e.name): e for e in res.ledger}
    for s in ("1", "2"):
        assert by_name[(s, "homological_residual")].passed
        assert by_name[(s, "contraction")].passed
    assert by_name[("final", "flux_violations_R3")].measured == 0
    assert by_name[("final", "mass_commutator")].passed
    assert res.classification.flux_violations == []
    D0 = build_hamiltonian(SPEC, res.box, cfg.epsilon1, cfg.epsilon2)[0]
    assert res.state.D == D0
    assert resonant_split(res.state.Z)[1].max_abs() == 0


def test_regression_init_bound(regression):
    _, res = regression
    (init,) = [e for e in res.ledger if e.step == "init"]
    assert init.name == "norm_H1_minus_D" and init.bound == pytest.approx(1e-3**0.99)


def test_ledger_rows_columns(regression):
    _, res = regression
    rows = ledger_rows(res.ledger)
    assert list(rows[0]) == ["step", "norm-name", "measured", "paper-bound", "bound-expr", "pass"]
    assert {r["pass"] for r in rows} <= {"true", "false", ""}
