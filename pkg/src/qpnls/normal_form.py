"""Finite-step Birkhoff normal form in an annular barrier around |j| = j0.

The Hamiltonian H = D + Z + R is split into the diagonal part
D = 1/2 sum V_j |q_j|^2, a resonant part Z and a remainder R. Each step picks
the remainder terms that meet the annulus A(j0, N_{s+1}) and have
Delta(n) + |n|_1 <= s + 2, solves {F, D} = selected part, and replaces H by
its Lie transform exp(ad_F) H with ad_F(U) = {U, F}. Every step records the
measured weighted norms next to the bounds they are expected to satisfy.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

from .polynomial import (
    HamiltonianPoly,
    Monomial,
    NormParams,
    Predicate,
    Site,
    both,
    diagonal,
    in_annulus,
    mass,
    meets_annulus,
    poisson_bracket,
    resonant_split,
    site_norm,
    size_at_most,
    sizes,
    grade_by_size,
    truncate,
    weighted_norm,
)
from .potential import PotentialSpec, potential_vector
from .resonance import DivisorTable, ResonanceParams, check_nonresonant, enumerate_divisor_indices

#: Relative size of the Lie-series tail bound at which the series is cut.
LIE_TOLERANCE = 1e-14
#: Homological residual allowed relative to the selected part.
RESIDUAL_TOLERANCE = 1e-12


class BnfError(RuntimeError):
    pass


class SmallDivisorError(BnfError):
    pass


class ContractionError(BnfError):
    pass


class BoxTooSmall(ValueError):
    pass


class BnfAborted(BnfError):
    """A step failed; ``ledger`` holds the entries recorded before the failure."""

    def __init__(self, step: int, cause: Exception, ledger: list["LedgerEntry"]):
        super().__init__(f"step {step}: {cause}")
        self.step = step
        self.cause = cause
        self.ledger = ledger


@dataclass(frozen=True)
class BnfConfig:
    M: int
    j0: int
    r: float
    epsilon1: float
    epsilon2: float
    tau: float = 1e-8
    lie_order: int = 60
    size_cap_offset: int = 2
    halo: int | None = None
    retain_cap: float | None = None
    gamma: float = 0.1
    prescan: bool = True

    def __post_init__(self) -> None:
        if self.M < 1 or self.j0 < 1:
            raise ValueError("M and j0 must be positive integers")
        if not self.r > 4:
            raise ValueError(f"r must exceed 4 so that the final radius r/2 > 2, got {self.r}")
        for name in ("epsilon1", "epsilon2"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.tau < 0 or self.lie_order < 1:
            raise ValueError("tau >= 0 and lie_order >= 1 required")
        if self.N(self.M + 1) < 1:
            raise ValueError("annulus schedule collapses before the last step")

    @property
    def epsilon(self) -> float:
        return self.epsilon1 + self.epsilon2

    @property
    def sigma(self) -> float:
        return self.r / (2 * self.M)

    def radius(self, s: int) -> float:
        """Norm radius r - (s-1) sigma in force at the start of step s."""
        return self.r - (s - 1) * self.sigma

    def N(self, s: int) -> int:
        """Annulus half-width M^2 - 20(s-1), floored at ceil(M^2/2) for small M."""
        return max(self.M**2 - 20 * (s - 1), math.ceil(self.M**2 / 2))

    @property
    def box_halo(self) -> int:
        return self.M + 2 if self.halo is None else self.halo

    @property
    def keep_cap(self) -> float:
        return 4 * self.M + 6 if self.retain_cap is None else self.retain_cap

    def norm(self, s: int) -> NormParams:
        return NormParams(self.j0, self.M**2, self.radius(s))

    def resonance_params(self, L: int, d: int) -> ResonanceParams:
        return ResonanceParams(gamma=self.gamma, L=L, M=self.M, j0=self.j0, d=d, tau=self.tau)


@dataclass(frozen=True)
class LedgerEntry:
    step: str
    name: str
    measured: float
    bound: float | None
    bound_expr: str
    passed: bool | None

    @classmethod
    def check(cls, step, name, measured, bound, expr, kind: str = "le") -> "LedgerEntry":
        ok = measured <= bound if kind == "le" else measured >= bound
        return cls(str(step), name, float(measured), float(bound), expr, bool(ok))

    @classmethod
    def info(cls, step, name, measured, expr: str = "") -> "LedgerEntry":
        return cls(str(step), name, float(measured), None, expr, None)


@dataclass
class BnfState:
    s: int
    D: HamiltonianPoly
    omega: dict[Site, float]
    Z: HamiltonianPoly
    R: HamiltonianPoly
    ledger: list[LedgerEntry] = field(default_factory=list)

    @property
    def H(self) -> HamiltonianPoly:
        return self.D + self.Z + self.R


@dataclass
class StepLog:
    s: int
    F: HamiltonianPoly
    selected: HamiltonianPoly
    order: int
    rho: float
    min_divisor: float
    residual: float


# --- construction -------------------------------------------------------------


def annulus_box(d: int, j0: float, width: float) -> list[Site]:
    """Sites with ||j| - j0| <= width, in lexicographic order."""
    R = int(math.floor(j0 + width))
    return [s for s in itertools.product(range(-R, R + 1), repeat=d) if abs(site_norm(s) - j0) <= width + 1e-12]


def bonds(box: Sequence[Site]) -> list[tuple[Site, Site]]:
    """Ordered nearest-neighbour pairs (|i - j|_1 = 1) inside the box."""
    members = set(box)
    out = []
    for a in box:
        for axis in range(len(a)):
            for step in (-1, 1):
                b = a[:axis] + (a[axis] + step,) + a[axis + 1 :]
                if b in members:
                    out.append((a, b))
    return out


def build_hamiltonian(
    spec: PotentialSpec,
    box: Sequence[Site],
    epsilon1: float,
    epsilon2: float,
    j0: int | None = None,
    N: float | None = None,
) -> tuple[HamiltonianPoly, HamiltonianPoly, HamiltonianPoly]:
    """(D, Z1, R1) = (1/2 sum V|q|^2, eps2/4 sum |q|^4, eps1/2 sum_{|i-j|_1=1} q_i conj(q_j)).

    When ``j0`` and ``N`` are given the box must contain A(j0, N) and its
    nearest neighbours.
    """
    box = [tuple(s) for s in box]
    d = spec.d
    if j0 is not None and N is not None:
        members = set(box)
        for s in annulus_box(d, j0, N + 1):
            if in_annulus(s, j0, N) and s not in members:
                raise BoxTooSmall(f"site {s} of A({j0}, {N}) is outside the box")
            if not in_annulus(s, j0, N) and any(
                in_annulus(s[:a] + (s[a] + t,) + s[a + 1 :], j0, N) for a in range(d) for t in (-1, 1)
            ) and s not in members:
                raise BoxTooSmall(f"neighbour {s} of A({j0}, {N}) is outside the box")
    V = potential_vector(spec, box)
    D = diagonal(dict(zip(box, V.tolist())), d)
    Z1 = HamiltonianPoly({Monomial.from_dict({s: (2, 2)}): epsilon2 / 4 for s in box}, d)
    R1 = HamiltonianPoly({Monomial.from_dict({a: (1, 0), b: (0, 1)}): epsilon1 / 2 for a, b in bonds(box)}, d)
    return D, Z1, R1


# --- homological equation and Lie series ----------------------------------------


def divisor(m: Monomial, omega: Mapping[Site, float]) -> float:
    total = 0.0
    for s, k in m.divisor_index.items():
        if s not in omega:
            raise KeyError(f"site {s} missing from the frequency vector")
        total += k * omega[s]
    return total


def lie_derivative(W: HamiltonianPoly, omega: Mapping[Site, float]) -> HamiltonianPoly:
    """L_V W = {W, D}: multiplies each monomial by (i/2) sum_j (n_j - n'_j) V_j."""
    return HamiltonianPoly({m: 0.5j * divisor(m, omega) * c for m, c in W.items()}, W.d)


def solve_homological(
    Rsel: HamiltonianPoly, omega: Mapping[Site, float], tau: float
) -> tuple[HamiltonianPoly, HamiltonianPoly]:
    """Solve L_V F = Rsel on the non-resonant terms; resonant terms are returned separately.

    Raises ``SmallDivisorError`` naming the monomial when a divisor falls below ``tau``.
    """
    F: dict[Monomial, complex] = {}
    dropped: dict[Monomial, complex] = {}
    for m, c in Rsel.sorted_items():
        if m.is_resonant:
            dropped[m] = c
            continue
        div = divisor(m, omega)
        if abs(div) < tau or div == 0:
            raise SmallDivisorError(f"divisor {div:.3e} below tau={tau:.3e} for monomial {m}")
        F[m] = c / (0.5j * div)
    return HamiltonianPoly(F, Rsel.d, prune=False), HamiltonianPoly(dropped, Rsel.d, prune=False)


def lie_order(rho: float, cap: int, tol: float = LIE_TOLERANCE) -> int:
    """Smallest order whose geometric tail rho^(order+1) is below ``tol``."""
    if rho == 0:
        return 0
    if rho >= 1:
        return cap
    return max(1, min(cap, math.ceil(math.log(tol) / math.log(rho)) - 1))


def lie_series(U: HamiltonianPoly, F: HamiltonianPoly, order: int, keep: Predicate | None = None,
               start: int = 0) -> HamiltonianPoly:
    """sum_{m=0}^{order} ad_F^m(U) / (m + start)! with ad_F(U) = {U, F}.

    ``start`` shifts the factorials, which gives the tail of the diagonal part
    from G = {D, F}: sum_{m>=1} ad_F^{m-1}(G) / m! is ``lie_series(G, F, order-1, start=1)``.
    """
    total = dict(U.items())
    term = U
    for m in range(1, order + 1):
        term = poisson_bracket(term, F)
        if keep is not None:
            term = truncate(term, keep)
        if not term:
            break
        fac = 1.0 / math.factorial(m + start) * math.factorial(start) if start else 1.0 / math.factorial(m)
        for mono, c in term.items():
            total[mono] = total.get(mono, 0.0j) + fac * c
    if start:
        scale = 1.0 / math.factorial(start)
        total = {mono: c * scale for mono, c in total.items()}
    return HamiltonianPoly(total, U.d)


def _transform_rest(D, Z, R, F, order, keep):
    """exp(ad_F)(D + Z + R) - D."""
    if order == 0 or not F:
        return Z + R
    G = poisson_bracket(D, F)
    return lie_series(Z + R, F, order, keep) + lie_series(G, F, order - 1, keep, start=1)


def lie_transform(
    H: tuple[HamiltonianPoly, HamiltonianPoly, HamiltonianPoly],
    F: HamiltonianPoly,
    order: int,
    keep: Predicate | None = None,
) -> HamiltonianPoly:
    """exp(ad_F) applied to H = D + Z + R, truncated at ``order``.

    The diagonal part is expanded from {D, F} so the selected terms cancel
    against the remainder instead of being recomputed through D.
    """
    D, Z, R = H
    return D + _transform_rest(D, Z, R, F, order, keep)


# --- ledger helpers -------------------------------------------------------------


def _slices(step, Z, R, p: NormParams, eps: float, prefix: str) -> list[LedgerEntry]:
    out = []
    for A in sizes(Z + R):
        if A < 3 - 1e-9:
            continue
        measured = grade_by_size(Z, A, p) + grade_by_size(R, A, p)
        bound = eps ** (1 + 0.9 * (A - 3))
        out.append(LedgerEntry.check(step, f"{prefix}slice_A={A:.6g}", measured, bound, "eps^(1+0.9(A-3))"))
    return out


def _geometric(s: int) -> float:
    return sum(2.0**-i for i in range(s + 1))


def bnf_step(state: BnfState, config: BnfConfig) -> tuple[BnfState, StepLog]:
    """One normal-form step from H_s to H_{s+1}; returns the new state and the step log."""
    s = state.s
    eps = config.epsilon
    M2 = config.M**2
    p_in = config.norm(s)
    p_out = config.norm(s + 1)
    ledger: list[LedgerEntry] = []

    # hypotheses at step s
    calR = truncate(state.R, meets_annulus(config.j0, config.N(s + 1)))
    ledger += [
        LedgerEntry.check(s, "hyp_norm_Z", weighted_norm(state.Z, p_in), eps**0.9 * _geometric(s - 1),
                          "eps^0.9*sum_{i<s}2^-i"),
        LedgerEntry.check(s, "hyp_norm_R", weighted_norm(state.R, p_in), eps**0.9 * _geometric(s - 1),
                          "eps^0.9*sum_{i<s}2^-i"),
        LedgerEntry.check(s, "hyp_norm_calR", weighted_norm(calR, p_in), eps ** (1 + 0.9 * (s - 1)),
                          "eps^(1+0.9(s-1))"),
    ]
    ledger += _slices(s, state.Z, state.R, p_in, eps, "hyp_")

    select = both(meets_annulus(config.j0, config.N(s + 1)), size_at_most(s + config.size_cap_offset))
    selected = truncate(state.R, select)
    F, dropped = solve_homological(selected, state.omega, config.tau)
    nonres = selected - dropped

    residual_poly = poisson_bracket(F, state.D) - nonres
    sel_scale = max(nonres.max_abs(), 1e-300)
    residual = residual_poly.max_abs() / sel_scale if nonres else 0.0
    divs = [abs(divisor(m, state.omega)) for m in F]
    min_div = min(divs) if divs else math.inf

    normF = weighted_norm(F, p_in)
    rho = math.e / config.sigma * normF
    ledger += [
        LedgerEntry.check(s, "norm_F", normF, eps ** (0.9 * s), "eps^(0.9s)"),
        LedgerEntry.check(s, "contraction", rho, 0.5, "(e/sigma)*||F|| <= 1/2"),
        LedgerEntry.check(s, "homological_residual", residual, RESIDUAL_TOLERANCE, "1e-12 relative"),
        LedgerEntry.info(s, "min_divisor", min_div if divs else 0.0, f"eps^0.01={eps ** 0.01 if eps > 0 else 0:.6g}"),
        LedgerEntry.info(s, "tau_over_eps^0.01", config.tau / eps**0.01 if eps > 0 else math.inf, "ratio"),
    ]
    if residual > RESIDUAL_TOLERANCE:
        raise BnfError(f"homological residual {residual:.3e} exceeds {RESIDUAL_TOLERANCE}")
    if rho > 0.5:
        state.ledger.extend(ledger)
        raise ContractionError(f"(e/sigma)*||F|| = {rho:.6g} > 1/2 (||F|| = {normF:.6g}, sigma = {config.sigma:.6g})")

    order = lie_order(rho, config.lie_order)
    keep = size_at_most(config.keep_cap)
    rest = _transform_rest(state.D, state.Z, state.R, F, order, keep)
    # terms the size cap discarded, measured on the first-order expansion
    first = poisson_bracket(state.Z + state.R, F)
    truncated = weighted_norm(first.filter(lambda m: m.size > config.keep_cap + 1e-9), p_out)
    Z_new, R_new = resonant_split(rest)

    # selected terms left behind in R_{s+1}: only higher-order debris may remain
    left = truncate(R_new, select).filter(lambda m: m in nonres)
    bound_left = rho / (1 - rho) * (weighted_norm(state.Z + state.R, p_in) + weighted_norm(nonres, p_in))
    calR_next = truncate(R_new, meets_annulus(config.j0, config.N(s + 2)))
    ledger += [
        LedgerEntry.info(s, "lie_order", order),
        LedgerEntry.info(s, "truncated_norm", truncated, f"size > {config.keep_cap:g}"),
        LedgerEntry.check(s, "selected_residual", weighted_norm(left, p_out), bound_left,
                          "rho/(1-rho)*(||Z+R||+||Rsel||)"),
        LedgerEntry.check(s, "norm_Z", weighted_norm(Z_new, p_out), eps**0.9 * _geometric(s), "eps^0.9*sum_{i<=s}2^-i"),
        LedgerEntry.check(s, "norm_R", weighted_norm(R_new, p_out), eps**0.9 * _geometric(s), "eps^0.9*sum_{i<=s}2^-i"),
        LedgerEntry.check(s, "norm_calR", weighted_norm(calR_next, p_out), eps ** (1 + 0.9 * s), "eps^(1+0.9s)"),
    ]
    ledger += _slices(s, Z_new, R_new, p_out, eps, "")
    new = BnfState(s + 1, state.D, state.omega, Z_new, R_new, state.ledger + ledger)
    return new, StepLog(s, F, selected, order, rho, min_div, residual)


# --- full transform -------------------------------------------------------------


@dataclass
class Classification:
    barrier: HamiltonianPoly  # meets A(j0, M^2/2)
    long_range: HamiltonianPoly  # misses it, Delta > M + 3
    local: HamiltonianPoly  # misses it, Delta <= M + 3
    flux_violations: list[Monomial]


def flux(m: Monomial, j0: float) -> int:
    """sum over |j| > j0 of (n_j - n'_j)."""
    return sum(a - b for s, a, b in m.entries if site_norm(s) > j0)


def classify_remainder(Rt: HamiltonianPoly, config: BnfConfig) -> Classification:
    """Split the final remainder by the barrier A(j0, M^2/2) and the diameter M + 3.

    Every local term must carry zero mass flux across |j| = j0.
    """
    M, j0 = config.M, config.j0
    half = M**2 / 2
    barrier, long_range, local = {}, {}, {}
    for m, c in Rt.items():
        if m.intersects(j0, half):
            barrier[m] = c
        elif m.delta > M + 3 + 1e-9:
            long_range[m] = c
        else:
            local[m] = c
    violations = [m for m in local if flux(m, j0) != 0]
    mk = lambda t: HamiltonianPoly(t, Rt.d, prune=False)  # noqa: E731
    return Classification(mk(barrier), mk(long_range), mk(local), violations)


@dataclass
class BnfResult:
    state: BnfState
    steps: list[StepLog]
    classification: Classification
    box: list[Site]

    @property
    def ledger(self) -> list[LedgerEntry]:
        return self.state.ledger

    @property
    def passed(self) -> bool:
        return all(e.passed is not False for e in self.ledger)


def _mass_commutator(W: HamiltonianPoly, box: Sequence[Site]) -> float:
    return poisson_bracket(W, mass(box, W.d)).max_abs()


def prescan(spec: PotentialSpec, config: BnfConfig, omega: Mapping[Site, float]):
    params = config.resonance_params(spec.L, spec.d)
    report = check_nonresonant(omega, params, DivisorTable.build(enumerate_divisor_indices(params)))
    if not report.ok:
        raise SmallDivisorError(f"non-resonance pre-scan failed: |k.omega| = {abs(report.value):.3e} "
                                f"< tau={config.tau:.3e} for k = {report.k}")
    return report


def run_bnf(spec: PotentialSpec, config: BnfConfig, box: Sequence[Site] | None = None) -> BnfResult:
    """M normal-form steps on the annular box, then the final bookkeeping."""
    M, j0, eps = config.M, config.j0, config.epsilon
    if box is None:
        box = annulus_box(spec.d, j0, M**2 + config.box_halo)
    box = [tuple(s) for s in box]
    D, Z, R = build_hamiltonian(spec, box, config.epsilon1, config.epsilon2, j0, M**2)
    omega = {s: v.real for s, v in ((m.support[0], 2 * c) for m, c in D.items())}
    if config.prescan:
        prescan(spec, config, omega)
    state = BnfState(1, D, omega, Z, R)
    p1 = config.norm(1)
    state.ledger.append(LedgerEntry.check("init", "norm_H1_minus_D", weighted_norm(Z + R, p1), eps**0.99, "eps^0.99"))
    mass_before = _mass_commutator(Z + R, box)
    steps = []
    for _ in range(M):
        try:
            state, log = bnf_step(state, config)
        except (BnfError, KeyError) as exc:
            raise BnfAborted(state.s, exc, state.ledger) from exc
        steps.append(log)

    p_fin = config.norm(M + 1)
    assert abs(p_fin.r - config.r / 2) < 1e-12
    cls = classify_remainder(state.R, config)
    fin = "final"
    final = [
        LedgerEntry.check(fin, "norm_Z_tilde", weighted_norm(state.Z, p_fin), 2 * eps**0.9, "2*eps^0.9"),
        LedgerEntry.check(fin, "norm_R_tilde", weighted_norm(state.R, p_fin), 2 * eps**0.9, "2*eps^0.9"),
        LedgerEntry.check(fin, "norm_calR_tilde", weighted_norm(cls.barrier, p_fin), eps ** (0.9 * M), "eps^(0.9M)"),
        LedgerEntry.check(fin, "norm_R1_plus_R2", weighted_norm(cls.barrier + cls.long_range, p_fin), eps ** (M + 1),
                          "eps^(M+1)"),
        LedgerEntry.check(fin, "flux_violations_R3", len(cls.flux_violations), 0, "exactly 0"),
        LedgerEntry.check(fin, "mass_commutator", _mass_commutator(state.Z + state.R, box),
                          max(mass_before, 1e-300) * 1e3 if mass_before else 1e-13, "{H,sum|q|^2} stays 0"),
    ]
    final += _slices(fin, state.Z, state.R, p_fin, eps, "")
    for log in steps:
        calR = weighted_norm(truncate(log.selected, meets_annulus(j0, config.N(log.s + 1))), config.norm(log.s))
        if calR > 0 and 0 < eps < 1:
            final.append(LedgerEntry.info(fin, f"calR_exponent_s={log.s}", math.log(calR) / math.log(eps),
                                          f"vs {1 + 0.9 * (log.s - 1):g}"))
    state.ledger.extend(final)
    return BnfResult(state, steps, cls, box)


def ledger_rows(ledger: Sequence[LedgerEntry]) -> list[dict]:
    return [
        {
            "step": e.step,
            "norm-name": e.name,
            "measured": e.measured,
            "paper-bound": e.bound_expr if e.bound is None else e.bound,
            "bound-expr": e.bound_expr,
            "pass": "" if e.passed is None else str(e.passed).lower(),
        }
        for e in ledger
    ]
