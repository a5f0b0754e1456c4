"""Small divisors of the frequency vector omega_j = V_j(theta, alpha).

Covers the divisor family k with supp k meeting A(j0, M^2) and
Delta(k) + |k|_1 <= M + 2, non-resonance checks against a floor, Monte-Carlo
estimates of the resonant measure, and the Wronskian determinant of the
directional derivatives of the cosine terms.
"""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from statistics import NormalDist
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .polynomial import Site, in_annulus, site_distance, site_norm
from .potential import PotentialSpec, cos_matrix, potential_batch

#: Refuse enumerations predicted to exceed this many divisor indices.
ENUMERATION_CAP = 10**8
#: Samples per independently seeded Monte-Carlo block.
BLOCK_SIZE = 1024


class EnumerationCapExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class ResonanceParams:
    gamma: float
    L: int
    M: int
    j0: int
    d: int = 1
    tau: float = 1e-8
    strict: bool = False

    def __post_init__(self) -> None:
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        for name in ("L", "M", "j0", "d"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.tau < 0:
            raise ValueError("tau must be non-negative")

    @property
    def log_strict_threshold(self) -> float:
        """log of (gamma / (2 L M^2 j0)^(2(d+1)))^(10 L^4 M^4); the value itself underflows."""
        base = math.log(self.gamma) - 2 * (self.d + 1) * math.log(2 * self.L * self.M**2 * self.j0)
        return 10 * self.L**4 * self.M**4 * base

    @property
    def log_floor(self) -> float:
        if self.strict:
            return self.log_strict_threshold
        return math.log(self.tau) if self.tau > 0 else -math.inf

    @property
    def budget(self) -> int:
        """The cap M + 2 on Delta(k) + |k|_1."""
        return self.M + 2

    @property
    def annulus_width(self) -> int:
        return self.M**2


@dataclass(frozen=True)
class DivisorIndex:
    """A nonzero integer vector k = (k_j) with finite support, sorted by site."""

    entries: tuple[tuple[Site, int], ...]

    def __post_init__(self) -> None:
        if not self.entries:
            raise ValueError("k must be nonzero")
        if any(v == 0 for _, v in self.entries):
            raise ValueError("zero entries are not stored")

    @classmethod
    def from_dict(cls, k: Mapping[Site, int]) -> "DivisorIndex":
        return cls(tuple(sorted((tuple(s), int(v)) for s, v in k.items() if v)))

    @cached_property
    def support(self) -> tuple[Site, ...]:
        return tuple(s for s, _ in self.entries)

    @cached_property
    def l1(self) -> int:
        return sum(abs(v) for _, v in self.entries)

    @cached_property
    def delta(self) -> float:
        sup = self.support
        return max((site_distance(a, b) for a, b in itertools.combinations(sup, 2)), default=0.0)

    def __neg__(self) -> "DivisorIndex":
        return DivisorIndex(tuple((s, -v) for s, v in self.entries))

    def as_dict(self) -> dict[Site, int]:
        return dict(self.entries)

    def __str__(self) -> str:
        return "{" + ", ".join(f"{','.join(map(str, s))}: {v:+d}" for s, v in self.entries) + "}"


def divisor_value(k: DivisorIndex, omega: Mapping[Site, float]) -> float:
    """sum_j k_j omega_j (signed)."""
    total = 0.0
    for s, v in k.entries:
        if s not in omega:
            raise KeyError(f"site {s} missing from the frequency vector")
        total += v * omega[s]
    return total


def _candidate_sites(d: int, j0: int, width: float) -> list[Site]:
    """Lattice sites with ||j| - j0| <= width, in lexicographic order."""
    R = int(math.floor(j0 + width))
    lo = j0 - width
    out = []
    for site in itertools.product(range(-R, R + 1), repeat=d):
        n = site_norm(site)
        if lo - 1e-12 <= n <= j0 + width + 1e-12:
            out.append(site)
    return out


def _supports(params: ResonanceParams) -> Iterator[tuple[tuple[Site, ...], float]]:
    """Supports S meeting A(j0, M^2) with Delta(S) + |S| <= M + 2, plus their diameter."""
    B = params.budget
    cands = _candidate_sites(params.d, params.j0, params.M**2 + max(B - 2, 0))
    for i, anchor in enumerate(cands):
        # later sites close enough to anchor to share a support
        near = [s for s in cands[i + 1 :] if site_distance(anchor, s) <= B - 2 + 1e-9]

        def grow(chosen: list[Site], diam: float, start: int):
            yield tuple(chosen), diam
            for idx in range(start, len(near)):
                s = near[idx]
                nd = max([diam] + [site_distance(s, c) for c in chosen])
                if nd + len(chosen) + 1 <= B + 1e-9:
                    chosen.append(s)
                    yield from grow(chosen, nd, idx + 1)
                    chosen.pop()

        for sup, diam in grow([anchor], 0.0, 0):
            if any(in_annulus(s, params.j0, params.M**2) for s in sup):
                yield sup, diam


def _magnitudes(m: int, total: int) -> Iterator[tuple[int, ...]]:
    """Positive integer m-tuples with sum <= total."""
    if m == 0:
        yield ()
        return
    for first in range(1, total - (m - 1) + 1):
        for rest in _magnitudes(m - 1, total - first):
            yield (first,) + rest


def count_divisor_indices(params: ResonanceParams) -> int:
    """Exact size of the divisor family (no index is materialised)."""
    total = 0
    for sup, diam in _supports(params):
        b = int(math.floor(params.budget - diam + 1e-9))
        m = len(sup)
        if b >= m:
            total += math.comb(b, m) * 2**m
    return total


def enumerate_divisor_indices(params: ResonanceParams, cap: int = ENUMERATION_CAP) -> Iterator[DivisorIndex]:
    """Yield each k with supp k meeting A(j0, M^2) and Delta(k) + |k|_1 <= M + 2 once."""
    predicted = count_divisor_indices(params)
    if predicted > cap:
        raise EnumerationCapExceeded(f"divisor family has {predicted} members, above the cap {cap}")
    return _enumerate(params)


def _enumerate(params: ResonanceParams) -> Iterator[DivisorIndex]:
    for sup, diam in _supports(params):
        b = int(math.floor(params.budget - diam + 1e-9))
        m = len(sup)
        for mags in _magnitudes(m, b):
            for signs in itertools.product((1, -1), repeat=m):
                yield DivisorIndex(tuple((s, g * a) for s, g, a in zip(sup, signs, mags)))


@dataclass
class DivisorTable:
    """Dense integer matrix of a divisor family over the sites it touches."""

    indices: list[DivisorIndex]
    sites: list[Site]
    matrix: np.ndarray  # (n_k, n_sites)

    @classmethod
    def build(cls, indices: Iterable[DivisorIndex]) -> "DivisorTable":
        indices = list(indices)
        sites = sorted({s for k in indices for s in k.support})
        col = {s: i for i, s in enumerate(sites)}
        mat = np.zeros((len(indices), len(sites)), dtype=np.int64)
        for row, k in enumerate(indices):
            for s, v in k.entries:
                mat[row, col[s]] = v
        return cls(indices, sites, mat)

    def values(self, omega: Mapping[Site, float] | np.ndarray) -> np.ndarray:
        """Divisor values; ``omega`` is a site map or an array aligned with ``sites``."""
        if isinstance(omega, Mapping):
            missing = [s for s in self.sites if s not in omega]
            if missing:
                raise KeyError(f"site {missing[0]} missing from the frequency vector")
            omega = np.array([omega[s] for s in self.sites])
        return self.matrix @ np.asarray(omega, dtype=float).T


@dataclass(frozen=True)
class NonresonanceReport:
    ok: bool
    k: DivisorIndex | None = None
    value: float | None = None
    checked: int = 0


def _below(values: np.ndarray, log_floor: float) -> np.ndarray:
    if log_floor == -math.inf:
        return np.zeros(values.shape, dtype=bool)
    with np.errstate(divide="ignore"):
        return np.log(np.abs(values)) < log_floor


def check_nonresonant(
    omega: Mapping[Site, float],
    params: ResonanceParams,
    indices: Iterable[DivisorIndex] | DivisorTable | None = None,
) -> NonresonanceReport:
    """ok iff |sum_j k_j omega_j| >= floor for every k of the stream.

    On failure the first violating k in stream order is returned with its value.
    """
    table = indices if isinstance(indices, DivisorTable) else DivisorTable.build(
        enumerate_divisor_indices(params) if indices is None else indices
    )
    if not table.indices:
        return NonresonanceReport(True, checked=0)
    vals = table.values(omega)
    bad = np.flatnonzero(_below(vals, params.log_floor))
    if bad.size:
        i = int(bad[0])
        return NonresonanceReport(False, table.indices[i], float(vals[i]), len(table.indices))
    return NonresonanceReport(True, checked=len(table.indices))


def wilson_interval(successes: int, n: int, confidence: float = 0.95) -> tuple[float, float, float]:
    """(center, low, high) of the Wilson score interval."""
    z = NormalDist().inv_cdf(0.5 + confidence / 2)
    p = successes / n
    denom = 1 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return center, max(0.0, center - half), min(1.0, center + half)


@dataclass(frozen=True)
class MeasureEstimate:
    fraction: float
    ci_halfwidth: float
    resonant: int
    samples: int
    seed: int
    wilson_low: float
    wilson_high: float

    def within(self, bound: float) -> bool:
        """True when the bound is not excluded by the interval (low end <= bound)."""
        return self.wilson_low <= bound


def sample_phases(seed: int, block: int, n: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniform (theta, alpha) draws for one block, seeded by (seed, block)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, block]))
    draws = rng.random((n, 2 * d))
    return draws[:, :d], draws[:, d:]


def min_divisors(
    params: ResonanceParams,
    spec: PotentialSpec,
    samples: int,
    seed: int,
    workers: int = 1,
    table: DivisorTable | None = None,
) -> np.ndarray:
    """Per-sample minimum of |sum_j k_j V_j| over the divisor family.

    Samples are drawn in blocks of ``BLOCK_SIZE`` seeded by (seed, block), so
    the result does not depend on ``workers``.
    """
    table = table or DivisorTable.build(enumerate_divisor_indices(params))
    nblocks = -(-samples // BLOCK_SIZE)

    def run(b: int) -> np.ndarray:
        n = min(BLOCK_SIZE, samples - b * BLOCK_SIZE)
        theta, alpha = sample_phases(seed, b, n, spec.d)
        if not table.indices:
            return np.full(n, np.inf)
        V = potential_batch(spec, table.sites, theta, alpha)  # (n, n_sites)
        vals = V @ table.matrix.T.astype(float)
        return np.abs(vals).min(axis=1)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, range(nblocks)))
    else:
        parts = [run(b) for b in range(nblocks)]
    return np.concatenate(parts) if parts else np.zeros(0)


def estimate_resonant_measure(
    params: ResonanceParams,
    spec: PotentialSpec,
    samples: int,
    seed: int,
    workers: int = 1,
    table: DivisorTable | None = None,
) -> MeasureEstimate:
    """Monte-Carlo fraction of (theta, alpha) in [0,1]^{2d} failing the divisor floor."""
    if samples < 100:
        raise ValueError("need at least 100 samples")
    mins = min_divisors(params, spec, samples, seed, workers, table)
    resonant = int(_below(mins, params.log_floor).sum())
    _, low, high = wilson_interval(resonant, samples)
    return MeasureEstimate(resonant / samples, (high - low) / 2, resonant, samples, seed, low, high)


# --- Wronskian ----------------------------------------------------------------

_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53)


def default_xi(d: int) -> tuple[np.ndarray, np.ndarray]:
    """Fractional parts of sqrt(p) over the first 2d primes: (alpha-direction, theta-direction)."""
    if 2 * d > len(_PRIMES):
        raise ValueError("dimension too large for the built-in direction table")
    vals = np.array([math.sqrt(p) % 1.0 for p in _PRIMES[: 2 * d]])
    return vals[:d], vals[d:]


class DegenerateDirection(ArithmeticError):
    pass


@dataclass(frozen=True)
class WronskianResult:
    log_abs_det: float
    sign: int
    log_a1: float
    log_a2: float
    log_a3: float
    size: int

    @property
    def abs_det(self) -> float:
        return math.exp(self.log_abs_det)

    @property
    def det(self) -> float:
        return self.sign * self.abs_det


def _wronskian_columns(spec: PotentialSpec, support: Sequence[Site], xi):
    xi_t, xi_h = default_xi(spec.d) if xi is None else (np.asarray(xi[0], float), np.asarray(xi[1], float))
    if np.any(xi_t <= 0) or np.any(xi_t > 1) or np.any(xi_h <= 0) or np.any(xi_h > 1):
        raise ValueError("direction components must lie in (0, 1]")
    ells = spec.frequencies
    cos = cos_matrix(spec, support)  # (n_sites, F)
    c, cols = [], []
    for a, j in enumerate(support):
        for f in range(ells.shape[0]):
            ell = ells[f]
            c.append(float(np.dot(ell * np.asarray(j), xi_t) + np.dot(ell, xi_h)))
            cols.append(float(cos[a, f]))
    return np.array(c), np.array(cols)


def wronskian_matrix(spec: PotentialSpec, support: Sequence[Site], xi=None) -> np.ndarray:
    """W[s-1, (j,l)] = d_xi^{2s} cos 2pi l.(theta + j*alpha), s = 1..R."""
    c, cols = _wronskian_columns(spec, support, xi)
    R = len(c)
    x = (2 * np.pi * c) ** 2
    s = np.arange(1, R + 1)[:, None]
    return (-1.0) ** s * x[None, :] ** s * cols[None, :]


def wronskian_det(spec: PotentialSpec, support: Sequence[Site], xi=None) -> WronskianResult:
    """|det W| through the product A1 * A2 * A3, accumulated in log space.

    A1 = prod |cos|, A2 = prod (2 pi c)^2 and A3 = prod over unordered pairs of
    |(2 pi c_a)^2 - (2 pi c_b)^2|, where c = (l*j).xi_alpha + l.xi_theta.
    """
    if not support:
        raise ValueError("support must be nonempty")
    c, cols = _wronskian_columns(spec, support, xi)
    R = len(c)
    x = (2 * np.pi * c) ** 2
    if np.any(x == 0):
        a = int(np.flatnonzero(x == 0)[0])
        raise DegenerateDirection(f"direction annihilates column {a}: (l*j).xi_alpha + l.xi_theta = 0")
    with np.errstate(divide="ignore"):
        log_a1 = float(np.sum(np.log(np.abs(cols))))
        log_a2 = float(np.sum(np.log(x)))
        iu = np.triu_indices(R, 1)
        diffs = x[iu[1]] - x[iu[0]]
        log_a3 = float(np.sum(np.log(np.abs(diffs)))) if diffs.size else 0.0
    sign = int(np.prod(np.sign(cols))) * (-1) ** ((R * (R + 1) // 2) % 2) * int(np.prod(np.sign(diffs)))
    total = log_a1 + log_a2 + log_a3
    if total == -math.inf:
        sign = 0
    return WronskianResult(total, sign, log_a1, log_a2, log_a3, R)
