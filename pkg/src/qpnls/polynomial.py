"""Sparse polynomial algebra in the lattice variables q_j, conj(q_j).

A monomial prod_j q_j^{n_j} conj(q_j)^{n'_j} is stored as a sorted tuple of
``(site, n_j, n'_j)`` entries, sites being integer tuples of length ``d``.
Polynomials are immutable maps from monomials to complex coefficients.
"""
from __future__ import annotations

import math
import re
from collections import defaultdict
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterable, Iterator, Mapping

Site = tuple[int, ...]

#: Relative magnitude below which coefficients are dropped after each operation.
PRUNE_RELATIVE = 1e-16


class DimensionMismatch(ValueError):
    pass


def site_norm(site: Site) -> float:
    """Euclidean length |j| of a lattice site."""
    return math.sqrt(sum(c * c for c in site))


def site_distance(a: Site, b: Site) -> float:
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def in_annulus(site: Site, j0: float, N: float) -> bool:
    """Membership in A(j0, N) = {j : ||j| - j0| <= N}."""
    return abs(site_norm(site) - j0) <= N


@dataclass(frozen=True)
class Monomial:
    """Exponent data ``n = (n_j, n'_j)`` over a finite support.

    ``entries`` is sorted lexicographically by site and never holds a zero
    entry, so equal monomials compare and hash equal.
    """

    entries: tuple[tuple[Site, int, int], ...] = ()

    @classmethod
    def from_dict(cls, exps: Mapping[Site, tuple[int, int]]) -> "Monomial":
        items = []
        for site, (a, b) in exps.items():
            if a < 0 or b < 0:
                raise ValueError(f"negative exponent at site {site}")
            if a or b:
                items.append((tuple(int(c) for c in site), int(a), int(b)))
        items.sort()
        return cls(tuple(items))

    @classmethod
    def one(cls) -> "Monomial":
        return cls(())

    @cached_property
    def support(self) -> tuple[Site, ...]:
        return tuple(e[0] for e in self.entries)

    @cached_property
    def degree(self) -> int:
        """|n|_1, the total degree."""
        return sum(a + b for _, a, b in self.entries)

    @cached_property
    def delta(self) -> float:
        """Diameter of the support in the Euclidean distance (0 for <= 1 site)."""
        sup = self.support
        best = 0.0
        for i in range(len(sup)):
            for k in range(i + 1, len(sup)):
                dist = site_distance(sup[i], sup[k])
                if dist > best:
                    best = dist
        return best

    @property
    def size(self) -> float:
        """Delta(n) + |n|_1, the combined size used by the step selections."""
        return self.delta + self.degree

    @cached_property
    def is_resonant(self) -> bool:
        return all(a == b for _, a, b in self.entries)

    @cached_property
    def divisor_index(self) -> dict[Site, int]:
        """The integer vector k_j = n_j - n'_j restricted to its nonzero entries."""
        return {s: a - b for s, a, b in self.entries if a != b}

    def intersects(self, j0: float, N: float) -> bool:
        return any(in_annulus(s, j0, N) for s in self.support)

    def exponents(self) -> dict[Site, tuple[int, int]]:
        return {s: (a, b) for s, a, b in self.entries}

    def conjugate(self) -> "Monomial":
        return Monomial(tuple((s, b, a) for s, a, b in self.entries))

    def bracket_product(self, other: "Monomial", site: Site) -> "Monomial":
        """Exponents of ``self * other`` with one q and one conj(q) removed at ``site``."""
        exps: dict[Site, list[int]] = {s: [a, b] for s, a, b in self.entries}
        for s, a, b in other.entries:
            cur = exps.setdefault(s, [0, 0])
            cur[0] += a
            cur[1] += b
        cur = exps[site]
        cur[0] -= 1
        cur[1] -= 1
        return Monomial(tuple(sorted((s, a, b) for s, (a, b) in exps.items() if a or b)))

    def evaluate(self, values: Mapping[Site, complex]) -> complex:
        out = 1.0 + 0.0j
        for s, a, b in self.entries:
            z = values.get(s, 0.0)
            out *= z**a * z.conjugate() ** b
        return out

    def __str__(self) -> str:
        return " ".join(f"{_fmt_site(s)}:({a},{b})" for s, a, b in self.entries)


def _fmt_site(site: Site) -> str:
    return ",".join(str(c) for c in site)


class HamiltonianPoly:
    """Immutable sparse polynomial ``{Monomial: complex}`` in dimension ``d``.

    Construction prunes coefficients below ``PRUNE_RELATIVE`` times the largest
    magnitude (and exact zeros).
    """

    __slots__ = ("_terms", "d")

    def __init__(self, terms: Mapping[Monomial, complex] | None = None, d: int = 1, prune: bool = True):
        if d < 1:
            raise ValueError("dimension must be >= 1")
        self.d = d
        items = {m: complex(c) for m, c in (terms or {}).items()}
        for m in items:
            if m.entries and len(m.entries[0][0]) != d:
                raise DimensionMismatch(f"monomial {m} is not {d}-dimensional")
        if prune and items:
            cmax = max(abs(c) for c in items.values())
            cut = PRUNE_RELATIVE * cmax
            items = {m: c for m, c in items.items() if c != 0 and abs(c) >= cut}
        self._terms = items

    @property
    def terms(self) -> Mapping[Monomial, complex]:
        return self._terms

    def __len__(self) -> int:
        return len(self._terms)

    def __iter__(self) -> Iterator[Monomial]:
        return iter(self._terms)

    def items(self):
        return self._terms.items()

    def __getitem__(self, m: Monomial) -> complex:
        return self._terms.get(m, 0.0j)

    def __contains__(self, m: Monomial) -> bool:
        return m in self._terms

    def __bool__(self) -> bool:
        return bool(self._terms)

    def _check(self, other: "HamiltonianPoly") -> None:
        if other.d != self.d:
            raise DimensionMismatch(f"dimension {self.d} vs {other.d}")

    def __add__(self, other: "HamiltonianPoly") -> "HamiltonianPoly":
        self._check(other)
        out = dict(self._terms)
        for m, c in other.items():
            out[m] = out.get(m, 0.0j) + c
        return HamiltonianPoly(out, self.d)

    def __neg__(self) -> "HamiltonianPoly":
        return HamiltonianPoly({m: -c for m, c in self.items()}, self.d, prune=False)

    def __sub__(self, other: "HamiltonianPoly") -> "HamiltonianPoly":
        return self + (-other)

    def scale(self, factor: complex) -> "HamiltonianPoly":
        return HamiltonianPoly({m: factor * c for m, c in self.items()}, self.d)

    __mul__ = scale
    __rmul__ = scale

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, HamiltonianPoly):
            return NotImplemented
        return self.d == other.d and self._terms == other._terms

    __hash__ = None  # type: ignore[assignment]

    def conjugate(self) -> "HamiltonianPoly":
        """The complex conjugate polynomial conj(W)(q, conj q)."""
        return HamiltonianPoly({m.conjugate(): c.conjugate() for m, c in self.items()}, self.d, prune=False)

    def is_real(self, tol: float = 0.0) -> bool:
        """Conjugation symmetry W(n, n') == conj(W(n', n)) coefficient-wise."""
        scale = max((abs(c) for c in self._terms.values()), default=0.0)
        for m, c in self.items():
            if abs(self[m.conjugate()].conjugate() - c) > tol * scale:
                return False
        return True

    def max_abs(self) -> float:
        return max((abs(c) for c in self._terms.values()), default=0.0)

    def sites(self) -> set[Site]:
        return {s for m in self._terms for s in m.support}

    def filter(self, keep: Callable[[Monomial], bool]) -> "HamiltonianPoly":
        return HamiltonianPoly({m: c for m, c in self.items() if keep(m)}, self.d, prune=False)

    def sorted_items(self) -> list[tuple[Monomial, complex]]:
        return sorted(self._terms.items(), key=lambda mc: mc[0].entries)

    def evaluate(self, values: Mapping[Site, complex]) -> complex:
        return sum((c * m.evaluate(values) for m, c in self.items()), 0.0j)

    def __repr__(self) -> str:
        return f"HamiltonianPoly(d={self.d}, terms={len(self)})"


def poly(terms: Iterable[tuple[Mapping[Site, tuple[int, int]], complex]], d: int = 1) -> HamiltonianPoly:
    """Build a polynomial from ``(exponent-dict, coefficient)`` pairs, summing repeats."""
    acc: dict[Monomial, complex] = defaultdict(complex)
    for exps, c in terms:
        acc[Monomial.from_dict(exps)] += c
    return HamiltonianPoly(acc, d)


@dataclass(frozen=True)
class NormParams:
    """Parameters (j0, N, r) of the weighted norm over the annulus A(j0, N)."""

    j0: float
    N: float
    r: float

    def __post_init__(self) -> None:
        if not self.r > 2:
            raise ValueError(f"weighted norm needs r > 2, got r={self.r}")
        if self.N < 0:
            raise ValueError(f"annulus half-width must be non-negative, got N={self.N}")

    def contains(self, site: Site) -> bool:
        return in_annulus(site, self.j0, self.N)

    def with_r(self, r: float) -> "NormParams":
        return NormParams(self.j0, self.N, r)


def term_weight(m: Monomial, r: float) -> float:
    """|n|_1 * r^(Delta(n) + |n|_1 - 1)."""
    if m.degree == 0:
        return 0.0
    return m.degree * r ** (m.delta + m.degree - 1)


def weighted_norm(W: HamiltonianPoly, p: NormParams) -> float:
    """Weighted norm ||W||_{j0,N,r} over monomials whose support meets A(j0, N)."""
    total = 0.0
    for m, c in W.items():
        if m.intersects(p.j0, p.N):
            total += abs(c) * term_weight(m, p.r)
    return total


def poisson_bracket(W: HamiltonianPoly, U: HamiltonianPoly) -> HamiltonianPoly:
    """{W, U} = i sum_j (dW/dq_j dU/dconj(q_j) - dW/dconj(q_j) dU/dq_j).

    Only monomial pairs sharing a site contribute; ``U`` is indexed by site so
    the cost is proportional to the number of overlapping pairs.
    """
    if W.d != U.d:
        raise DimensionMismatch(f"dimension {W.d} vs {U.d}")
    by_site: dict[Site, list[tuple[Monomial, complex, int, int]]] = defaultdict(list)
    for m, cu in U.items():
        for s, a, b in m.entries:
            by_site[s].append((m, cu, a, b))
    out: dict[Monomial, complex] = defaultdict(complex)
    for n, cw in W.items():
        for s, nk, npk in n.entries:
            partners = by_site.get(s)
            if not partners:
                continue
            for m, cu, mk, mpk in partners:
                f = nk * mpk - npk * mk
                if f:
                    out[n.bracket_product(m, s)] += 1j * f * cw * cu
    return HamiltonianPoly(out, W.d)


def resonant_split(W: HamiltonianPoly) -> tuple[HamiltonianPoly, HamiltonianPoly]:
    """Split ``W`` into its resonant part (n_j == n'_j everywhere) and the rest."""
    Z = {m: c for m, c in W.items() if m.is_resonant}
    R = {m: c for m, c in W.items() if not m.is_resonant}
    return HamiltonianPoly(Z, W.d, prune=False), HamiltonianPoly(R, W.d, prune=False)


Predicate = Callable[[tuple[Site, ...], float, int], bool]


def truncate(W: HamiltonianPoly, predicate: Predicate) -> HamiltonianPoly:
    """Keep the terms for which ``predicate(support, delta, degree)`` holds."""
    return W.filter(lambda m: predicate(m.support, m.delta, m.degree))


def meets_annulus(j0: float, N: float) -> Predicate:
    def pred(support, delta, degree):
        return any(in_annulus(s, j0, N) for s in support)

    return pred


def size_at_most(cap: float) -> Predicate:
    # tolerance absorbs sqrt rounding of Delta in d >= 2
    def pred(support, delta, degree):
        return delta + degree <= cap + 1e-9

    return pred


def both(*preds: Predicate) -> Predicate:
    def pred(support, delta, degree):
        return all(p(support, delta, degree) for p in preds)

    return pred


def size_slice(W: HamiltonianPoly, A: float) -> HamiltonianPoly:
    return W.filter(lambda m: abs(m.size - A) < 1e-9)


def grade_by_size(W: HamiltonianPoly, A: float, p: NormParams) -> float:
    """Weighted norm of the sub-polynomial with Delta(n) + |n|_1 == A."""
    if A < 3:
        raise ValueError("size slices are defined for A >= 3")
    return weighted_norm(size_slice(W, A), p)


def sizes(W: HamiltonianPoly) -> list[float]:
    """Distinct values of Delta(n) + |n|_1 present in ``W``, ascending."""
    vals: list[float] = []
    for m in W:
        v = m.size
        if not any(abs(v - u) < 1e-9 for u in vals):
            vals.append(v)
    return sorted(vals)


def diagonal(values: Mapping[Site, float], d: int, factor: float = 0.5) -> HamiltonianPoly:
    """``factor * sum_j values[j] |q_j|^2``."""
    return HamiltonianPoly({Monomial.from_dict({s: (1, 1)}): factor * v for s, v in values.items()}, d)


def mass(sites: Iterable[Site], d: int) -> HamiltonianPoly:
    """sum_j |q_j|^2 over the given sites."""
    return HamiltonianPoly({Monomial.from_dict({s: (1, 1)}): 1.0 for s in sites}, d)


# --- text serialization -------------------------------------------------------

_TOKEN = re.compile(r"^(-?\d+(?:,-?\d+)*):\((\d+),(\d+)\)$")


def dumps(W: HamiltonianPoly) -> str:
    """Line format: ``site:(n,n') site:(n,n') ... # re im`` with a ``#! d=`` header."""
    lines = [f"#! d={W.d}"]
    for m, c in W.sorted_items():
        body = str(m)
        lines.append(f"{body} # {c.real!r} {c.imag!r}" if body else f"# {c.real!r} {c.imag!r}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> HamiltonianPoly:
    d = None
    terms: dict[Monomial, complex] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#!"):
            key, _, val = line[2:].strip().partition("=")
            if key.strip() != "d":
                raise ValueError(f"line {lineno}: unknown header {line!r}")
            d = int(val)
            continue
        body, sep, coef = line.partition("#")
        if not sep:
            raise ValueError(f"line {lineno}: missing '# re im' coefficient")
        try:
            re_s, im_s = coef.split()
            c = complex(float(re_s), float(im_s))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad coefficient {coef!r}") from exc
        exps: dict[Site, tuple[int, int]] = {}
        for tok in body.split():
            match = _TOKEN.match(tok)
            if not match:
                raise ValueError(f"line {lineno}: bad site token {tok!r}")
            site = tuple(int(x) for x in match.group(1).split(","))
            if site in exps:
                raise ValueError(f"line {lineno}: repeated site {site}")
            exps[site] = (int(match.group(2)), int(match.group(3)))
            if d is None:
                d = len(site)
        m = Monomial.from_dict(exps)
        if m in terms:
            raise ValueError(f"line {lineno}: repeated monomial {m}")
        terms[m] = c
    return HamiltonianPoly(terms, d or 1, prune=False)
