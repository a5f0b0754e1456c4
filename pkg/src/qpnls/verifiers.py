"""Numerical checks of the three auxiliary measure estimates.

* ``verify_bgg85``: max_l |w.v_l| >= r^{-3/2} M^{1-r} |w|_2 |det[v_l]|.
* ``verify_km98``: sublevel measure of a 1-D function with a k-th derivative
  bounded below, against zeta_k (gamma/A)^{1/k}.
* ``verify_sw23``: multi-dimensional sublevel sets under a directional
  derivative condition; the constant is not explicit, so the check is that
  measure / eps^{1/k} stays bounded along a shrinking sequence of eps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class NotCertified(ValueError):
    """The derivative hypothesis could not be confirmed on the sample grid."""


def _bareiss_det(rows: list[list[int]]) -> int:
    """Exact integer determinant (fraction-free elimination)."""
    a = [list(r) for r in rows]
    n = len(a)
    sign, prev = 1, 1
    for k in range(n - 1):
        if a[k][k] == 0:
            swap = next((i for i in range(k + 1, n) if a[i][k] != 0), None)
            if swap is None:
                return 0
            a[k], a[swap] = a[swap], a[k]
            sign = -sign
        for i in range(k + 1, n):
            for j in range(k + 1, n):
                a[i][j] = (a[i][j] * a[k][k] - a[i][k] * a[k][j]) // prev
        prev = a[k][k]
    return sign * a[n - 1][n - 1]


@dataclass(frozen=True)
class BGG85Result:
    lhs: float
    rhs: float
    det: float
    holds: bool


def verify_bgg85(vectors: Sequence[Sequence[float]], w: Sequence[float], M: float | None = None) -> BGG85Result:
    V = np.asarray(vectors, dtype=float)
    r = V.shape[0]
    if V.shape != (r, r) or len(w) != r:
        raise ValueError("need r vectors in R^r and w in R^r")
    l1 = np.abs(V).sum(axis=1)
    if M is None:
        M = float(l1.max())
    elif np.any(l1 > M):
        raise ValueError(f"a vector has |v|_1 = {l1.max()} > M = {M}")
    if np.all(V == np.round(V)):
        det = float(_bareiss_det([[int(x) for x in row] for row in V]))
    else:
        det = float(np.linalg.det(V))
    w = np.asarray(w, dtype=float)
    lhs = float(np.max(np.abs(V @ w)))
    if det == 0:
        return BGG85Result(lhs, 0.0, 0.0, True)
    rhs = r**-1.5 * M ** (1 - r) * float(np.linalg.norm(w)) * abs(det)
    return BGG85Result(lhs, rhs, det, lhs >= rhs * (1 - 1e-12))


def zeta(k: int) -> float:
    return k * (k + 1) * math.factorial(k + 1) ** (1.0 / k)


@dataclass(frozen=True)
class KM98Result:
    measure: float
    bound: float
    holds: bool
    derivative_min: float
    grid_error: float


def _sublevel_1d(f: Callable, a: float, b: float, level: float, n: int) -> tuple[float, float]:
    h = (b - a) / n
    mids = a + (np.arange(n) + 0.5) * h
    inside = np.abs(f(mids)) <= level
    transitions = int(np.count_nonzero(inside[1:] != inside[:-1]))
    return h * int(inside.sum()), h * (transitions + 2)


def _kth_difference(values: np.ndarray, k: int, h: float) -> np.ndarray:
    return np.diff(values, k) / h**k


def verify_km98(
    f: Callable[[np.ndarray], np.ndarray],
    interval: tuple[float, float],
    k: int,
    A: float,
    gamma: float,
    n_grid: int = 200_000,
    fk: Callable[[np.ndarray], np.ndarray] | None = None,
    n_deriv: int = 2_001,
) -> KM98Result:
    """Compare the grid measure of {|f| <= gamma} on ``interval`` with zeta_k (gamma/A)^{1/k}.

    The hypothesis inf |f^{(k)}| >= A is checked on a grid, with ``fk`` when
    given and k-th finite differences otherwise.
    """
    a, b = interval
    if not b > a:
        raise ValueError("interval must have positive length")
    if k < 1 or A <= 0 or gamma < 0:
        raise ValueError("need k >= 1, A > 0, gamma >= 0")
    nodes = np.linspace(a, b, n_deriv)
    if fk is not None:
        dmin = float(np.min(np.abs(fk(nodes))))
        slack = 0.0
    else:
        dmin = float(np.min(np.abs(_kth_difference(f(nodes), k, nodes[1] - nodes[0]))))
        slack = 1e-6
    if dmin < A * (1 - slack):
        raise NotCertified(f"min |f^({k})| on the grid is {dmin:.6g} < A = {A}")
    bound = zeta(k) * (gamma / A) ** (1.0 / k)
    measure, err = _sublevel_1d(f, a, b, gamma, n_grid)
    if bound > 0 and err >= 0.01 * bound:
        raise NotCertified(f"grid error {err:.3g} is not below 1% of the bound {bound:.3g}; refine n_grid")
    return KM98Result(measure, bound, measure <= bound, dmin, err)


@dataclass(frozen=True)
class SW23Result:
    epsilons: tuple[float, ...]
    measures: tuple[float, ...]
    ratios: tuple[float, ...]
    slope: float
    derivative_min: float
    bounded: bool


def _directional(f: Callable, pts: Sequence[np.ndarray], beta: np.ndarray, l: int, h: float) -> np.ndarray:
    """Central l-th difference of f along beta."""
    out = 0.0
    for i in range(l + 1):
        shift = (l / 2 - i) * h
        out = out + (-1) ** i * math.comb(l, i) * f(*[p + shift * bi for p, bi in zip(pts, beta)])
    return out / h**l


def sublevel_measure(f: Callable, a: Sequence[float], b: Sequence[float], eps: float, n: int) -> float:
    """Midpoint-grid measure of {|f| <= eps} on the box prod [a_i, b_i]; f takes one array per axis."""
    d = len(a)
    axes = [a[i] + (np.arange(n) + 0.5) * (b[i] - a[i]) / n for i in range(d)]
    cell = float(np.prod([(b[i] - a[i]) / n for i in range(d)]))
    if d == 1:
        return cell * int(np.count_nonzero(np.abs(f(axes[0])) <= eps))
    count = 0
    rest = np.meshgrid(*axes[1:], indexing="ij", sparse=True)
    for x0 in axes[0]:
        count += int(np.count_nonzero(np.abs(f(x0, *rest)) <= eps))
    return cell * count


def verify_sw23(
    f: Callable[..., np.ndarray],
    box: tuple[Sequence[float], Sequence[float]],
    beta: Sequence[float],
    k: int,
    A: float,
    epsilons: Sequence[float],
    n_grid: int = 1024,
    derivs: Sequence[Callable[..., np.ndarray]] | None = None,
    n_cert: int = 64,
    max_growth: float = 2.0,
) -> SW23Result:
    """Scaling check of meas{|f| <= eps} / eps^{1/k} along ``epsilons``.

    ``bounded`` holds when no ratio exceeds ``max_growth`` times the ratio at
    the largest eps (a zero measure is trivially bounded).
    """
    a, b = (np.asarray(x, dtype=float) for x in box)
    d = len(a)
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (d,) or not np.any(beta):
        raise ValueError("beta must be a nonzero vector of the box dimension")
    eps_sorted = sorted(epsilons, reverse=True)
    if not all(0 < e < A < 1 for e in eps_sorted):
        raise ValueError("need 0 < eps < A < 1")
    grid = np.meshgrid(*[np.linspace(a[i], b[i], n_cert) for i in range(d)], indexing="ij")
    h = 1e-3 * float(np.min(b - a))
    best = np.zeros(grid[0].shape)
    for l in range(1, k + 1):
        vals = derivs[l - 1](*grid) if derivs is not None else _directional(f, grid, beta, l, h)
        best = np.maximum(best, np.abs(np.broadcast_to(vals, best.shape)))
    dmin = float(best.min())
    slack = 0.0 if derivs is not None else 1e-6
    if dmin < A * (1 - slack):
        raise NotCertified(f"inf sup_l |d_beta^l f| on the grid is {dmin:.6g} < A = {A}")
    measures = tuple(sublevel_measure(f, a, b, e, n_grid) for e in eps_sorted)
    ratios = tuple(m / e ** (1.0 / k) for m, e in zip(measures, eps_sorted))
    pos = [(math.log(e), math.log(m)) for e, m in zip(eps_sorted, measures) if m > 0]
    slope = float(np.polyfit(*zip(*pos), 1)[0]) if len(pos) >= 2 else math.nan
    bounded = ratios[0] == 0 or max(ratios) <= max_growth * ratios[0]
    return SW23Result(tuple(eps_sorted), measures, ratios, slope, dmin, bounded)
