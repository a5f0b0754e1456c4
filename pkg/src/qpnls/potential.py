"""Quasi-periodic on-site potential V_j = sum_l v_l cos 2pi l.(theta + j*alpha)."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

Site = tuple[int, ...]

# Veltkamp split constant for 53-bit doubles.
_SPLIT = 134217729.0  # 2**27 + 1


@dataclass(frozen=True)
class PotentialSpec:
    """Frequency set with amplitudes plus the phases (theta, alpha).

    ``gamma_set`` holds ``(l, v_l)`` pairs with ``l`` an integer tuple of
    length ``d``.
    """

    d: int
    L: int
    gamma_set: tuple[tuple[Site, float], ...]
    theta: tuple[float, ...] = field(default=())
    alpha: tuple[float, ...] = field(default=())

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "gamma_set", tuple((tuple(int(c) for c in ell), float(v)) for ell, v in self.gamma_set)
        )
        theta = tuple(float(x) for x in self.theta) or (0.0,) * self.d
        alpha = tuple(float(x) for x in self.alpha) or (0.0,) * self.d
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "alpha", alpha)

    @property
    def frequencies(self) -> np.ndarray:
        return np.array([ell for ell, _ in self.gamma_set], dtype=np.int64).reshape(len(self.gamma_set), self.d)

    @property
    def amplitudes(self) -> np.ndarray:
        return np.array([v for _, v in self.gamma_set], dtype=float)

    @property
    def amplitude_sum(self) -> float:
        return float(np.abs(self.amplitudes).sum())

    def with_phases(self, theta: Sequence[float], alpha: Sequence[float]) -> "PotentialSpec":
        return replace(self, theta=tuple(theta), alpha=tuple(alpha))


@dataclass(frozen=True)
class Violation:
    condition: str
    detail: str

    def __str__(self) -> str:
        return f"({self.condition}) {self.detail}"


def validate_spec(spec: PotentialSpec) -> list[Violation]:
    """Report every violated condition; an empty list means the spec is valid."""
    out: list[Violation] = []
    if spec.d < 1:
        out.append(Violation("dim", f"d must be >= 1, got {spec.d}"))
        return out
    if spec.L < 1:
        out.append(Violation("L", f"L must be a positive integer, got {spec.L}"))
    if len(spec.theta) != spec.d or len(spec.alpha) != spec.d:
        out.append(Violation("dim", f"theta/alpha must have length {spec.d}"))
    if not spec.gamma_set:
        out.append(Violation("empty", "frequency set is empty"))
    seen: set[Site] = set()
    ells = [ell for ell, _ in spec.gamma_set]
    for ell in ells:
        if len(ell) != spec.d:
            out.append(Violation("dim", f"l={ell} does not have length {spec.d}"))
            continue
        if any(c == 0 for c in ell):
            out.append(Violation("a", f"l={ell} has a zero component"))
        if any(abs(c) > spec.L for c in ell):
            out.append(Violation("L", f"l={ell} lies outside [-{spec.L}, {spec.L}]^{spec.d}"))
        if ell in seen:
            out.append(Violation("duplicate", f"l={ell} listed more than once"))
        seen.add(ell)
    for i in range(len(ells)):
        for k in range(i + 1, len(ells)):
            a, b = ells[i], ells[k]
            if len(a) == len(b) == spec.d and all(x + y == 0 for x, y in zip(a, b)):
                out.append(Violation("b", f"l={a} and l'={b} satisfy l + l' = 0"))
    return out


def _frac_times(n: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Fractional part of ``n * x`` for integer ``n``, without losing the low bits.

    ``x`` is split as hi + lo with hi holding 26 significant bits, so ``n * hi``
    is exact for |n| < 2**26 and its fractional part is taken exactly.
    """
    x = np.asarray(x, dtype=float)
    n = np.asarray(n, dtype=float)
    t = _SPLIT * x
    hi = t - (t - x)
    lo = x - hi
    p = n * hi
    return (p - np.floor(p)) + n * lo


def _phases(spec: PotentialSpec, sites: np.ndarray) -> np.ndarray:
    """Reduced arguments l.(theta + j*alpha) mod 1, shape (n_sites, n_freq)."""
    ells = spec.frequencies.astype(float)  # (F, d)
    theta = np.asarray(spec.theta, dtype=float)
    alpha = np.asarray(spec.alpha, dtype=float)
    sites = np.asarray(sites, dtype=float).reshape(-1, spec.d)
    acc = np.zeros((sites.shape[0], ells.shape[0]))
    for i in range(spec.d):
        acc += _frac_times(ells[None, :, i], theta[i])
        acc += _frac_times(ells[None, :, i] * sites[:, None, i], alpha[i])
    return acc - np.floor(acc)


def eval_potential(spec: PotentialSpec, j: Sequence[int]) -> float:
    return float(potential_vector(spec, [tuple(j)])[0])


def potential_vector(spec: PotentialSpec, box: Sequence[Sequence[int]]) -> np.ndarray:
    """V_j for every site of ``box``, in box order."""
    if len(box) == 0:
        raise ValueError("box must be nonempty")
    cosm = cos_matrix(spec, box)
    out = np.zeros(cosm.shape[0])
    for f, v in enumerate(spec.amplitudes):
        out += v * cosm[:, f]
    return out


def cos_matrix(spec: PotentialSpec, sites: Sequence[Sequence[int]]) -> np.ndarray:
    """cos 2pi l.(theta + j*alpha) per (site, frequency)."""
    return np.cos(2.0 * np.pi * _phases(spec, np.asarray(sites)))


def potential_batch(spec: PotentialSpec, sites: Sequence[Sequence[int]], theta: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Potential on ``sites`` for many phase samples at once.

    ``theta`` and ``alpha`` have shape (S, d); the result has shape (S, n_sites).
    """
    ells = spec.frequencies.astype(float)
    amps = spec.amplitudes
    sites = np.asarray(sites, dtype=float).reshape(-1, spec.d)
    theta = np.asarray(theta, dtype=float).reshape(-1, spec.d)
    alpha = np.asarray(alpha, dtype=float).reshape(-1, spec.d)
    out = np.zeros((theta.shape[0], sites.shape[0]))
    for f in range(ells.shape[0]):
        acc = np.zeros_like(out)
        for i in range(spec.d):
            acc += _frac_times(ells[f, i], theta[:, i])[:, None]
            acc += _frac_times(ells[f, i] * sites[None, :, i], alpha[:, i][:, None])
        out += amps[f] * np.cos(2.0 * np.pi * (acc - np.floor(acc)))
    return out


def random_spec(rng: np.random.Generator, d: int, L: int, n_freq: int) -> PotentialSpec:
    """A random spec satisfying (a) and (b) (nonzero components, no l + l' = 0)."""
    chosen: list[Site] = []
    attempts = 0
    while len(chosen) < n_freq:
        attempts += 1
        if attempts > 10_000:
            raise ValueError(f"cannot draw {n_freq} admissible frequencies with L={L}, d={d}")
        mags = rng.integers(1, L + 1, size=d)
        signs = rng.choice([-1, 1], size=d)
        ell = tuple(int(x) for x in mags * signs)
        neg = tuple(-c for c in ell)
        if ell in chosen or neg in chosen:
            continue
        chosen.append(ell)
    amps = rng.uniform(0.5, 1.5, size=n_freq)
    return PotentialSpec(
        d=d,
        L=L,
        gamma_set=tuple(zip(chosen, amps.tolist())),
        theta=tuple(rng.random(d).tolist()),
        alpha=tuple(rng.random(d).tolist()),
    )
