"""Split-step integration of i dq_j/dt = V_j q_j + eps1 (Delta q)_j + eps2 |q_j|^2 q_j.

(Delta q)_j is the nearest-neighbour sum. The step is a palindromic Strang
composition of the diagonal flow (an exact phase rotation, |q_j| is constant
under it) and per-axis, per-parity sweeps of exact 2x2 bond rotations. Every
sub-flow is unitary, so the l2 norm is conserved up to rounding.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .potential import PotentialSpec, potential_vector
from .resonance import DivisorTable, ResonanceParams, check_nonresonant, enumerate_divisor_indices

Site = tuple[int, ...]


@dataclass(frozen=True)
class Box:
    """Axis-aligned block prod_a [lo_a, hi_a] of Z^d, sites in C order."""

    lo: tuple[int, ...]
    hi: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.lo) != len(self.hi) or any(h < l for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"bad box bounds {self.lo}..{self.hi}")

    @classmethod
    def cube(cls, d: int, R: int) -> "Box":
        return cls((-R,) * d, (R,) * d)

    @property
    def d(self) -> int:
        return len(self.lo)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def sites(self) -> list[Site]:
        return list(itertools.product(*[range(l, h + 1) for l, h in zip(self.lo, self.hi)]))

    def coords(self) -> list[np.ndarray]:
        """Open-grid coordinate arrays, one per axis."""
        return list(np.ogrid[tuple(slice(l, h + 1) for l, h in zip(self.lo, self.hi))])

    def radii(self) -> np.ndarray:
        """Euclidean |j| on the box, shaped like the amplitudes."""
        sq = sum(c.astype(float) ** 2 for c in self.coords())
        return np.sqrt(np.broadcast_to(sq, self.shape))

    def index(self, site: Site) -> tuple[int, ...]:
        return tuple(s - l for s, l in zip(site, self.lo))


@dataclass
class LatticeState:
    box: Box
    q: np.ndarray
    time: float = 0.0

    def __post_init__(self) -> None:
        self.q = np.asarray(self.q, dtype=complex).reshape(self.box.shape)

    @classmethod
    def zeros(cls, box: Box) -> "LatticeState":
        return cls(box, np.zeros(box.shape, dtype=complex))

    def copy(self) -> "LatticeState":
        return LatticeState(self.box, self.q.copy(), self.time)


@dataclass(frozen=True)
class SimConfig:
    spec: PotentialSpec
    epsilon1: float
    epsilon2: float
    dt: float
    t_end: float
    cadence: int = 1

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.t_end < 0:
            raise ValueError("t_end must be non-negative")
        if self.cadence < 1:
            raise ValueError("cadence must be a positive integer")

    @property
    def n_steps(self) -> int:
        return int(math.ceil(self.t_end / self.dt - 1e-9))


def default_dt(spec: PotentialSpec, epsilon1: float, epsilon2: float, max_mass: float) -> float:
    return 0.01 / max(1.0, spec.amplitude_sum + 4 * spec.d * epsilon1 + epsilon2 * max_mass)


def _rotation(angle: float) -> tuple[float, float]:
    """(cos(angle) - 1, sin(angle)), both to full relative precision.

    Carrying cos - 1 = -2 sin^2(angle/2) instead of the rounded cosine keeps
    (1 + cm1)^2 + s^2 - 1 at the level of s^2 * 1e-16 for small angles. A
    rounded cosine leaves a bias of order 1e-16 per rotation, which
    accumulates linearly over millions of bond rotations.
    """
    h = math.sin(0.5 * angle)
    return -2.0 * h * h, math.sin(angle)


class Integrator:
    """Precomputed potential and bond rotations for a fixed (box, config)."""

    def __init__(self, box: Box, config: SimConfig):
        self.box = box
        self.config = config
        self.V = potential_vector(config.spec, box.sites()).reshape(box.shape)
        half, full = 0.5 * config.dt, config.dt
        self._half = _rotation(config.epsilon1 * half)
        self._full = _rotation(config.epsilon1 * full)
        sweeps = [(a, p) for a in range(box.d) for p in (0, 1)]
        # S_1 .. S_{2d-1} at dt/2, S_{2d} at dt, then back
        self.schedule = [(a, p, self._half) for a, p in sweeps[:-1]]
        self.schedule += [(sweeps[-1][0], sweeps[-1][1], self._full)]
        self.schedule += [(a, p, self._half) for a, p in reversed(sweeps[:-1])]
        self.slices = {
            (a, p): (self._axis_slice(a, p, box.shape[a] - 1), self._axis_slice(a, p + 1, box.shape[a]))
            for a, p in sweeps
        }

    def _axis_slice(self, axis: int, start: int, stop: int) -> tuple[slice, ...]:
        idx = [slice(None)] * self.box.d
        idx[axis] = slice(start, stop, 2)
        return tuple(idx)

    def diagonal(self, q: np.ndarray, tau: float) -> None:
        phase = self.V + self.config.epsilon2 * (q.real**2 + q.imag**2)
        q *= np.exp(-1j * tau * phase)

    def bonds(self, q: np.ndarray, axis: int, parity: int, cs: tuple[float, float]) -> None:
        if self.config.epsilon1 == 0:
            return
        cm1, s = cs
        ls, rs = self.slices[(axis, parity)]
        left = q[ls]
        right = q[rs]
        new_left = left + (cm1 * left - 1j * s * right)
        right += cm1 * right - 1j * s * left
        left[...] = new_left

    def step(self, q: np.ndarray, dt_sign: float = 1.0) -> None:
        """Advance ``q`` in place by one step (``dt_sign=-1`` runs backwards)."""
        half = 0.5 * self.config.dt * dt_sign
        self.diagonal(q, half)
        for axis, parity, (c, s) in self.schedule:
            self.bonds(q, axis, parity, (c, s * dt_sign))
        self.diagonal(q, half)


def step(state: LatticeState, config: SimConfig, integrator: Integrator | None = None) -> LatticeState:
    """One Strang step; returns a new state."""
    integ = integrator or Integrator(state.box, config)
    q = state.q.copy()
    integ.step(q)
    return LatticeState(state.box, q, state.time + config.dt)


def l2_norm(state: LatticeState) -> float:
    """sum_j |q_j|^2."""
    return float(np.sum(state.q.real**2 + state.q.imag**2))


def barrier_mass(state: LatticeState, radius: float) -> float:
    """sum over |j| > radius of |q_j|^2."""
    mask = state.box.radii() > radius
    q = state.q[mask]
    return float(np.sum(q.real**2 + q.imag**2))


def energy(state: LatticeState, config: SimConfig, V: np.ndarray | None = None) -> float:
    """H = 1/2 (sum V|q|^2 + eps1 sum_{ordered nbr pairs} q_j conj(q_j') + eps2/2 sum |q|^4)."""
    q = state.q
    if V is None:
        V = potential_vector(config.spec, state.box.sites()).reshape(state.box.shape)
    m = q.real**2 + q.imag**2
    hop = 0.0
    for axis in range(state.box.d):
        n = state.box.shape[axis]
        a = np.take(q, range(0, n - 1), axis=axis)
        b = np.take(q, range(1, n), axis=axis)
        # both orientations of each bond: 2 Re(a conj b)
        hop += 2.0 * float(np.sum((a * np.conj(b)).real))
    return 0.5 * (float(np.sum(V * m)) + config.epsilon1 * hop + 0.5 * config.epsilon2 * float(np.sum(m * m)))


@dataclass(frozen=True)
class Record:
    t: float
    l2_norm: float
    energy: float
    mass_j0: float
    mass_outer: float


def evolve(
    state: LatticeState,
    config: SimConfig,
    radii: tuple[float, float] | None = None,
    n_steps: int | None = None,
) -> tuple[LatticeState, list[Record]]:
    """Integrate ``n_steps`` (default: up to t_end), recording observables every ``cadence`` steps.

    ``radii`` are the two barrier radii (j0, j0 + M^2) reported per record.
    """
    integ = Integrator(state.box, config)
    n = config.n_steps if n_steps is None else n_steps
    q = state.q.copy()
    r_in, r_out = radii if radii is not None else (math.inf, math.inf)
    rad = state.box.radii()
    mask_in, mask_out = rad > r_in, rad > r_out

    def record(k: int) -> Record:
        m = q.real**2 + q.imag**2
        cur = LatticeState(state.box, q, state.time + k * config.dt)
        return Record(cur.time, float(m.sum()), energy(cur, config, integ.V), float(m[mask_in].sum()),
                      float(m[mask_out].sum()))

    out = [record(0)]
    for k in range(1, n + 1):
        integ.step(q)
        if k % config.cadence == 0 or k == n:
            out.append(record(k))
    return LatticeState(state.box, q, state.time + n * config.dt), out


# --- checkpoints ----------------------------------------------------------------


def dumps_state(state: LatticeState) -> str:
    """Text checkpoint: a header line, then ``site re im`` per site in box order."""
    lo = ",".join(map(str, state.box.lo))
    hi = ",".join(map(str, state.box.hi))
    lines = [f"#! d={state.box.d} lo={lo} hi={hi} t={state.time!r}"]
    for site, z in zip(state.box.sites(), state.q.ravel()):
        lines.append(f"{','.join(map(str, site))} {float(z.real)!r} {float(z.imag)!r}")
    return "\n".join(lines) + "\n"


def loads_state(text: str) -> LatticeState:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("#!"):
        raise ValueError("missing '#!' header")
    head = dict(tok.split("=", 1) for tok in lines[0][2:].split())
    lo = tuple(int(x) for x in head["lo"].split(","))
    hi = tuple(int(x) for x in head["hi"].split(","))
    box = Box(lo, hi)
    q = np.zeros(box.shape, dtype=complex)
    for lineno, ln in enumerate(lines[1:], 2):
        parts = ln.split()
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected 'site re im'")
        site = tuple(int(x) for x in parts[0].split(","))
        q[box.index(site)] = complex(float(parts[1]), float(parts[2]))
    return LatticeState(box, q, float(head["t"]))


# --- localization experiment ------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    spec: PotentialSpec  # frequency set and amplitudes; phases are sampled
    M: int
    j0: int
    delta: float
    epsilon1: float
    epsilon2: float
    gamma: float = 0.1
    tau: float = 1e-6
    n_samples: int = 20
    max_draws: int = 200
    seed: int = 0
    t_end: float | None = None
    dt: float | None = None
    cadence: int = 1
    slope_factor: float = 10.0

    @property
    def epsilon(self) -> float:
        return self.epsilon1 + self.epsilon2

    @property
    def horizon(self) -> float:
        if self.t_end is not None:
            return self.t_end
        if self.epsilon == 0:
            raise ValueError("t_end must be given when epsilon = 0")
        return self.delta * self.epsilon ** (-self.M)

    @property
    def outer_radius(self) -> int:
        return self.j0 + self.M**2

    @property
    def halo(self) -> int:
        return int(math.ceil(4 * self.spec.d * self.epsilon1 * self.horizon)) + 10


def initial_state(box: Box, j0: float, outer: float, delta: float, rng: np.random.Generator) -> LatticeState:
    """Unit mass on |j| <= j0 plus 0.9 delta spread over j0 < |j| <= outer, random phases."""
    rad = box.radii()
    z = rng.standard_normal(box.shape) + 1j * rng.standard_normal(box.shape)
    q = np.zeros(box.shape, dtype=complex)
    core = rad <= j0
    tail = (rad > j0) & (rad <= outer)
    q[core] = z[core] / math.sqrt(np.sum(np.abs(z[core]) ** 2))
    if tail.any() and delta > 0:
        q[tail] = z[tail] * math.sqrt(0.9 * delta / np.sum(np.abs(z[tail]) ** 2))
    return LatticeState(box, q)


@dataclass
class SampleResult:
    index: int
    theta: tuple[float, ...]
    alpha: tuple[float, ...]
    max_barrier: float
    initial_barrier: float
    slope: float
    edge_mass: float
    records: list[Record] = field(repr=False)
    final: LatticeState | None = field(default=None, repr=False)


@dataclass
class ExperimentReport:
    samples: list[SampleResult]
    resonant: list[tuple[tuple[float, ...], tuple[float, ...]]]
    delta: float
    slope_bound: float

    @property
    def mass_pass(self) -> bool:
        return bool(self.samples) and all(s.max_barrier < 2 * self.delta for s in self.samples)

    @property
    def max_slope(self) -> float:
        return max((s.slope for s in self.samples), default=0.0)

    @property
    def slope_pass(self) -> bool:
        return self.max_slope <= self.slope_bound


def growth_slope(records: Sequence[Record]) -> float:
    """Least-squares slope of the outer barrier mass against t."""
    t = np.array([r.t for r in records])
    m = np.array([r.mass_outer for r in records])
    if len(t) < 2 or np.ptp(t) == 0:
        return 0.0
    return float(np.polyfit(t, m, 1)[0])


def _draws(seed: int, d: int) -> Iterator[tuple[int, tuple[float, ...], tuple[float, ...], np.random.Generator]]:
    k = 0
    while True:
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        u = rng.random(2 * d)
        yield k, tuple(u[:d].tolist()), tuple(u[d:].tolist()), rng
        k += 1


def localization_experiment(cfg: ExperimentConfig, table: DivisorTable | None = None) -> ExperimentReport:
    """Sample non-resonant phases and track the mass beyond j0 + M^2 up to t = delta eps^-M."""
    d = cfg.spec.d
    params = ResonanceParams(gamma=cfg.gamma, L=cfg.spec.L, M=cfg.M, j0=cfg.j0, d=d, tau=cfg.tau)
    if table is None:
        table = DivisorTable.build(enumerate_divisor_indices(params))
    box = Box.cube(d, cfg.outer_radius + cfg.halo)
    samples: list[SampleResult] = []
    resonant = []
    for k, theta, alpha, rng in _draws(cfg.seed, d):
        if len(samples) >= cfg.n_samples:
            break
        if k >= cfg.max_draws:
            raise RuntimeError(f"only {len(samples)} non-resonant samples in {cfg.max_draws} draws")
        spec = cfg.spec.with_phases(theta, alpha)
        omega = dict(zip(table.sites, potential_vector(spec, table.sites).tolist())) if table.sites else {}
        if not check_nonresonant(omega, params, table).ok:
            resonant.append((theta, alpha))
            continue
        state = initial_state(box, cfg.j0, cfg.outer_radius, cfg.delta, rng)
        dt = cfg.dt or default_dt(spec, cfg.epsilon1, cfg.epsilon2, float(np.max(np.abs(state.q) ** 2)))
        horizon = cfg.horizon
        n = int(math.ceil(horizon / dt - 1e-9))
        sim = SimConfig(spec, cfg.epsilon1, cfg.epsilon2, horizon / n if n else dt, horizon, cfg.cadence)
        final, records = evolve(state, sim, (cfg.j0, cfg.outer_radius), n)
        edge = box.radii() > (cfg.outer_radius + cfg.halo - 5)
        samples.append(
            SampleResult(
                index=k,
                theta=theta,
                alpha=alpha,
                max_barrier=max(r.mass_outer for r in records),
                initial_barrier=records[0].mass_outer,
                slope=growth_slope(records),
                edge_mass=float(np.sum(np.abs(final.q[edge]) ** 2)),
                records=records,
                final=final,
            )
        )
    return ExperimentReport(samples, resonant, cfg.delta, cfg.slope_factor * cfg.epsilon ** (cfg.M + 1))


def records_csv(records: Sequence[Record]) -> str:
    lines = ["t,l2_norm,energy,barrier_mass@j0,barrier_mass@j0+M^2"]
    for r in records:
        lines.append(f"{r.t!r},{r.l2_norm!r},{r.energy!r},{r.mass_j0!r},{r.mass_outer!r}")
    return "\n".join(lines) + "\n"
