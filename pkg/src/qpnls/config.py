"""YAML run configuration: schema, defaults and validation.

A config file looks like::

    schema_version: 1
    experiment: simulate        # simulate | normal-form | measure | verify
    seed: 0
    format: csv                 # csv | json
    potential:
      d: 1
      L: 1
      gamma_set: [[[1], 1.0]]   # list of [l, v_l]
      theta: [0.0]
      alpha: [0.0]
    simulate:                   # section named after the experiment
      M: 2
      ...

Missing keys take the defaults below; unknown keys are errors. The resolved
config (every default filled in) is written next to the outputs and loads
back to an identical ``RunConfig``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .potential import PotentialSpec, validate_spec

SCHEMA_VERSION = 1
EXPERIMENTS = ("simulate", "normal-form", "measure", "verify")

DEFAULTS: dict[str, dict[str, Any]] = {
    "simulate": {
        "M": 2,
        "j0": 12,
        "delta": 0.01,
        "epsilon1": 0.05,
        "epsilon2": 0.05,
        "gamma": 0.1,
        "tau": 1e-6,
        "n_samples": 20,
        "max_draws": 200,
        "t_end": None,
        "dt": None,
        "cadence": 1,
        "slope_factor": 10.0,
        "checkpoints": True,
    },
    "normal-form": {
        "M": 2,
        "j0": 12,
        "r": 4.2,
        "epsilon1": 5e-5,
        "epsilon2": 9.5e-4,
        "tau": 1e-6,
        "lie_order": 60,
        "size_cap_offset": 2,
        "halo": None,
        "retain_cap": None,
        "gamma": 0.1,
        "prescan": True,
    },
    "measure": {
        "M": 2,
        "j0": 20,
        "gamma": 0.1,
        "tau": 1e-6,
        "samples": 10000,
        "strict": False,
    },
    "verify": {
        "bgg85_trials": 10000,
        "bgg85_max_entry": 5,
        "km98_grid": 200000,
        "sw23_grid": 4096,
        "sw23_exponents": [3, 10],
    },
}

# Phases used when the config leaves theta/alpha out: a generic shift and
# golden-ratio / sqrt-of-prime frequencies, which keep V_j non-degenerate.
DEFAULT_THETA = 0.1234
DEFAULT_ALPHA = ((math.sqrt(5) - 1) / 2,) + tuple(math.sqrt(p) % 1 for p in (2, 3, 7, 11, 13, 17, 19))

POTENTIAL_DEFAULTS = {"d": 1, "L": 1, "gamma_set": [[[1], 1.0]], "theta": None, "alpha": None}
TOP_KEYS = {"schema_version", "experiment", "seed", "format", "potential", *DEFAULTS}


class ConfigError(ValueError):
    pass


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads exponent floats without a dot (1e-6)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(
        r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
        |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
        |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
        |[-+]?\.(?:inf|Inf|INF)
        |\.(?:nan|NaN|NAN))$""",
        re.X,
    ),
    list("-+0123456789."),
)


@dataclass(frozen=True)
class RunConfig:
    experiment: str
    potential: PotentialSpec
    params: dict[str, Any] = field(hash=False)
    seed: int = 0
    format: str = "csv"

    def section(self) -> dict[str, Any]:
        return dict(self.params)


def _parse(text: str, source: str) -> dict:
    try:
        data = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigError(f"{source}: parse error at {where}: {getattr(exc, 'problem', exc)}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    return data


def _merge(section: str, given: dict | None, defaults: dict) -> dict:
    given = dict(given or {})
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"{section}: unknown field(s) {', '.join(unknown)}")
    out = dict(defaults)
    out.update(given)
    return out


def _potential(raw: dict | None) -> PotentialSpec:
    p = _merge("potential", raw, POTENTIAL_DEFAULTS)
    try:
        gamma_set = tuple((tuple(int(c) for c in ell), float(v)) for ell, v in p["gamma_set"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"potential.gamma_set: expected a list of [l, v_l] pairs ({exc})") from exc
    d = int(p["d"])
    if not 1 <= d <= len(DEFAULT_ALPHA):
        raise ConfigError(f"potential.d: must lie in 1..{len(DEFAULT_ALPHA)}, got {d}")
    theta = tuple(p["theta"]) if p["theta"] is not None else (DEFAULT_THETA,) * d
    alpha = tuple(p["alpha"]) if p["alpha"] is not None else DEFAULT_ALPHA[:d]
    spec = PotentialSpec(d=d, L=int(p["L"]), gamma_set=gamma_set, theta=theta, alpha=alpha)
    problems = validate_spec(spec)
    if problems:
        raise ConfigError("potential: " + "; ".join(str(v) for v in problems))
    return spec


def _check_params(kind: str, p: dict) -> None:
    def positive_int(*names):
        for n in names:
            if not isinstance(p[n], int) or isinstance(p[n], bool) or p[n] < 1:
                raise ConfigError(f"{kind}.{n}: must be a positive integer, got {p[n]!r}")

    def nonneg(*names):
        for n in names:
            if p[n] is not None and (not isinstance(p[n], (int, float)) or p[n] < 0):
                raise ConfigError(f"{kind}.{n}: must be a non-negative number, got {p[n]!r}")

    if kind == "simulate":
        positive_int("M", "j0", "n_samples", "max_draws", "cadence")
        nonneg("delta", "epsilon1", "epsilon2", "tau", "t_end", "dt")
        if p["epsilon1"] + p["epsilon2"] == 0 and p["t_end"] is None:
            raise ConfigError("simulate.t_end: required when epsilon1 + epsilon2 = 0")
    elif kind == "normal-form":
        positive_int("M", "j0", "lie_order")
        nonneg("r", "epsilon1", "epsilon2", "tau")
    elif kind == "measure":
        positive_int("M", "j0", "samples")
        nonneg("tau")
        if p["samples"] < 100:
            raise ConfigError("measure.samples: need at least 100")
    elif kind == "verify":
        positive_int("bgg85_trials", "bgg85_max_entry", "km98_grid", "sw23_grid")
    if "gamma" in p and not 0 < p["gamma"] < 1:
        raise ConfigError(f"{kind}.gamma: must lie in (0, 1)")


def parse_config(text: str, source: str = "<config>", overrides: dict | None = None) -> RunConfig:
    data = _parse(text, source)
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = sorted(set(data) - TOP_KEYS)
    if unknown:
        raise ConfigError(f"{source}: unknown top-level field(s) {', '.join(unknown)}")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{source}: schema_version {version!r} is not supported (expected {SCHEMA_VERSION})")
    kind = data.get("experiment")
    if kind not in EXPERIMENTS:
        raise ConfigError(f"{source}: experiment must be one of {', '.join(EXPERIMENTS)}, got {kind!r}")
    fmt = data.get("format", "csv")
    if fmt not in ("csv", "json"):
        raise ConfigError(f"{source}: format must be csv or json")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or seed < 0 or seed >= 2**64:
        raise ConfigError(f"{source}: seed must be an unsigned 64-bit integer")
    spec = _potential(data.get("potential"))
    params = _merge(kind, data.get(kind), DEFAULTS[kind])
    _check_params(kind, params)
    return RunConfig(kind, spec, params, seed, fmt)


def load_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    return parse_config(text, str(path), overrides)


def resolved_dict(cfg: RunConfig) -> dict:
    spec = cfg.potential
    return {
        "schema_version": SCHEMA_VERSION,
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "format": cfg.format,
        "potential": {
            "d": spec.d,
            "L": spec.L,
            "gamma_set": [[list(ell), v] for ell, v in spec.gamma_set],
            "theta": list(spec.theta),
            "alpha": list(spec.alpha),
        },
        cfg.experiment: dict(cfg.params),
    }


def dump_resolved(cfg: RunConfig) -> str:
    return yaml.safe_dump(resolved_dict(cfg), sort_keys=False, default_flow_style=None)
