"""Domain types shared by every part of the engine.

A panel is an ordered list of waves.  Each wave records which actors are
present, where they sit in the latent social space and what their discrete
behaviors are.  All types are immutable once built.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Hashable, Iterable, Mapping, Sequence

import numpy as np

ATTRACTION = "attraction"
REPULSION = "repulsion"
MODES = (ATTRACTION, REPULSION)


class SteppError(Exception):
    """Base class for all errors raised by the package."""


class ConfigError(SteppError, ValueError):
    """Invalid configuration or parameter values."""


class ModelError(SteppError):
    """The model cannot be evaluated on the given data (degenerate ETD, bad panel)."""


def _freeze_map(m: Mapping) -> Mapping:
    return MappingProxyType(dict(m))


@dataclass(frozen=True)
class ModelConfig:
    """Structural settings of a STEPP model.

    ``supports`` lists the admissible values of each covariate.  The two mode
    tuples pick attraction or repulsion per covariate for the homophilous and
    heterophilous forces respectively.
    """

    d: int
    q: int
    supports: tuple[tuple[Hashable, ...], ...]
    k: int = 5
    c: float = 1.0
    homophily_mode: tuple[str, ...] = ()
    heterophily_mode: tuple[str, ...] = ()

    def __post_init__(self):
        supports = tuple(tuple(s) for s in self.supports)
        object.__setattr__(self, "supports", supports)
        if not self.homophily_mode:
            object.__setattr__(self, "homophily_mode", (ATTRACTION,) * self.q)
        if not self.heterophily_mode:
            object.__setattr__(self, "heterophily_mode", (REPULSION,) * self.q)
        object.__setattr__(self, "homophily_mode", tuple(self.homophily_mode))
        object.__setattr__(self, "heterophily_mode", tuple(self.heterophily_mode))

        if int(self.d) != self.d or self.d < 1:
            raise ConfigError(f"d must be a positive integer, got {self.d!r}")
        if int(self.q) != self.q or self.q < 0:
            raise ConfigError(f"q must be a nonnegative integer, got {self.q!r}")
        if int(self.k) != self.k or self.k < 1:
            raise ConfigError(f"k must be a positive integer, got {self.k!r}")
        if not (0.0 < self.c <= 1.0):
            raise ConfigError(f"c must lie in (0, 1], got {self.c!r}")
        if len(supports) != self.q:
            raise ConfigError(f"supports has {len(supports)} columns, expected q={self.q}")
        for m, s in enumerate(supports):
            if len(s) < 1:
                raise ConfigError(f"supports[{m}] is empty")
            if len(set(s)) != len(s):
                raise ConfigError(f"supports[{m}] has repeated values")
        for name, modes in (("homophily_mode", self.homophily_mode),
                            ("heterophily_mode", self.heterophily_mode)):
            if len(modes) != self.q:
                raise ConfigError(f"{name} needs one entry per covariate")
            bad = [x for x in modes if x not in MODES]
            if bad:
                raise ConfigError(f"{name} entries must be one of {MODES}, got {bad}")

    def code_of(self, m: int, value: Hashable) -> int:
        try:
            return self.supports[m].index(value)
        except ValueError:
            raise ConfigError(
                f"value {value!r} is not in the support of covariate {m}: {self.supports[m]}"
            ) from None

    def candidates(self) -> list[tuple[int, ...]]:
        """Every covariate vector in the product support, as value codes."""
        return list(itertools.product(*(range(len(s)) for s in self.supports)))

    def force_names(self) -> list[str]:
        """Names of the spatial coefficients in canonical order."""
        names = ["delta0", "delta1"]
        for m, mode in enumerate(self.homophily_mode):
            names.append(f"alpha{'_tilde' if mode == REPULSION else ''}_{m + 1}")
        for m, mode in enumerate(self.heterophily_mode):
            names.append(f"upsilon{'_tilde' if mode == REPULSION else ''}_{m + 1}")
        return names

    def param_names(self) -> list[str]:
        """Names of the non-migration parameters in canonical order."""
        return self.force_names() + [f"rho_{m + 1}" for m in range(self.q)]


@dataclass(frozen=True)
class MigrationParams:
    """Binomial emigration / Poisson immigration.

    Entrants are placed around the survivor centroid with an isotropic
    normal spread and receive covariates drawn from per-column pmfs.
    """

    emigration_prob: float = 0.0
    immigration_rate: float = 0.0
    immigrant_position_spread: float = 1.0
    immigrant_covariate_probs: tuple[tuple[float, ...], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "immigrant_covariate_probs",
                           tuple(tuple(float(p) for p in col) for col in self.immigrant_covariate_probs))
        if not (0.0 <= self.emigration_prob <= 1.0):
            raise ConfigError(f"emigration_prob must lie in [0, 1], got {self.emigration_prob!r}")
        if not (self.immigration_rate >= 0.0):
            raise ConfigError(f"immigration_rate must be >= 0, got {self.immigration_rate!r}")
        if not (self.immigrant_position_spread >= 0.0):
            raise ConfigError("immigrant_position_spread must be >= 0")
        for m, col in enumerate(self.immigrant_covariate_probs):
            if any(p < 0 for p in col) or abs(sum(col) - 1.0) > 1e-9:
                raise ConfigError(f"immigrant_covariate_probs[{m}] is not a pmf: {col}")

    def covariate_probs_for(self, cfg: ModelConfig) -> tuple[tuple[float, ...], ...]:
        if not self.immigrant_covariate_probs:
            return tuple(tuple([1.0 / len(s)] * len(s)) for s in cfg.supports)
        if len(self.immigrant_covariate_probs) != cfg.q or any(
            len(p) != len(s) for p, s in zip(self.immigrant_covariate_probs, cfg.supports)
        ):
            raise ConfigError("immigrant_covariate_probs does not match the covariate supports")
        return self.immigrant_covariate_probs


@dataclass(frozen=True)
class ParamVector:
    """Model parameters.

    ``homo`` and ``hetero`` hold the homophilous and heterophilous force
    coefficients; whether each acts as attraction or repulsion is decided by
    the :class:`ModelConfig` modes.
    """

    delta0: float
    delta1: float = 0.0
    rho: tuple[float, ...] = ()
    homo: tuple[float, ...] = ()
    hetero: tuple[float, ...] = ()
    migration: MigrationParams = field(default_factory=MigrationParams)

    def __post_init__(self):
        for name in ("rho", "homo", "hetero"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        object.__setattr__(self, "delta0", float(self.delta0))
        object.__setattr__(self, "delta1", float(self.delta1))
        if not (len(self.rho) == len(self.homo) == len(self.hetero)):
            raise ConfigError("rho, homo and hetero must have one entry per covariate")
        forces = (self.delta0, self.delta1) + self.homo + self.hetero
        if any(not (f >= 0.0) or math.isinf(f) for f in forces):
            raise ConfigError(f"force coefficients must be finite and >= 0, got {forces}")
        if any(not (0.0 <= r <= 1.0) for r in self.rho):
            raise ConfigError(f"persistence probabilities must lie in [0, 1], got {self.rho}")

    @property
    def q(self) -> int:
        return len(self.rho)

    def forces(self) -> np.ndarray:
        """Spatial coefficients ordered (delta0, delta1, homo..., hetero...)."""
        return np.array((self.delta0, self.delta1) + self.homo + self.hetero, dtype=float)

    def to_array(self) -> np.ndarray:
        """Non-migration parameters in ``ModelConfig.param_names`` order."""
        return np.concatenate([self.forces(), np.asarray(self.rho, dtype=float)])

    @classmethod
    def from_array(cls, values: Sequence[float], q: int,
                   migration: MigrationParams | None = None) -> "ParamVector":
        v = [float(x) for x in values]
        if len(v) != 2 + 3 * q:
            raise ConfigError(f"expected {2 + 3 * q} values for q={q}, got {len(v)}")
        return cls(
            delta0=v[0],
            delta1=v[1],
            homo=tuple(v[2:2 + q]),
            hetero=tuple(v[2 + q:2 + 2 * q]),
            rho=tuple(v[2 + 2 * q:]),
            migration=migration if migration is not None else MigrationParams(),
        )

    def check(self, cfg: ModelConfig) -> None:
        if self.q != cfg.q:
            raise ConfigError(f"parameter vector has q={self.q}, model config has q={cfg.q}")

    def as_dict(self, cfg: ModelConfig) -> dict[str, float]:
        return dict(zip(cfg.param_names(), self.to_array().tolist()))


@dataclass(frozen=True)
class WaveState:
    """One time slice of the process.

    ``positions`` and ``covariates`` are keyed by actor id.  No consistency
    checks are made here; use :func:`validate_panel` to find problems.
    """

    t: int
    actors: frozenset[str]
    positions: Mapping[str, tuple[float, ...]]
    covariates: Mapping[str, tuple[Hashable, ...]]

    def __post_init__(self):
        object.__setattr__(self, "actors", frozenset(self.actors))
        object.__setattr__(self, "positions", _freeze_map(
            {a: tuple(float(x) for x in z) for a, z in self.positions.items()}))
        object.__setattr__(self, "covariates", _freeze_map(
            {a: tuple(x) for a, x in self.covariates.items()}))

    def __reduce__(self):
        # mapping proxies do not pickle; rebuild from plain dicts
        return (type(self), (self.t, self.actors, dict(self.positions), dict(self.covariates)))

    @classmethod
    def from_arrays(cls, t: int, ids: Sequence[str], Z, X) -> "WaveState":
        Z = np.asarray(Z, dtype=float)
        return cls(
            t=t,
            actors=frozenset(ids),
            positions={a: tuple(Z[i]) for i, a in enumerate(ids)},
            covariates={a: tuple(X[i]) for i, a in enumerate(ids)},
        )

    @property
    def ids(self) -> list[str]:
        """Actor ids in sorted order; every array view uses this order."""
        return sorted(self.actors)

    def position_matrix(self, ids: Sequence[str] | None = None) -> np.ndarray:
        ids = self.ids if ids is None else ids
        if not ids:
            return np.zeros((0, self._dim()))
        return np.array([self.positions[a] for a in ids], dtype=float)

    def covariate_codes(self, cfg: ModelConfig, ids: Sequence[str] | None = None) -> np.ndarray:
        ids = self.ids if ids is None else ids
        out = np.empty((len(ids), cfg.q), dtype=np.int64)
        for i, a in enumerate(ids):
            x = self.covariates[a]
            for m in range(cfg.q):
                out[i, m] = cfg.code_of(m, x[m])
        return out

    def _dim(self) -> int:
        for z in self.positions.values():
            return len(z)
        return 0

    def __eq__(self, other):
        if not isinstance(other, WaveState):
            return NotImplemented
        return (self.t == other.t and self.actors == other.actors
                and dict(self.positions) == dict(other.positions)
                and dict(self.covariates) == dict(other.covariates))

    def __hash__(self):
        return hash((self.t, self.actors))


@dataclass(frozen=True)
class Panel:
    waves: tuple[WaveState, ...]
    config: ModelConfig

    def __post_init__(self):
        object.__setattr__(self, "waves", tuple(self.waves))

    @property
    def n_transitions(self) -> int:
        return max(len(self.waves) - 1, 0)

    def transitions(self) -> Iterable[tuple[WaveState, WaveState]]:
        return zip(self.waves[:-1], self.waves[1:])


@dataclass(frozen=True)
class Violation:
    wave: int | None
    actor: str | None
    rule: str
    detail: str = ""

    def __str__(self):
        where = []
        if self.wave is not None:
            where.append(f"wave {self.wave}")
        if self.actor is not None:
            where.append(f"actor {self.actor!r}")
        loc = ", ".join(where) or "panel"
        return f"{loc}: {self.rule}" + (f" ({self.detail})" if self.detail else "")


def validate_panel(panel: Panel) -> list[Violation]:
    """Check every wave and panel invariant; one violation per breach."""
    cfg = panel.config
    out: list[Violation] = []
    prev_t = None
    for w, wave in enumerate(panel.waves):
        if not isinstance(wave.t, (int, np.integer)) or wave.t < 0:
            out.append(Violation(w, None, "bad time index", f"t={wave.t!r}"))
        elif prev_t is not None and wave.t <= prev_t:
            out.append(Violation(w, None, "time not increasing", f"t={wave.t} after t={prev_t}"))
        else:
            prev_t = wave.t

        for a in sorted(set(wave.positions) - wave.actors):
            out.append(Violation(w, a, "orphan position"))
        for a in sorted(set(wave.covariates) - wave.actors):
            out.append(Violation(w, a, "orphan covariates"))
        for a in sorted(wave.actors - set(wave.positions)):
            out.append(Violation(w, a, "missing position"))
        for a in sorted(wave.actors - set(wave.covariates)):
            out.append(Violation(w, a, "missing covariates"))

        dims = {len(z) for z in wave.positions.values()}
        if dims and dims != {cfg.d}:
            out.append(Violation(w, None, "dimension mismatch",
                                 f"wave has d={sorted(dims)}, config d={cfg.d}"))
        for a in sorted(wave.positions):
            z = wave.positions[a]
            if len(z) == cfg.d and not all(math.isfinite(v) for v in z):
                out.append(Violation(w, a, "non-finite position"))

        for a in sorted(wave.covariates):
            x = wave.covariates[a]
            if len(x) != cfg.q:
                out.append(Violation(w, a, "covariate count mismatch",
                                     f"got {len(x)}, config q={cfg.q}"))
                continue
            for m, v in enumerate(x):
                if v not in cfg.supports[m]:
                    out.append(Violation(w, a, "covariate out of support",
                                         f"column {m} value {v!r}"))
    return out


def check_panel(panel: Panel) -> None:
    """Raise :class:`ModelError` listing violations, if any."""
    problems = validate_panel(panel)
    if problems:
        head = "; ".join(str(p) for p in problems[:5])
        more = f" (+{len(problems) - 5} more)" if len(problems) > 5 else ""
        raise ModelError(f"invalid panel: {head}{more}")


def null_params(cfg: ModelConfig, delta0: float = 1.0, rho: float = 0.5) -> ParamVector:
    """Basic drift only, coin-flip persistence."""
    return ParamVector(delta0=delta0, delta1=0.0, rho=(rho,) * cfg.q,
                       homo=(0.0,) * cfg.q, hetero=(0.0,) * cfg.q)


def config_dict(cfg: ModelConfig) -> dict[str, Any]:
    return {
        "d": cfg.d, "q": cfg.q, "supports": [list(s) for s in cfg.supports],
        "k": cfg.k, "c": cfg.c,
        "homophily": list(cfg.homophily_mode), "heterophily": list(cfg.heterophily_mode),
    }
