"""Trajectory simulation and intervention scenarios."""
from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from .core import (ConfigError, MigrationParams, ModelConfig, ModelError, Panel,
                   ParamVector, WaveState)
from .etd import WaveKernel
from .geometry import neighbor_mask, pairwise_sq

log = logging.getLogger(__name__)


def _key_word(key) -> int:
    if isinstance(key, (int, np.integer)) and key >= 0:
        return int(key)
    digest = hashlib.blake2b(repr(key).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class RandomStreams:
    """Keyed random streams derived from one root seed.

    Every draw in a simulation comes from a generator keyed by what it is for
    (replicate, time, actor id, ...), so results do not depend on the order in
    which actors or replicates are processed.
    """

    seed: int
    replicate: int = 0

    def __post_init__(self):
        if int(self.seed) != self.seed or self.seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {self.seed!r}")

    def generator(self, *keys) -> np.random.Generator:
        words = [int(self.seed), _key_word(self.replicate)] + [_key_word(k) for k in keys]
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))

    def for_replicate(self, r: int) -> "RandomStreams":
        return RandomStreams(self.seed, r)


def _streams(rng) -> RandomStreams:
    if isinstance(rng, RandomStreams):
        return rng
    return RandomStreams(int(rng))


def _fresh_id(t: int, j: int, taken) -> str:
    base = f"t{t}-im{j}"
    name, bump = base, 0
    while name in taken:
        bump += 1
        name = f"{base}.{bump}"
    return name


def migration_step(prev: WaveState, mp: MigrationParams, rng, cfg: ModelConfig | None = None):
    """Draw survivors and entrants for the transition out of ``prev``.

    Uses only actor ids and the survivor centroid, never covariates, so the
    survival draws are independent of behavior.  Returns ``(survivors,
    immigrants)`` with immigrants as ``(id, position, covariates)`` tuples.
    """
    gen = _streams(rng).generator("migration", prev.t)
    ids = prev.ids
    u = gen.random(len(ids))
    survivors = frozenset(a for a, ui in zip(ids, u) if ui >= mp.emigration_prob)
    n_new = int(gen.poisson(mp.immigration_rate)) if mp.immigration_rate > 0 else 0
    if n_new == 0:
        return survivors, []
    if cfg is None:
        raise ConfigError("a model config is needed to draw immigrant covariates")

    anchor = sorted(survivors) or ids
    if anchor:
        centre = np.mean([prev.positions[a] for a in anchor], axis=0)
    else:
        centre = np.zeros(cfg.d)
    probs = mp.covariate_probs_for(cfg)
    taken = set(prev.actors)
    immigrants = []
    for j in range(n_new):
        z = centre + mp.immigrant_position_spread * gen.standard_normal(cfg.d)
        x = tuple(cfg.supports[m][gen.choice(len(p), p=p)] for m, p in enumerate(probs))
        new_id = _fresh_id(prev.t + 1, j, taken)
        taken.add(new_id)
        immigrants.append((new_id, tuple(float(v) for v in z), x))
    return survivors, immigrants


def sample_transition(prev: WaveState, theta: ParamVector, cfg: ModelConfig, rng) -> WaveState:
    """One step of the process: migration, then covariates, then positions."""
    theta.check(cfg)
    if not theta.delta0 > 0:
        raise ModelError("simulation needs delta0 > 0 for a proper ETD")
    streams = _streams(rng)
    survivors, immigrants = migration_step(prev, theta.migration, streams, cfg)

    positions, covariates = {}, {}
    if survivors:
        kernel = WaveKernel(prev, cfg)
        log_pmf = kernel.log_pmf(theta)
        wstar, mean, _ = kernel.gaussian(theta.forces())
        for a in sorted(survivors):
            i = kernel.index[a]
            gen = streams.generator("actor", prev.t, a)
            cdf = np.cumsum(np.exp(log_pmf[i]))
            c = min(int(np.searchsorted(cdf, gen.random() * cdf[-1], side="right")), len(cdf) - 1)
            codes = kernel.candidates[c]
            sd = 1.0 / math.sqrt(2.0 * wstar[i, c])
            z = kernel.Z[i] + mean[i, c] + sd * gen.standard_normal(cfg.d)
            positions[a] = tuple(z)
            covariates[a] = tuple(cfg.supports[m][v] for m, v in enumerate(codes))
    for a, z, x in immigrants:
        positions[a] = z
        covariates[a] = x
    return WaveState(prev.t + 1, frozenset(positions), positions, covariates)


def simulate_trajectory(seed_wave: WaveState, theta: ParamVector, cfg: ModelConfig,
                        horizon: int, rng) -> Panel:
    """Simulate ``horizon`` transitions starting from a fixed seed wave."""
    if horizon < 1:
        raise ConfigError(f"horizon must be >= 1, got {horizon}")
    streams = _streams(rng)
    waves = [seed_wave]
    for _ in range(horizon):
        waves.append(sample_transition(waves[-1], theta, cfg, streams))
    return Panel(tuple(waves), cfg)


def random_seed_wave(cfg: ModelConfig, n_actors: int, rng, position_sd: float = 1.0,
                     covariate_probs: Sequence[Sequence[float]] | None = None, t: int = 0) -> WaveState:
    """Initial wave with normal positions and independent categorical covariates."""
    gen = _streams(rng).generator("seed-wave")
    if covariate_probs is None:
        covariate_probs = [[1.0 / len(s)] * len(s) for s in cfg.supports]
    ids = [f"a{i:0{len(str(max(n_actors - 1, 0)))}d}" for i in range(n_actors)]
    Z = position_sd * gen.standard_normal((n_actors, cfg.d))
    X = [tuple(cfg.supports[m][gen.choice(len(p), p=np.asarray(p, dtype=float))]
               for m, p in enumerate(covariate_probs)) for _ in range(n_actors)]
    return WaveState.from_arrays(t, ids, Z, X)


# --- intervention scenarios -------------------------------------------------

@dataclass(frozen=True)
class Selector:
    """Which actors an intervention targets.

    ``kind`` is ``all``, ``ids`` or ``match`` (actors whose covariate
    ``covariate`` currently equals ``value``).  ``limit`` keeps at most that
    many of the matched actors, either at random or the most ``central``
    ones (most often among other actors' k nearest neighbors).
    """

    kind: str = "all"
    ids: tuple[str, ...] = ()
    covariate: int | None = None
    value: Hashable = None
    limit: int | None = None
    rank: str = "random"

    def __post_init__(self):
        if self.kind not in ("all", "ids", "match"):
            raise ConfigError(f"unknown selector kind {self.kind!r}")
        if self.rank not in ("random", "central"):
            raise ConfigError(f"unknown selector rank {self.rank!r}")
        if self.kind == "match" and self.covariate is None:
            raise ConfigError("match selector needs a covariate index")
        object.__setattr__(self, "ids", tuple(self.ids))

    def select(self, wave: WaveState, cfg: ModelConfig, gen: np.random.Generator) -> list[str]:
        if self.kind == "all":
            chosen = wave.ids
        elif self.kind == "ids":
            chosen = [a for a in self.ids if a in wave.actors]
        else:
            chosen = [a for a in wave.ids if wave.covariates[a][self.covariate] == self.value]
        if self.limit is None or len(chosen) <= self.limit:
            return list(chosen)
        if self.rank == "random":
            picked = gen.choice(len(chosen), size=self.limit, replace=False)
            return sorted(chosen[i] for i in picked)
        score = _centrality(wave, cfg)
        return sorted(sorted(chosen, key=lambda a: (-score[a], a))[:self.limit])


def _centrality(wave: WaveState, cfg: ModelConfig) -> dict[str, int]:
    ids = wave.ids
    sq = pairwise_sq(wave.position_matrix(ids))
    counts = np.zeros(len(ids), dtype=int)
    for i in range(len(ids)):
        pool = np.ones(len(ids), dtype=bool)
        pool[i] = False
        counts += neighbor_mask(sq[i], pool, cfg.k)
    return dict(zip(ids, counts.tolist()))


@dataclass(frozen=True)
class Intervention:
    time: int
    covariate: int
    value: Hashable
    success_prob: float = 1.0
    selector: Selector = field(default_factory=Selector)

    def __post_init__(self):
        if not (0.0 <= self.success_prob <= 1.0):
            raise ConfigError(f"success_prob must lie in [0, 1], got {self.success_prob}")


@dataclass(frozen=True)
class Scenario:
    base: WaveState
    theta: ParamVector
    cfg: ModelConfig
    horizon: int
    replicates: int = 1
    interventions: tuple[Intervention, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "interventions", tuple(self.interventions))
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        for k, iv in enumerate(self.interventions):
            if not (0 <= iv.covariate < self.cfg.q):
                raise ConfigError(f"interventions[{k}].covariate out of range")
            if iv.value not in self.cfg.supports[iv.covariate]:
                raise ConfigError(f"interventions[{k}].value {iv.value!r} not in support")
            if not (self.base.t <= iv.time <= self.base.t + self.horizon):
                raise ConfigError(f"interventions[{k}].time outside the simulated waves")


def apply_intervention(wave: WaveState, iv: Intervention, cfg: ModelConfig, streams: RandomStreams,
                       tag) -> tuple[WaveState, list[str], list[str]]:
    """Force covariate values on selected actors; returns (wave, selected, changed)."""
    gen = streams.generator("intervention", tag, wave.t)
    selected = iv.selector.select(wave, cfg, gen)
    u = gen.random(len(selected))
    covariates = dict(wave.covariates)
    changed = []
    for a, ui in zip(selected, u):
        if ui < iv.success_prob:
            x = list(covariates[a])
            x[iv.covariate] = iv.value
            covariates[a] = tuple(x)
            changed.append(a)
    return WaveState(wave.t, wave.actors, wave.positions, covariates), selected, changed


def prevalence(wave: WaveState, cfg: ModelConfig) -> np.ndarray:
    """Fraction of present actors holding each covariate value, flattened per (m, value)."""
    out = []
    n = len(wave.actors)
    for m, s in enumerate(cfg.supports):
        for v in s:
            hits = sum(1 for a in wave.actors if wave.covariates[a][m] == v)
            out.append(hits / n if n else float("nan"))
    return np.array(out)


def _run_arm(s: Scenario, streams: RandomStreams, intervene: bool):
    waves = [s.base]
    warnings = []
    wave = s.base
    for step in range(s.horizon + 1):
        if intervene:
            for k, iv in enumerate(s.interventions):
                if iv.time == wave.t:
                    wave, selected, _ = apply_intervention(wave, iv, s.cfg, streams, k)
                    if not selected:
                        warnings.append(f"intervention {k} at t={wave.t} matched no actors")
            waves[-1] = wave
        if step == s.horizon:
            break
        wave = sample_transition(wave, s.theta, s.cfg, streams)
        waves.append(wave)
    return np.array([prevalence(w, s.cfg) for w in waves]), warnings


def _run_replicate(args):
    s, seed, r = args
    streams = RandomStreams(seed, r)
    control, _ = _run_arm(s, streams, intervene=False)
    treated, warnings = _run_arm(s, streams, intervene=True)
    return control, treated, warnings


@dataclass
class ScenarioReport:
    times: list[int]
    columns: list[tuple[int, Hashable]]
    control: np.ndarray       # (replicates, waves, columns)
    intervention: np.ndarray
    warnings: list[str]

    @staticmethod
    def _summary(a: np.ndarray):
        mean = a.mean(axis=0)
        sd = a.std(axis=0, ddof=1) if a.shape[0] > 1 else None
        return mean, sd

    def rows(self) -> list[dict]:
        cm, csd = self._summary(self.control)
        im, isd = self._summary(self.intervention)
        out = []
        for w, t in enumerate(self.times):
            for j, (m, v) in enumerate(self.columns):
                out.append({
                    "wave": t, "covariate": m + 1, "value": v,
                    "control_mean": float(cm[w, j]),
                    "control_sd": None if csd is None else float(csd[w, j]),
                    "intervention_mean": float(im[w, j]),
                    "intervention_sd": None if isd is None else float(isd[w, j]),
                })
        return out


def run_scenario(s: Scenario, rng, threads: int = 1) -> ScenarioReport:
    """Simulate control and intervention arms on common random numbers."""
    streams = _streams(rng)
    jobs = [(s, streams.seed, r) for r in range(s.replicates)]
    if threads > 1 and s.replicates > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_replicate, jobs))
    else:
        results = [_run_replicate(j) for j in jobs]
    warnings = sorted({w for _, _, ws in results for w in ws})
    for w in warnings:
        log.warning(w)
    return ScenarioReport(
        times=[s.base.t + h for h in range(s.horizon + 1)],
        columns=[(m, v) for m, sup in enumerate(s.cfg.supports) for v in sup],
        control=np.stack([c for c, _, _ in results]),
        intervention=np.stack([t for _, t, _ in results]),
        warnings=warnings,
    )
