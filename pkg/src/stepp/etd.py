"""Ego transition distributions (ETDs).

Every force in the model contributes terms ``w * |z - target|^2`` to the
exponent of an ego's next-position density.  A nonnegative combination of
squared distances is an isotropic Gaussian in ``z`` up to a constant, so the
conditional position law is normal and the covariate marginal follows by
integrating the exponent in closed form.

Two routes are provided.  :func:`assemble_terms`, :func:`gaussian_from_terms`,
:func:`covariate_marginal` and :func:`ego_log_density` build explicit term
lists one ego at a time.  :class:`WaveKernel` precomputes per-force sufficient
statistics for every ego of a wave once; after that, evaluating any parameter
vector is a handful of array operations.  Simulation and likelihood use the
kernel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np
from scipy.special import logsumexp

from .core import REPULSION, ModelConfig, ModelError, ParamVector, WaveState
from .geometry import atomic_weight, atomic_weights, neighbor_mask, neighbor_set, pairwise_sq

BASIC = "basic"
ATOMIC = "atomic"


@dataclass(frozen=True)
class Term:
    weight: float
    target: tuple[float, ...]
    source: str


@dataclass(frozen=True)
class GaussianETD:
    mean: np.ndarray
    variance: float
    total_weight: float
    log_offset: float

    @property
    def d(self) -> int:
        return len(self.mean)

    @property
    def log_integral(self) -> float:
        """log of the integral of the raw exponent over R^d."""
        return -self.log_offset + 0.5 * self.d * math.log(math.pi / self.total_weight)

    def log_pdf(self, z) -> float:
        diff = np.asarray(z, dtype=float) - self.mean
        return 0.5 * self.d * math.log(self.total_weight / math.pi) - self.total_weight * float(diff @ diff)


@dataclass(frozen=True)
class CovariatePMF:
    support: tuple[tuple[Hashable, ...], ...]
    probs: np.ndarray

    def prob(self, x) -> float:
        return float(self.probs[self.support.index(tuple(x))])


def _source_tag(kind: str, m: int) -> str:
    return f"{kind}_{m + 1}"


def _prev_arrays(ego: str, prev: WaveState, cfg: ModelConfig):
    if ego not in prev.actors:
        raise ModelError(f"actor {ego!r} is not present at t={prev.t}; no ETD is defined")
    z = np.asarray(prev.positions[ego], dtype=float)
    if z.shape != (cfg.d,):
        raise ModelError(f"actor {ego!r} has a position of dimension {z.shape}, expected {cfg.d}")
    return z


def assemble_terms(ego: str, candidate_x: Sequence[Hashable], prev: WaveState,
                   theta: ParamVector, cfg: ModelConfig) -> list[Term]:
    """All weight/target pairs in the ego's exponent for a candidate covariate vector."""
    theta.check(cfg)
    zi = _prev_arrays(ego, prev, cfg)
    if len(candidate_x) != cfg.q:
        raise ModelError(f"candidate covariate vector has length {len(candidate_x)}, expected {cfg.q}")
    for m, v in enumerate(candidate_x):
        cfg.code_of(m, v)

    terms = []
    if theta.delta0 > 0:
        terms.append(Term(theta.delta0, tuple(zi), BASIC))

    others = {j: prev.positions[j] for j in sorted(prev.actors) if j != ego}

    def add(coef, pool, source, repel):
        if coef <= 0:
            return
        for j in sorted(neighbor_set(zi, pool, cfg.k).members):
            zj = np.asarray(pool[j], dtype=float)
            w = coef * atomic_weight(zi, zj, cfg.c)
            target = 2.0 * zi - zj if repel else zj
            terms.append(Term(w, tuple(target), source))

    add(theta.delta1, others, ATOMIC, False)
    for m in range(cfg.q):
        xm = candidate_x[m]
        same = {j: z for j, z in others.items() if prev.covariates[j][m] == xm}
        diff = {j: z for j, z in others.items() if prev.covariates[j][m] != xm}
        add(theta.homo[m], same, _source_tag("homo", m), cfg.homophily_mode[m] == REPULSION)
        add(theta.hetero[m], diff, _source_tag("hetero", m), cfg.heterophily_mode[m] == REPULSION)
    return terms


def gaussian_from_terms(terms: Sequence[Term]) -> GaussianETD:
    """Collapse ``sum_j w_j |z - mu_j|^2`` into one isotropic Gaussian."""
    if not terms:
        raise ModelError("no active terms: the ETD is improper (need delta0 > 0)")
    w = np.array([t.weight for t in terms], dtype=float)
    mu = np.array([t.target for t in terms], dtype=float)
    if np.any(w < 0):
        raise ModelError("negative term weight")
    wstar = float(w.sum())
    if not wstar > 0:
        raise ModelError("zero total weight: the ETD is improper (need delta0 > 0)")
    mean = (w @ mu) / wstar
    # sum w|mu|^2 - |sum w mu|^2 / w*, written as a weighted spread about the mean
    dev = mu - mean
    c0 = float(w @ np.einsum("ij,ij->i", dev, dev))
    return GaussianETD(mean=mean, variance=1.0 / (2.0 * wstar), total_weight=wstar, log_offset=c0)


def log_persistence(x_codes, prev_codes, rho: Sequence[float], cfg: ModelConfig) -> float:
    """log of the behavior-persistence factor.

    A changed value shares ``1 - rho_m`` uniformly among the other support values.
    """
    total = 0.0
    for m in range(cfg.q):
        if x_codes[m] == prev_codes[m]:
            p = rho[m]
        else:
            p = (1.0 - rho[m]) / max(len(cfg.supports[m]) - 1, 1)
        total += math.log(p) if p > 0 else -math.inf
    return total


def covariate_marginal(ego: str, prev: WaveState, theta: ParamVector,
                       cfg: ModelConfig) -> CovariatePMF:
    """Marginal pmf of the ego's next covariate vector over the product support."""
    _prev_arrays(ego, prev, cfg)
    prev_codes = [cfg.code_of(m, v) for m, v in enumerate(prev.covariates[ego])]
    support = []
    log_mass = []
    for codes in cfg.candidates():
        x = tuple(cfg.supports[m][c] for m, c in enumerate(codes))
        support.append(x)
        lp = log_persistence(codes, prev_codes, theta.rho, cfg)
        if lp == -math.inf:
            log_mass.append(-math.inf)
            continue
        g = gaussian_from_terms(assemble_terms(ego, x, prev, theta, cfg))
        log_mass.append(lp + g.log_integral)
    log_mass = np.array(log_mass)
    if not np.isfinite(log_mass).any():
        raise ModelError(f"every covariate value has zero mass for actor {ego!r}")
    probs = np.exp(log_mass - logsumexp(log_mass))
    return CovariatePMF(tuple(support), probs)


def ego_log_density(z_t, x_t, ego: str, prev: WaveState, theta: ParamVector,
                    cfg: ModelConfig) -> float:
    """log P(z_t, x_t | previous wave) for one persistent actor."""
    pmf = covariate_marginal(ego, prev, theta, cfg)
    p = pmf.prob(x_t)
    if p <= 0:
        return -math.inf
    g = gaussian_from_terms(assemble_terms(ego, tuple(x_t), prev, theta, cfg))
    return math.log(p) + g.log_pdf(z_t)


class WaveKernel:
    """Precomputed ETD statistics for every actor of one wave.

    For ego ``i``, candidate covariate vector ``c`` and force ``s`` the kernel
    stores the summed neighbor weight ``W``, the weighted target sum ``M`` and
    the weighted squared target norm ``Q``.  Targets are taken relative to the
    ego's own position, which keeps the quadratic forms well conditioned.
    Neighbor sets and atomic weights do not depend on the parameters, so the
    ETD for any parameter vector is linear algebra on these arrays.

    Force order is (basic, atomic, homo_1..q, hetero_1..q), matching
    :meth:`ParamVector.forces`.
    """

    def __init__(self, prev: WaveState, cfg: ModelConfig):
        self.cfg = cfg
        self.t = prev.t
        self.ids = prev.ids
        self.index = {a: i for i, a in enumerate(self.ids)}
        Z = prev.position_matrix(self.ids) if self.ids else np.zeros((0, cfg.d))
        X = prev.covariate_codes(cfg, self.ids)
        self.Z = Z
        self.X = X
        self.candidates = np.array(cfg.candidates(), dtype=np.int64).reshape(-1, cfg.q)

        n, d, q = len(self.ids), cfg.d, cfg.q
        C = len(self.candidates)
        S = 2 + 2 * q
        self.W = np.zeros((n, C, S))
        self.M = np.zeros((n, C, S, d))
        self.Q = np.zeros((n, C, S))
        self.W[:, :, 0] = 1.0  # basic drift: weight 1 on the ego's own position

        sq = pairwise_sq(Z)
        same_pos = np.all(Z[:, None, :] == Z[None, :, :], axis=-1)
        weights = atomic_weights(sq, cfg.c, same=same_pos)
        for i in range(n):
            others = np.ones(n, dtype=bool)
            others[i] = False
            rel = Z - Z[i]
            rel_sq = sq[i]

            def stats(pool, repel):
                nb = neighbor_mask(sq[i], pool, cfg.k)
                w = weights[i, nb]
                tgt = -rel[nb] if repel else rel[nb]
                return w.sum(), w @ tgt if len(w) else np.zeros(d), w @ rel_sq[nb]

            Wa, Ma, Qa = stats(others, False)
            self.W[i, :, 1], self.M[i, :, 1], self.Q[i, :, 1] = Wa, Ma, Qa
            for m in range(q):
                homo_rep = cfg.homophily_mode[m] == REPULSION
                het_rep = cfg.heterophily_mode[m] == REPULSION
                for v in range(len(cfg.supports[m])):
                    rows = self.candidates[:, m] == v
                    match = X[:, m] == v
                    Wh, Mh, Qh = stats(others & match, homo_rep)
                    Wu, Mu, Qu = stats(others & ~match, het_rep)
                    self.W[i, rows, 2 + m], self.M[i, rows, 2 + m], self.Q[i, rows, 2 + m] = Wh, Mh, Qh
                    self.W[i, rows, 2 + q + m], self.M[i, rows, 2 + q + m], self.Q[i, rows, 2 + q + m] = Wu, Mu, Qu

        # same[i, c, m]: candidate value equals the ego's previous value
        self.same = self.candidates[None, :, :] == X[:, None, :]
        self.n_other = np.array([max(len(s) - 1, 1) for s in cfg.supports], dtype=float)

    def __len__(self):
        return len(self.ids)

    def log_persistence(self, rho) -> np.ndarray:
        rho = np.asarray(rho, dtype=float)
        with np.errstate(divide="ignore"):
            keep = np.log(rho)
            flip = np.log((1.0 - rho) / self.n_other)
        return np.where(self.same, keep, flip).sum(axis=-1)

    def gaussian(self, forces):
        """Total weight, relative mean and log offset for every (ego, candidate)."""
        forces = np.asarray(forces, dtype=float)
        wstar = self.W @ forces
        if np.any(wstar <= 0):
            raise ModelError("zero total weight: the ETD is improper (need delta0 > 0)")
        msum = np.einsum("ncsd,s->ncd", self.M, forces)
        mean = msum / wstar[..., None]
        c0 = self.Q @ forces - np.einsum("ncd,ncd->nc", msum, mean)
        return wstar, mean, np.maximum(c0, 0.0)

    def log_pmf(self, theta: ParamVector) -> np.ndarray:
        """log covariate marginal, shape (n_actors, n_candidates)."""
        wstar, _, c0 = self.gaussian(theta.forces())
        log_mass = self.log_persistence(theta.rho) - c0 + 0.5 * self.cfg.d * np.log(np.pi / wstar)
        norm = logsumexp(log_mass, axis=1, keepdims=True)
        if not np.all(np.isfinite(norm)):
            raise ModelError("every covariate value has zero mass for some actor")
        return log_mass - norm

    def candidate_index(self, codes) -> int:
        codes = tuple(int(c) for c in codes)
        idx = 0
        for m, c in enumerate(codes):
            idx = idx * len(self.cfg.supports[m]) + c
        return idx
