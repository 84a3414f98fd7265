"""Likelihood, maximum likelihood fitting and fit summaries."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize, stats
from scipy.special import expit, logit

from .core import (ConfigError, MigrationParams, ModelConfig, ModelError, Panel,
                   ParamVector, check_panel, null_params)
from .etd import WaveKernel
from .geometry import neighbor_mask, pairwise_sq

log = logging.getLogger(__name__)

DELTA0_FLOOR = 1e-8
BOUNDARY_SMALL = 1e-3   # a force below this is tested against its zero bound
RHO_EDGE = 1e-6


class PanelLikelihood:
    """Log-likelihood of a panel as a fast function of the parameters.

    Only actors present on both sides of a transition contribute; entrants
    have no previous state to condition on.  All neighbor sets and weights
    are computed once here.
    """

    def __init__(self, panel: Panel, cfg: ModelConfig | None = None):
        cfg = panel.config if cfg is None else cfg
        if len(panel.waves) < 2:
            raise ConfigError("need at least two waves")
        check_panel(Panel(panel.waves, cfg))
        self.cfg = cfg
        self.panel = panel
        W, M, Q, same, obs, zrel, keys = [], [], [], [], [], [], []
        self.migration_counts = []
        for prev, cur in panel.transitions():
            stay = sorted(prev.actors & cur.actors)
            self.migration_counts.append((len(prev.actors), len(prev.actors) - len(stay),
                                          len(cur.actors) - len(stay)))
            if not stay:
                continue
            kern = WaveKernel(prev, cfg)
            rows = [kern.index[a] for a in stay]
            W.append(kern.W[rows])
            M.append(kern.M[rows])
            Q.append(kern.Q[rows])
            same.append(kern.same[rows])
            codes = cur.covariate_codes(cfg, stay)
            obs.extend(kern.candidate_index(c) for c in codes)
            zrel.append(cur.position_matrix(stay) - kern.Z[rows])
            keys.extend((cur.t, a) for a in stay)
        if not keys:
            raise ModelError("no actor is present in two consecutive waves")
        self.W = np.concatenate(W)
        self.M = np.concatenate(M)
        self.Q = np.concatenate(Q)
        self.same = np.concatenate(same)
        self.obs = np.array(obs)
        self.zrel = np.concatenate(zrel)
        self.keys = keys
        self.n_other = np.array([max(len(s) - 1, 1) for s in cfg.supports], dtype=float)
        self._rows = np.arange(len(self.obs))

    @property
    def n_pairs(self) -> int:
        return len(self.obs)

    def terms(self, values: np.ndarray) -> np.ndarray:
        """Per-(transition, actor) log densities for a natural-scale parameter array."""
        cfg = self.cfg
        q = cfg.q
        forces = values[:2 + 2 * q]
        rho = values[2 + 2 * q:]
        wstar = self.W @ forces
        if np.any(wstar <= 0):
            raise ModelError("zero total weight: the ETD is improper (need delta0 > 0)")
        msum = np.einsum("ncsd,s->ncd", self.M, forces)
        c0 = np.maximum(self.Q @ forces - np.einsum("ncd,ncd->nc", msum, msum) / wstar, 0.0)
        with np.errstate(divide="ignore"):
            lpers = np.where(self.same, np.log(rho), np.log((1.0 - rho) / self.n_other)).sum(-1)
        half_d = 0.5 * cfg.d
        log_mass = lpers - c0 + half_d * np.log(np.pi / wstar)
        top = log_mass.max(axis=1)
        if not np.all(np.isfinite(top)):
            raise ModelError("every covariate value has zero mass for some actor")
        norm = top + np.log(np.exp(log_mass - top[:, None]).sum(axis=1))

        r, o = self._rows, self.obs
        w_o = wstar[r, o]
        mean_o = msum[r, o] / w_o[:, None]
        diff = self.zrel - mean_o
        log_gauss = half_d * np.log(w_o / np.pi) - w_o * np.einsum("nd,nd->n", diff, diff)
        return log_mass[r, o] - norm + log_gauss

    def __call__(self, theta: ParamVector | np.ndarray) -> float:
        values = theta.to_array() if isinstance(theta, ParamVector) else np.asarray(theta, float)
        return math.fsum(self.terms(values))

    def migration_loglik(self, mp: MigrationParams) -> float:
        """Binomial exits plus Poisson entries over all transitions."""
        total = 0.0
        for n_prev, n_out, n_in in self.migration_counts:
            total += stats.binom.logpmf(n_out, n_prev, mp.emigration_prob)
            total += stats.poisson.logpmf(n_in, mp.immigration_rate)
        return float(total)


def log_likelihood(panel: Panel, theta: ParamVector, cfg: ModelConfig | None = None,
                   include_migration: bool = False) -> float:
    """Panel log-likelihood over persistent actors, optionally plus migration."""
    cfg = panel.config if cfg is None else cfg
    theta.check(cfg)
    lik = PanelLikelihood(panel, cfg)
    value = lik(theta)
    if include_migration:
        value += lik.migration_loglik(theta.migration)
    return value


def fit_migration(panel: Panel, cfg: ModelConfig | None = None) -> MigrationParams:
    """Closed-form MLE of the migration family from entry/exit counts."""
    cfg = panel.config if cfg is None else cfg
    n_prev = n_out = n_in = 0
    spreads, entrant_x = [], []
    for prev, cur in panel.transitions():
        stay = prev.actors & cur.actors
        n_prev += len(prev.actors)
        n_out += len(prev.actors) - len(stay)
        new = sorted(cur.actors - prev.actors)
        n_in += len(new)
        anchor = sorted(stay) or prev.ids
        if new and anchor:
            centre = np.mean([prev.positions[a] for a in anchor], axis=0)
            spreads.extend(((np.asarray(cur.positions[a]) - centre) ** 2).tolist() for a in new)
        entrant_x.extend(cur.covariates[a] for a in new)
    tau = panel.n_transitions
    spread = float(np.sqrt(np.mean(spreads))) if spreads else 1.0
    probs = []
    for m, sup in enumerate(cfg.supports):
        if entrant_x:
            counts = np.array([sum(1 for x in entrant_x if x[m] == v) for v in sup], float)
            probs.append(tuple((counts / counts.sum()).tolist()))
        else:
            probs.append(tuple([1.0 / len(sup)] * len(sup)))
    return MigrationParams(
        emigration_prob=n_out / n_prev if n_prev else 0.0,
        immigration_rate=n_in / tau if tau else 0.0,
        immigrant_position_spread=spread,
        immigrant_covariate_probs=tuple(probs),
    )


# --- maximum likelihood -----------------------------------------------------

@dataclass
class FitResult:
    theta_hat: ParamVector
    log_lik: float
    std_errors: dict[str, float | None]
    se_flags: dict[str, str]
    converged: bool
    iterations: int
    boundary_params: set[str]
    fixed: dict[str, float] = field(default_factory=dict)
    n_pairs: int = 0
    starts: list[dict] = field(default_factory=list)

    def table(self, cfg: ModelConfig, reference: ParamVector | None = None,
              one_sided: bool = False) -> list[dict]:
        """Estimate / SE / nominal-normal p-value rows.

        p-values test each parameter against its value in ``reference``
        (default: basic-drift-only null with coin-flip persistence).
        ``one_sided`` tests the sign-constrained forces against the upper
        alternative; persistence is always two-sided.
        """
        ref = (reference or null_params(cfg)).as_dict(cfg)
        rows = []
        for name, value in self.theta_hat.as_dict(cfg).items():
            se = self.std_errors.get(name)
            if se is None or not se > 0:
                p = None
            else:
                z = (value - ref[name]) / se
                if one_sided and not name.startswith("rho"):
                    p = float(stats.norm.sf(z))
                else:
                    p = float(2 * stats.norm.sf(abs(z)))
            rows.append({"parameter": name, "estimate": value, "std_error": se,
                         "p_value": p, "flag": self.se_flags.get(name)})
        return rows


class _Transform:
    """Map between the natural parameter scale and an unconstrained vector.

    Forces use a log scale (delta0 offset by a small floor), persistence
    probabilities a logit scale.  Fixed parameters are held out.
    """

    def __init__(self, cfg: ModelConfig, fixed: Mapping[str, float]):
        self.names = cfg.param_names()
        self.n_force = 2 + 2 * cfg.q
        unknown = set(fixed) - set(self.names)
        if unknown:
            raise ConfigError(f"unknown fixed parameters: {sorted(unknown)}")
        self.fixed = dict(fixed)
        self.free = [i for i, n in enumerate(self.names) if n not in fixed]
        self.base = np.zeros(len(self.names))
        for i, n in enumerate(self.names):
            if n in fixed:
                self.base[i] = float(fixed[n])

    def to_natural(self, u: np.ndarray) -> np.ndarray:
        v = self.base.copy()
        for j, i in enumerate(self.free):
            if i == 0:
                v[i] = DELTA0_FLOOR + math.exp(min(u[j], 700.0))
            elif i < self.n_force:
                v[i] = math.exp(min(u[j], 700.0))
            else:
                v[i] = float(expit(u[j]))
        return v

    def to_free(self, v: np.ndarray) -> np.ndarray:
        u = np.empty(len(self.free))
        for j, i in enumerate(self.free):
            if i == 0:
                u[j] = math.log(max(v[i] - DELTA0_FLOOR, 1e-300))
            elif i < self.n_force:
                u[j] = math.log(max(v[i], 1e-300))
            else:
                u[j] = float(logit(min(max(v[i], 1e-12), 1 - 1e-12)))
        return u


def _heuristic_start(lik: PanelLikelihood) -> np.ndarray:
    cfg = lik.cfg
    msd = float(np.mean(np.einsum("nd,nd->n", lik.zrel, lik.zrel)))
    wstar = cfg.d / (2.0 * max(msd, 1e-12))
    # split the implied total weight evenly between basic drift and the neighbor forces
    atomic = float(np.mean(lik.W[:, 0, 1])) or 1.0
    v = np.full(len(cfg.param_names()), 0.0)
    v[0] = 0.5 * wstar
    share = 0.5 * wstar / (1 + 2 * cfg.q)
    v[1] = share / atomic
    for s in range(2, 2 + 2 * cfg.q):
        ws = float(np.mean(lik.W[:, :, s])) or 1.0
        v[s] = share / ws
    obs_codes = lik.same[np.arange(lik.n_pairs), lik.obs]
    v[2 + 2 * cfg.q:] = np.clip(obs_codes.mean(axis=0), 0.05, 0.95)
    return v


def _null_start(cfg: ModelConfig) -> np.ndarray:
    v = null_params(cfg).to_array()
    v[1:2 + 2 * cfg.q] = 0.05
    return v


def _minimize(f, u0, max_iter):
    """L-BFGS on the free scale with central-difference gradients."""

    def grad(u):
        g = np.empty_like(u)
        for j in range(len(u)):
            h = 1e-5 * max(1.0, abs(u[j]))
            e = np.zeros_like(u)
            e[j] = h
            g[j] = (f(u + e) - f(u - e)) / (2 * h)
        return g

    return optimize.minimize(f, u0, jac=grad, method="L-BFGS-B",
                             options={"maxiter": max_iter, "ftol": 1e-9, "gtol": 1e-8})


def fit_mle(panel: Panel, cfg: ModelConfig | None = None, init: ParamVector | None = None,
            fixed: Mapping[str, float] | None = None, starts: int = 3, seed: int = 0,
            max_iter: int = 500, fit_migration_params: bool = False,
            compute_se: bool = True) -> FitResult:
    """Maximum likelihood over nonnegative forces and persistence in [0, 1].

    Runs a quasi-Newton ascent from several starts (null-like, data
    heuristic, random perturbation; ``init`` replaces the first) and keeps
    the best.  Forces that end up negligible are tested against their zero
    bound: if the likelihood does not increase away from zero they are set
    to zero and reported in ``boundary_params``.
    """
    cfg = panel.config if cfg is None else cfg
    lik = PanelLikelihood(panel, cfg)
    fixed = dict(fixed or {})
    tr = _Transform(cfg, fixed)
    names = tr.names

    def neg(u):
        try:
            val = lik(tr.to_natural(u))
        except ModelError:
            return 1e300
        return -val if np.isfinite(val) else 1e300

    start_points = [_null_start(cfg) if init is None else init.to_array(), _heuristic_start(lik)]
    gen = np.random.default_rng(seed)
    while len(start_points) < starts:
        base = tr.to_free(start_points[1])
        start_points.append(tr.to_natural(base + gen.normal(0.0, 0.5, size=len(base))))
    start_points = start_points[:max(starts, 1)]

    best, trace = None, []
    for k, v0 in enumerate(start_points):
        v0 = v0.copy()
        v0[[i for i in range(len(names)) if names[i] in fixed]] = [fixed[n] for n in names if n in fixed]
        if not tr.free:
            res = optimize.OptimizeResult(x=np.array([]), fun=neg(np.array([])), success=True, nit=0)
        else:
            res = _minimize(neg, tr.to_free(v0), max_iter)
        trace.append({"start": k, "log_lik": -float(res.fun), "converged": bool(res.success),
                      "iterations": int(res.nit)})
        if best is None or res.fun < best.fun:
            best = res
    theta_vals = tr.to_natural(best.x)
    converged, iterations = bool(best.success), int(best.nit)

    # zero-bound handling for forces
    boundary: set[str] = set()
    while True:
        newly = []
        for i in range(1, 2 + 2 * cfg.q):
            n = names[i]
            if n in fixed or n in boundary or theta_vals[i] >= BOUNDARY_SMALL:
                continue
            at_zero = theta_vals.copy()
            at_zero[i] = 0.0
            h = 1e-6
            bumped = at_zero.copy()
            bumped[i] = h
            if lik(bumped) - lik(at_zero) <= 0.0:
                newly.append(n)
        if not newly:
            break
        boundary.update(newly)
        fixed_b = dict(fixed, **{n: 0.0 for n in boundary})
        tr_b = _Transform(cfg, fixed_b)
        start = theta_vals.copy()
        for n in boundary:
            start[names.index(n)] = 0.0

        def neg_b(u, tr_b=tr_b):
            try:
                val = lik(tr_b.to_natural(u))
            except ModelError:
                return 1e300
            return -val if np.isfinite(val) else 1e300

        if tr_b.free:
            res = _minimize(neg_b, tr_b.to_free(start), max_iter)
            theta_vals = tr_b.to_natural(res.x)
            converged, iterations = bool(res.success), iterations + int(res.nit)
        else:
            theta_vals = start
    # delta0 cannot reach zero but can sit on its floor
    if names[0] not in fixed and theta_vals[0] < BOUNDARY_SMALL:
        boundary.add(names[0])
    for i in range(2 + 2 * cfg.q, len(names)):
        if names[i] not in fixed and (theta_vals[i] < RHO_EDGE or theta_vals[i] > 1 - RHO_EDGE):
            boundary.add(names[i])

    migration = fit_migration(panel, cfg) if fit_migration_params else (
        init.migration if init is not None else MigrationParams())
    theta_hat = ParamVector.from_array(theta_vals, cfg.q, migration)
    ll = lik(theta_vals)
    if fit_migration_params:
        ll += lik.migration_loglik(migration)

    std_errors: dict[str, float | None] = {n: None for n in names}
    flags: dict[str, str] = {n: "fixed" for n in fixed}
    flags.update({n: "boundary" for n in boundary})
    if compute_se:
        se, se_flags = _standard_errors(lik, theta_vals, [n for n in names if n not in flags])
        std_errors.update(se)
        flags.update(se_flags)
    if not converged:
        log.warning("optimizer stopped without meeting the convergence tolerance")
    return FitResult(theta_hat=theta_hat, log_lik=float(ll), std_errors=std_errors,
                     se_flags=flags, converged=converged, iterations=iterations,
                     boundary_params=boundary, fixed=fixed, n_pairs=lik.n_pairs, starts=trace)


def numerical_hessian(f, x: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """Central-difference Hessian of ``f`` at ``x``."""
    n = len(x)
    H = np.empty((n, n))
    f0 = f(x)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = steps[i]
        H[i, i] = (f(x + ei) - 2.0 * f0 + f(x - ei)) / steps[i] ** 2
        for j in range(i):
            ej = np.zeros(n)
            ej[j] = steps[j]
            H[i, j] = H[j, i] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej)
                                 + f(x - ei - ej)) / (4.0 * steps[i] * steps[j])
    return H


def _standard_errors(lik: PanelLikelihood, values: np.ndarray, free_names: Sequence[str]):
    names = lik.cfg.param_names()
    idx = [names.index(n) for n in free_names]
    out: dict[str, float | None] = {}
    flags: dict[str, str] = {}
    if not idx:
        return out, flags
    x = values[idx]
    steps = np.maximum(1e-4, 1e-4 * np.abs(x))
    for j, i in enumerate(idx):
        lo = 0.0
        hi = 1.0 if i >= 2 + 2 * lik.cfg.q else math.inf
        if x[j] - steps[j] < lo or x[j] + steps[j] > hi:
            flags[names[i]] = "boundary"
    if flags:
        keep = [j for j, i in enumerate(idx) if names[i] not in flags]
        idx = [idx[j] for j in keep]
        x, steps = x[keep], steps[keep]
        if not idx:
            return out, flags

    def f(sub):
        v = values.copy()
        v[idx] = sub
        return lik(v)

    H = numerical_hessian(f, x, steps)
    info = -H
    try:
        np.linalg.cholesky(info)
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        for i in idx:
            flags[names[i]] = "singular"
        return out, flags
    for j, i in enumerate(idx):
        var = cov[j, j]
        if var > 0 and np.isfinite(var):
            out[names[i]] = float(math.sqrt(var))
        else:
            flags[names[i]] = "singular"
    return out, flags


def standard_errors(panel: Panel, theta_hat: ParamVector, cfg: ModelConfig | None = None,
                    boundary: Sequence[str] = (), fixed: Sequence[str] = ()):
    """Natural-scale Hessian standard errors.

    Returns ``(std_errors, flags)``; parameters that are fixed, on the
    boundary or whose Hessian block is not negative definite get a flag and
    no numeric value.
    """
    cfg = panel.config if cfg is None else cfg
    lik = PanelLikelihood(panel, cfg)
    names = cfg.param_names()
    flags = {n: "fixed" for n in fixed}
    flags.update({n: "boundary" for n in boundary})
    se, se_flags = _standard_errors(lik, theta_hat.to_array(), [n for n in names if n not in flags])
    flags.update(se_flags)
    return {n: se.get(n) for n in names}, flags


def deviance(panel: Panel, theta_hat: ParamVector, theta_null: ParamVector,
             cfg: ModelConfig | None = None) -> float:
    """Twice the log-likelihood gain of ``theta_hat`` over ``theta_null``."""
    cfg = panel.config if cfg is None else cfg
    theta_hat.check(cfg)
    theta_null.check(cfg)
    lik = PanelLikelihood(panel, cfg)
    a, b = lik(theta_hat), lik(theta_null)
    if a == b:
        return 0.0
    return 2.0 * (a - b)


@dataclass(frozen=True)
class RescaledReport:
    tau: float
    names: tuple[str, ...]
    starred: tuple[float, ...]
    rho: tuple[float, ...]


def rescale(theta_hat: ParamVector, cfg: ModelConfig | None = None) -> RescaledReport:
    """Spatial coefficients as shares of their total."""
    forces = theta_hat.forces()
    tau = math.fsum(forces)
    if not tau > 0:
        raise ModelError("all spatial coefficients are zero; nothing to rescale")
    names = tuple(cfg.force_names()) if cfg is not None else tuple(
        ["delta0", "delta1"] + [f"homo_{m + 1}" for m in range(theta_hat.q)]
        + [f"hetero_{m + 1}" for m in range(theta_hat.q)])
    return RescaledReport(tau=tau, names=names, starred=tuple((forces / tau).tolist()),
                          rho=theta_hat.rho)


def gof_summaries(panel: Panel, cfg: ModelConfig | None = None) -> list[dict]:
    """Per-transition summaries for comparing observed and simulated panels."""
    cfg = panel.config if cfg is None else cfg
    rows = []
    for prev, cur in panel.transitions():
        stay = sorted(prev.actors & cur.actors)
        row = {
            "t": cur.t,
            "actors_prev": len(prev.actors),
            "actors": len(cur.actors),
            "persistent": len(stay),
            "emigrants": len(prev.actors) - len(stay),
            "immigrants": len(cur.actors) - len(stay),
        }
        if stay:
            disp = cur.position_matrix(stay) - prev.position_matrix(stay)
            row["mean_sq_displacement"] = float(np.mean(np.einsum("nd,nd->n", disp, disp)))
        else:
            row["mean_sq_displacement"] = float("nan")
        for m in range(cfg.q):
            if stay:
                kept = sum(1 for a in stay if cur.covariates[a][m] == prev.covariates[a][m])
                row[f"persistence_{m + 1}"] = kept / len(stay)
            else:
                row[f"persistence_{m + 1}"] = float("nan")
        homophily = _knn_homophily(cur, cfg)
        for m in range(cfg.q):
            row[f"knn_homophily_{m + 1}"] = homophily[m]
        for m, sup in enumerate(cfg.supports):
            for v in sup:
                row[f"count_{m + 1}={v}"] = sum(1 for a in cur.actors if cur.covariates[a][m] == v)
        rows.append(row)
    return rows


def _knn_homophily(wave, cfg: ModelConfig) -> list[float]:
    ids = wave.ids
    if len(ids) < 2:
        return [float("nan")] * cfg.q
    sq = pairwise_sq(wave.position_matrix(ids))
    X = wave.covariate_codes(cfg, ids)
    shares = np.zeros((len(ids), cfg.q))
    for i in range(len(ids)):
        pool = np.ones(len(ids), dtype=bool)
        pool[i] = False
        nb = neighbor_mask(sq[i], pool, cfg.k)
        shares[i] = (X[nb] == X[i]).mean(axis=0)
    return shares.mean(axis=0).tolist()
