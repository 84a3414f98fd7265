import math

import numpy as np
import pytest
from scipy import stats
from scipy.stats import special_ortho_group

from stepp import (ConfigError, MigrationParams, ModelError, Panel, ParamVector, RandomStreams,
                   WaveState, deviance, ego_log_density, fit_migration, fit_mle, gof_summaries,
                   log_likelihood, null_params, random_seed_wave, rescale, simulate_trajectory,
                   standard_errors)
from stepp.inference import PanelLikelihood, numerical_hessian

from conftest import make_wave, random_config


def study_panel(cfg, theta, r, n=50, horizon=5):
    seed = random_seed_wave(cfg, n, RandomStreams(1000 + r, r))
    return simulate_trajectory(seed, theta, cfg, horizon, RandomStreams(2024, r))


def basic_only(delta0, rho):
    return ParamVector(delta0, 0.0, (rho,), (0.0,), (0.0,))


# --- log-likelihood ---------------------------------------------------------

def test_single_actor_by_hand(cfg1):
    w0 = make_wave(0, [[0.0, 0.0]], [(1,)])
    w1 = make_wave(1, [[0.4, -0.3]], [(0,)])
    theta = basic_only(0.9, 0.7)
    ll = log_likelihood(Panel((w0, w1), cfg1), theta)
    # flipped covariate: 1 - rho; Gaussian with precision 2*delta0 per coordinate
    expect = math.log(0.3) + math.log(0.9 / math.pi) - 0.9 * (0.4 ** 2 + 0.3 ** 2)
    assert ll == pytest.approx(expect, rel=1e-14)


def test_loglik_is_sum_of_ego_densities(cfg1, theta_study):
    panel = study_panel(cfg1, theta_study, 0, n=8, horizon=2)
    total = 0.0
    for prev, cur in panel.transitions():
        for a in sorted(prev.actors & cur.actors):
            total += ego_log_density(cur.positions[a], cur.covariates[a], a, prev, theta_study, cfg1)
    assert log_likelihood(panel, theta_study) == pytest.approx(total, rel=1e-12)


def test_terms_are_order_free(cfg1, theta_study):
    lik = PanelLikelihood(study_panel(cfg1, theta_study, 1), cfg1)
    terms = lik.terms(theta_study.to_array())
    perm = np.random.default_rng(0).permutation(len(terms))
    assert math.fsum(terms[perm]) == pytest.approx(lik(theta_study), rel=1e-10)


def test_needs_two_waves(cfg1):
    with pytest.raises(ConfigError, match="need at least two waves"):
        log_likelihood(Panel((random_seed_wave(cfg1, 3, 0),), cfg1), null_params(cfg1))


def test_invalid_panel_is_a_model_error(cfg1):
    w0 = make_wave(0, [[0, 0], [1, 1]], [(0,), (1,)])
    w1 = WaveState(1, {"a0", "a1"}, {"a0": (0.0, 0.0)}, {"a0": (0,), "a1": (1,)})
    with pytest.raises(ModelError):
        log_likelihood(Panel((w0, w1), cfg1), null_params(cfg1))


def _motion(panel, R, v):
    waves = tuple(WaveState(w.t, w.actors,
                            {a: tuple(R @ np.asarray(z) + v) for a, z in w.positions.items()},
                            w.covariates) for w in panel.waves)
    return Panel(waves, panel.config)


@pytest.mark.parametrize("seed", range(10))
def test_rigid_motion_invariance(seed):
    gen = np.random.default_rng(seed)
    cfg, _, theta = random_config(gen, max_actors=8)
    start = random_seed_wave(cfg, 8, seed)
    theta = ParamVector(max(theta.delta0, 0.2), theta.delta1, theta.rho, theta.homo, theta.hetero)
    panel = simulate_trajectory(start, theta, cfg, 3, seed)
    d = cfg.d
    R = special_ortho_group.rvs(d, random_state=seed) if d > 1 else np.array([[-1.0]])
    moved = _motion(panel, R, gen.normal(0, 5, d))
    assert log_likelihood(moved, theta) == pytest.approx(log_likelihood(panel, theta), rel=1e-9)


def test_truth_beats_null_in_study_regime(cfg1, theta_study):
    null = null_params(cfg1)
    wins = 0
    for r in range(100):
        lik = PanelLikelihood(study_panel(cfg1, theta_study, r), cfg1)
        wins += lik(theta_study) > lik(null)
    assert wins >= 95


def test_migration_loglik_and_closed_form_fit(cfg1):
    theta = ParamVector(0.5, 0.5, (0.8,), (1.0,), (0.75,),
                        MigrationParams(0.1, 2.0, 1.0, ((0.3, 0.7),)))
    panel = simulate_trajectory(random_seed_wave(cfg1, 40, 3), theta, cfg1, 10, 3)
    mp = fit_migration(panel)
    rows = gof_summaries(panel)
    n_prev = sum(r["actors_prev"] for r in rows)
    assert mp.emigration_prob == pytest.approx(sum(r["emigrants"] for r in rows) / n_prev)
    assert mp.immigration_rate == pytest.approx(sum(r["immigrants"] for r in rows) / 10)
    lik = PanelLikelihood(panel, cfg1)
    best = lik.migration_loglik(mp)
    for p in (mp.emigration_prob * 0.8, mp.emigration_prob * 1.2):
        assert lik.migration_loglik(MigrationParams(p, mp.immigration_rate)) < best
    full = log_likelihood(panel, theta, include_migration=True)
    assert full == pytest.approx(lik(theta) + lik.migration_loglik(theta.migration))


# --- fitting ----------------------------------------------------------------

def test_fit_recovers_persistence_on_forces_off_data(cfg1):
    truth = basic_only(0.5, 0.8)
    panel = study_panel(cfg1, truth, 7, n=200)
    fit = fit_mle(panel)
    rows = gof_summaries(panel)
    frac = np.mean([r["persistence_1"] for r in rows])
    n = fit.n_pairs
    assert abs(fit.theta_hat.rho[0] - frac) < 3 * math.sqrt(frac * (1 - frac) / n)


def test_fixed_forces_give_binomial_se(cfg1):
    truth = basic_only(0.5, 0.8)
    panel = study_panel(cfg1, truth, 3, n=100)
    fixed = {"delta0": 0.5, "delta1": 0.0, "alpha_1": 0.0, "upsilon_tilde_1": 0.0}
    fit = fit_mle(panel, fixed=fixed)
    rho = fit.theta_hat.rho[0]
    frac = np.mean([r["persistence_1"] for r in gof_summaries(panel)])
    assert rho == pytest.approx(frac, abs=1e-5)
    se = fit.std_errors["rho_1"]
    assert se == pytest.approx(math.sqrt(rho * (1 - rho) / fit.n_pairs), rel=0.05)
    assert all(fit.se_flags[n] == "fixed" for n in fixed)
    assert all(fit.std_errors[n] is None for n in fixed)


def test_fit_is_deterministic_and_beats_null(cfg1, theta_study):
    panel = study_panel(cfg1, theta_study, 11)
    a = fit_mle(panel, seed=4)
    b = fit_mle(panel, seed=4)
    assert a.theta_hat == b.theta_hat and a.log_lik == b.log_lik
    assert a.converged
    assert deviance(panel, a.theta_hat, null_params(cfg1)) > 0
    assert deviance(panel, a.theta_hat, a.theta_hat) == 0.0
    assert a.log_lik >= max(s["log_lik"] for s in a.starts) - 1e-6


def test_fit_invariant_under_rigid_motion(cfg1, theta_study):
    panel = study_panel(cfg1, theta_study, 12)
    R = special_ortho_group.rvs(2, random_state=1)
    a = fit_mle(panel, compute_se=False)
    b = fit_mle(_motion(panel, R, np.array([3.0, -2.0])), compute_se=False)
    assert np.allclose(a.theta_hat.to_array(), b.theta_hat.to_array(), rtol=1e-3, atol=1e-4)


def test_unknown_fixed_parameter(cfg1, theta_study):
    with pytest.raises(ConfigError):
        fit_mle(study_panel(cfg1, theta_study, 0, n=10, horizon=1), fixed={"gamma": 1.0})


def test_boundary_flag_for_absent_repulsion(cfg1):
    truth = ParamVector(0.5, 0.5, (0.8,), (1.0,), (0.0,))
    fit = fit_mle(study_panel(cfg1, truth, 1))
    assert "upsilon_tilde_1" in fit.boundary_params
    assert fit.theta_hat.hetero[0] == 0.0
    assert fit.std_errors["upsilon_tilde_1"] is None
    assert fit.se_flags["upsilon_tilde_1"] == "boundary"
    row = {r["parameter"]: r for r in fit.table(cfg1)}["upsilon_tilde_1"]
    assert row["p_value"] is None and row["flag"] == "boundary"


def test_forces_off_deviance_is_calibrated(cfg1):
    truth = basic_only(0.5, 0.8)
    crit = stats.chi2.ppf(0.95, df=len(cfg1.param_names()))
    small = 0
    for r in range(20):
        panel = study_panel(cfg1, truth, 300 + r)
        fit = fit_mle(panel, starts=2, compute_se=False)
        dev = deviance(panel, fit.theta_hat, truth)
        assert dev >= -1e-6
        small += dev < crit
    assert small >= 18


# --- standard errors --------------------------------------------------------

def test_numerical_hessian_of_quadratic():
    A = np.array([[-2.0, 0.5], [0.5, -1.0]])
    f = lambda x: 0.5 * x @ A @ x + 3 * x[0]
    H = numerical_hessian(f, np.array([0.3, -0.2]), np.array([1e-3, 1e-3]))
    assert np.allclose(H, A, atol=1e-6)


def test_standard_errors_flag_boundary(cfg1, theta_study):
    panel = study_panel(cfg1, theta_study, 2)
    theta = ParamVector(0.5, 0.5, (0.8,), (1.0,), (0.0,))
    se, flags = standard_errors(panel, theta, cfg1, boundary=("upsilon_tilde_1",))
    assert se["upsilon_tilde_1"] is None and flags["upsilon_tilde_1"] == "boundary"
    assert all(se[n] > 0 for n in ("delta0", "delta1", "alpha_1", "rho_1"))


def test_p_values_against_reference(cfg1, theta_study):
    fit = fit_mle(study_panel(cfg1, theta_study, 5))
    rows = {r["parameter"]: r for r in fit.table(cfg1)}
    for name, row in rows.items():
        ref = null_params(cfg1).as_dict(cfg1)[name]
        z = (row["estimate"] - ref) / row["std_error"]
        assert row["p_value"] == pytest.approx(2 * stats.norm.sf(abs(z)))
    one = {r["parameter"]: r for r in fit.table(cfg1, one_sided=True)}
    assert one["alpha_1"]["p_value"] == pytest.approx(rows["alpha_1"]["p_value"] / 2)


# --- rescaling and summaries ------------------------------------------------

def test_rescale_reproduces_published_shares():
    raw = ParamVector(0.0817, 0.0707, (0.5, 0.5), (0.0766, 0.0984), (0.1084, 0.0))
    rep = rescale(raw)
    assert round(rep.tau, 3) == 0.436
    assert [round(s, 3) for s in rep.starred] == [0.187, 0.162, 0.176, 0.226, 0.249, 0.000]
    assert math.fsum(rep.starred) == pytest.approx(1.0, abs=1e-12)
    assert rep.rho == (0.5, 0.5)


def test_rescale_trivial_cases():
    eq = rescale(ParamVector(0.2, 0.2, (0.5, 0.5), (0.2, 0.2), (0.2, 0.2)))
    assert all(s == pytest.approx(1 / 6) for s in eq.starred)
    one = rescale(ParamVector(0.3, 0.0, (0.5,), (0.0,), (0.0,)))
    assert one.starred == (1.0, 0.0, 0.0, 0.0)
    with pytest.raises(ModelError):
        rescale(ParamVector(0.0, 0.0, (0.5,), (0.0,), (0.0,)))


def test_gof_persistence_and_closed_population(cfg1):
    theta = ParamVector(0.5, 0.5, (1.0,), (1.0,), (0.75,))
    rows = gof_summaries(study_panel(cfg1, theta, 0))
    assert all(r["persistence_1"] == 1.0 for r in rows)
    assert all(r["emigrants"] == 0 and r["immigrants"] == 0 for r in rows)
    assert all(0.0 <= r["knn_homophily_1"] <= 1.0 for r in rows)
    assert all(r["count_1=0"] + r["count_1=1"] == 50 for r in rows)


def test_gof_displacement_under_basic_drift(cfg1):
    delta0 = 0.6
    panel = study_panel(cfg1, basic_only(delta0, 0.8), 9, n=400, horizon=3)
    rows = gof_summaries(panel)
    # |Z^t - Z^{t-1}|^2 is (1 / (2 delta0)) times a chi-square with d degrees of freedom
    var = 1.0 / (2 * delta0)
    n = 400 * 3
    msd = np.mean([r["mean_sq_displacement"] for r in rows])
    assert abs(msd - 2 * var) < 3 * math.sqrt(2 * 2 * var ** 2 / n)
