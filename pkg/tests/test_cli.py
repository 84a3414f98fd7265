import csv
import json

import numpy as np
import pytest
from scipy.stats import special_ortho_group

from stepp import Panel, ParamVector, RandomStreams, WaveState, fit_mle, random_seed_wave, simulate_trajectory
from stepp.cli import main
from stepp.io import dumps_panel, panel_from_dict, read_panel, write_panel

MODEL = {"d": 2, "q": 1, "supports": [[0, 1]], "k": 5, "c": 1.0}
THETA = {"delta0": 0.5, "delta1": 0.5, "rho": [0.8], "homo": [1.0], "hetero": [0.75]}


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def sim_config(tmp_path, **extra):
    doc = {"model": MODEL, "theta": THETA, "initial": {"n_actors": 20}, "horizon": 3, "seed": 1}
    doc.update(extra)
    return write_json(tmp_path / "sim.json", doc)


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_panel_round_trip_is_byte_stable(cfg1, theta_study, tmp_path):
    panel = simulate_trajectory(random_seed_wave(cfg1, 15, 3), theta_study, cfg1, 3, 3)
    text = dumps_panel(panel)
    again = panel_from_dict(json.loads(text))
    assert again.waves == panel.waves
    assert dumps_panel(again) == text
    write_panel(panel, tmp_path / "p.json")
    assert read_panel(tmp_path / "p.json").waves == panel.waves


def test_simulate_minimal(tmp_path):
    cfg = sim_config(tmp_path, initial={"n_actors": 1}, horizon=1)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == 0
    doc = json.loads((tmp_path / "o" / "panel_000.json").read_text())
    assert len(doc["waves"]) == 2


def test_simulate_is_deterministic(tmp_path):
    cfg = sim_config(tmp_path)
    for name in ("a", "b"):
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / name),
                     "--replicates", "3", "--quiet"]) == 0
    for f in ("panel_000.json", "panel_002.json", "summary.csv", "run.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    rows = read_csv(tmp_path / "a" / "summary.csv")
    assert len(rows) == 9 and rows[0]["persistence_1"]


def test_simulate_threads_match_serial(tmp_path, monkeypatch):
    cfg = sim_config(tmp_path)
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "s"), "--replicates", "2", "--quiet"])
    monkeypatch.setenv("STEPP_THREADS", "2")
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "p"), "--replicates", "2", "--quiet"])
    assert (tmp_path / "s" / "panel_001.json").read_bytes() == (tmp_path / "p" / "panel_001.json").read_bytes()


@pytest.mark.parametrize("doc, needle", [
    ({"model": {"d": 2, "q": 1}}, "supports"),
    ({"model": MODEL, "theta": {"delta0": -1.0}, "horizon": 2, "initial": {"n_actors": 3}}, "delta0"),
    ({"model": MODEL, "theta": THETA, "horizon": 2, "initial": {"n_actors": 3}, "bogus": 1}, "bogus"),
    ({"model": MODEL, "theta": {"delta0": 1.0, "rho": [0.5, 0.5]}, "horizon": 2,
      "initial": {"n_actors": 3}}, "rho"),
])
def test_config_errors_exit_2(tmp_path, capsys, doc, needle):
    path = write_json(tmp_path / "bad.json", doc)
    assert main(["simulate", "--config", path, "--out", str(tmp_path / "o")]) == 2
    assert needle in capsys.readouterr().err


def test_model_error_exit_3(tmp_path, capsys):
    cfg = sim_config(tmp_path, theta={"delta0": 0.0})
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 3


def test_fit_one_wave_exit_2(cfg1, tmp_path, capsys):
    write_panel(Panel((random_seed_wave(cfg1, 5, 0),), cfg1), tmp_path / "one.json")
    assert main(["fit", "--panel", str(tmp_path / "one.json"), "--out", str(tmp_path / "o")]) == 2
    assert "need at least two waves" in capsys.readouterr().err


def test_fit_invalid_panel_exit_3(cfg1, tmp_path):
    w0 = random_seed_wave(cfg1, 3, 0)
    bad = WaveState(1, w0.actors, {a: (0.0, 0.0, 0.0) for a in w0.actors}, w0.covariates)
    write_panel(Panel((w0, bad), cfg1), tmp_path / "bad.json")
    assert main(["fit", "--panel", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")]) == 3


def test_fit_report_and_boundary_text(cfg1, tmp_path):
    truth = ParamVector(0.5, 0.5, (0.8,), (1.0,), (0.0,))
    seed = random_seed_wave(cfg1, 50, RandomStreams(1001, 1))
    panel = simulate_trajectory(seed, truth, cfg1, 5, RandomStreams(2024, 1))
    write_panel(panel, tmp_path / "p.json")
    out = tmp_path / "fit"
    assert main(["fit", "--panel", str(tmp_path / "p.json"), "--out", str(out), "--quiet"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["boundary_params"] == ["upsilon_tilde_1"]
    assert report["deviance"] > 0 and report["converged"] is True
    assert abs(sum(report["rescaled"]["starred"].values()) - 1.0) < 1e-12
    text = (out / "report.txt").read_text()
    line = next(l for l in text.splitlines() if l.startswith("upsilon_tilde_1"))
    assert "n/a (boundary)" in line
    direct = fit_mle(panel)
    assert report["log_lik"] == direct.log_lik
    first = (out / "report.json").read_bytes()
    main(["fit", "--panel", str(tmp_path / "p.json"), "--out", str(out), "--quiet"])
    assert (out / "report.json").read_bytes() == first


def test_fit_null_params_inline(cfg1, theta_study, tmp_path):
    panel = simulate_trajectory(random_seed_wave(cfg1, 30, 2), theta_study, cfg1, 3, 2)
    write_panel(panel, tmp_path / "p.json")
    null = json.dumps({"delta0": 0.5, "rho": [0.8]})
    out = tmp_path / "fit"
    assert main(["fit", "--panel", str(tmp_path / "p.json"), "--out", str(out), "--quiet",
                 "--null-params", null]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["null"]["delta0"] == 0.5 and report["null"]["rho"] == [0.8]
    assert main(["fit", "--panel", str(tmp_path / "p.json"), "--out", str(out), "--quiet",
                 "--null-params", '{"delta0": "x"}']) == 2


def test_align_identity_and_rotation(cfg1, theta_study, tmp_path):
    panel = simulate_trajectory(random_seed_wave(cfg1, 25, 4), theta_study, cfg1, 3, 4)
    write_panel(panel, tmp_path / "ref.json")
    assert main(["align", "--reference", str(tmp_path / "ref.json"), str(tmp_path / "ref.json"),
                 "--out", str(tmp_path / "same.json"), "--quiet"]) == 0
    # wave 0 is the reference itself, so it comes back unchanged
    same = read_panel(tmp_path / "same.json")
    assert np.allclose(same.waves[0].position_matrix(), panel.waves[0].position_matrix(), atol=1e-12)

    # rotate every wave after the first; align back to wave 0
    rotated = [panel.waves[0]]
    for s, w in enumerate(panel.waves[1:]):
        R = special_ortho_group.rvs(2, random_state=s)
        rotated.append(WaveState(w.t, w.actors, {a: tuple(R @ np.asarray(z) + s)
                                                 for a, z in w.positions.items()}, w.covariates))
    write_panel(Panel(tuple(rotated), cfg1), tmp_path / "rot.json")
    write_panel(panel, tmp_path / "orig.json")
    for name in ("rot", "orig"):
        assert main(["align", "--reference", str(tmp_path / "ref.json"), str(tmp_path / f"{name}.json"),
                     "--out", str(tmp_path / f"{name}_aligned.json"), "--quiet"]) == 0
    # each wave is aligned to wave 0 independently, so a rigid motion of the input is undone
    rot_fit = fit_mle(read_panel(tmp_path / "rot_aligned.json"), compute_se=False, starts=2)
    orig_fit = fit_mle(read_panel(tmp_path / "orig_aligned.json"), compute_se=False, starts=2)
    assert np.allclose(rot_fit.theta_hat.to_array(), orig_fit.theta_hat.to_array(), rtol=1e-4, atol=1e-5)
    assert rot_fit.log_lik == pytest.approx(orig_fit.log_lik, rel=1e-8)


def test_align_too_few_shared_exit_3(cfg1, tmp_path, capsys):
    ref = random_seed_wave(cfg1, 6, 0)
    other = WaveState(0, {"x1", "x2"}, {"x1": (0.0, 0.0), "x2": (1.0, 1.0)}, {"x1": (0,), "x2": (1,)})
    write_panel(Panel((ref,), cfg1), tmp_path / "ref.json")
    write_panel(Panel((ref, other), cfg1), tmp_path / "w.json")
    assert main(["align", "--reference", str(tmp_path / "ref.json"), str(tmp_path / "w.json"),
                 "--out", str(tmp_path / "o.json")]) == 3
    assert "wave 1" in capsys.readouterr().err


def _scenario_doc(**extra):
    doc = {"model": MODEL, "theta": THETA, "seed": 3, "horizon": 4,
           "initial": {"n_actors": 100, "covariate_probs": [[0.6, 0.4]]},
           "interventions": [{"time": 1, "covariate": 1, "value": 0, "success_prob": 0.0}]}
    doc.update(extra)
    return doc


def test_intervene_zero_success_identical_arms(tmp_path):
    cfg = write_json(tmp_path / "s.json", _scenario_doc())
    assert main(["intervene", "--config", cfg, "--out", str(tmp_path / "o"), "--quiet",
                 "--replicates", "2"]) == 0
    for r in read_csv(tmp_path / "o" / "prevalence.csv"):
        assert r["control_mean"] == r["intervention_mean"]
        assert r["control_sd"] == r["intervention_sd"]


def test_intervene_sd_column_empty_vs_populated(tmp_path):
    cfg = write_json(tmp_path / "s.json", _scenario_doc())
    main(["intervene", "--config", cfg, "--out", str(tmp_path / "one"), "--quiet", "--replicates", "1"])
    main(["intervene", "--config", cfg, "--out", str(tmp_path / "many"), "--quiet",
          "--replicates", "64", "--threads", "2"])
    assert all(r["control_sd"] == "" for r in read_csv(tmp_path / "one" / "prevalence.csv"))
    assert all(r["control_sd"] != "" for r in read_csv(tmp_path / "many" / "prevalence.csv"))


def test_intervene_targeted_vs_broad(tmp_path):
    # a class of 100 with about 40 users; stop users directly, or nudge everyone
    targeted = _scenario_doc(interventions=[{
        "time": 1, "covariate": 1, "value": 0, "success_prob": 0.5,
        "selector": {"kind": "match", "covariate": 1, "value": 1, "limit": 10, "rank": "central"}}])
    broad = _scenario_doc(interventions=[{"time": 1, "covariate": 1, "value": 0, "success_prob": 0.1}])
    out = {}
    for name, doc in (("targeted", targeted), ("broad", broad)):
        cfg = write_json(tmp_path / f"{name}.json", doc)
        assert main(["intervene", "--config", cfg, "--out", str(tmp_path / name), "--quiet",
                     "--replicates", "8"]) == 0
        rows = [r for r in read_csv(tmp_path / name / "prevalence.csv") if r["value"] == "1"]
        out[name] = rows
        assert len(rows) == 5
        at_1 = next(r for r in rows if r["wave"] == "1")
        assert float(at_1["intervention_mean"]) <= float(at_1["control_mean"])
        meta = json.loads((tmp_path / name / "metadata.json").read_text())
        assert meta["replicates"] == 8
    assert out["targeted"][0]["control_mean"] == out["broad"][0]["control_mean"]


def test_intervene_bad_covariate_exit_2(tmp_path):
    doc = _scenario_doc(interventions=[{"time": 1, "covariate": 2, "value": 0}])
    cfg = write_json(tmp_path / "s.json", doc)
    assert main(["intervene", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
