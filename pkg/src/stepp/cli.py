"""Command-line entry points.

Exit codes: 0 success, 2 usage or configuration error, 3 data or model error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .alignment import align_sequence
from .core import ConfigError, ModelConfig, ModelError, Panel, WaveState, check_panel, config_dict
from .inference import deviance, fit_mle, gof_summaries, rescale
from .io import (canonical_dumps, load_run_config, migration_from, model_config_from,
                 read_panel, rows_to_csv, theta_from, theta_to_dict, write_panel)
from .simulation import (Intervention, RandomStreams, Scenario, Selector, random_seed_wave,
                         run_scenario, simulate_trajectory)

log = logging.getLogger("stepp")

EXIT_OK, EXIT_CONFIG, EXIT_MODEL = 0, 2, 3


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("STEPP_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"STEPP_THREADS must be an integer, got {env!r}") from None
    return 1


def _require(doc: dict, field: str):
    if field not in doc:
        raise ConfigError(f"config: field '{field}' is required for this command")
    return doc[field]


def _seed_wave(doc: dict, cfg: ModelConfig, seed: int, replicate: int = 0) -> WaveState:
    init = _require(doc, "initial")
    if "panel" in init:
        panel = read_panel(init["panel"], cfg)
        check_panel(panel)
        return panel.waves[-1]
    if "n_actors" not in init:
        raise ConfigError("config: field 'initial' needs 'n_actors' or 'panel'")
    return random_seed_wave(cfg, init["n_actors"], RandomStreams(seed, replicate),
                            position_sd=init.get("position_sd", 1.0),
                            covariate_probs=init.get("covariate_probs"))


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# --- simulate ---------------------------------------------------------------

def _simulate_one(job):
    doc, seed, r = job
    cfg = model_config_from(doc)
    theta = theta_from(_require(doc, "theta"), cfg, migration_from(doc.get("migration")))
    wave = _seed_wave(doc, cfg, seed, r)
    return simulate_trajectory(wave, theta, cfg, _require(doc, "horizon"), RandomStreams(seed, r))


def cmd_simulate(args) -> int:
    doc = load_run_config(args.config)
    cfg = model_config_from(doc)
    theta_from(_require(doc, "theta"), cfg, migration_from(doc.get("migration")))
    _require(doc, "horizon")
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    reps = args.replicates if args.replicates is not None else doc.get("replicates", 1)
    out = Path(args.out)
    jobs = [(doc, seed, r) for r in range(reps)]
    threads = _threads(args)
    start = time.perf_counter()
    if threads > 1 and reps > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            panels = list(pool.map(_simulate_one, jobs))
    else:
        panels = [_simulate_one(j) for j in jobs]
    rows = []
    width = max(3, len(str(reps - 1)))
    for r, panel in enumerate(panels):
        write_panel(panel, out / f"panel_{r:0{width}d}.json")
        for row in gof_summaries(panel, cfg):
            rows.append({"replicate": r, **row})
    _write(out / "summary.csv", rows_to_csv(rows))
    _write(out / "run.json", canonical_dumps({
        "command": "simulate", "seed": seed, "replicates": reps,
        "horizon": doc["horizon"], "model": config_dict(cfg), "theta": doc["theta"],
    }, indent=2) + "\n")
    log.info("wrote %d panel(s) to %s in %.2fs", reps, out, time.perf_counter() - start)
    return EXIT_OK


# --- fit --------------------------------------------------------------------

def fit_table_text(rows: list[dict]) -> str:
    header = ("Parameter", "Estimate", "Std. Error", "p-value")
    body = []
    for r in rows:
        if r["std_error"] is None:
            se = f"n/a ({r['flag']})" if r["flag"] else "n/a"
        else:
            se = f"({r['std_error']:.3f})"
        if r["p_value"] is None:
            p = f"n/a ({r['flag']})" if r["flag"] else "n/a"
        else:
            p = "< 0.0001" if r["p_value"] < 1e-4 else f"{r['p_value']:.4f}"
        body.append((r["parameter"], f"{r['estimate']:.4f}", se, p))
    widths = [max(len(str(x[i])) for x in [header] + body) for i in range(4)]
    line = lambda cells: "  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w)
                                   for i, (c, w) in enumerate(zip(cells, widths)))
    rule = "-" * len(line(header))
    return "\n".join([line(header), rule] + [line(b) for b in body]) + "\n"


def _null_theta(args, doc, cfg):
    if args.null_params:
        text = args.null_params
        p = Path(text)
        try:
            null_doc = json.loads(p.read_text() if p.exists() else text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"--null-params: not valid JSON ({e})") from None
        from .io import RUN_SCHEMA, validate_schema
        validate_schema(null_doc, {**RUN_SCHEMA["$defs"]["theta"], "$defs": RUN_SCHEMA["$defs"]},
                        "--null-params")
        return theta_from(null_doc, cfg, field="null")
    if doc and "null" in doc:
        return theta_from(doc["null"], cfg, field="null")
    return theta_from({"delta0": 1.0}, cfg, field="null")


def cmd_fit(args) -> int:
    doc = load_run_config(args.config) if args.config else {}
    cfg = model_config_from(doc) if doc else None
    panel = read_panel(args.panel, cfg)
    cfg = panel.config
    if len(panel.waves) < 2:
        raise ConfigError("need at least two waves")
    check_panel(panel)
    fit_opts = doc.get("fit", {}) if doc else {}
    init = theta_from(fit_opts["init"], cfg, field="fit/init") if "init" in fit_opts else None
    seed = args.seed if args.seed is not None else doc.get("seed", 0) if doc else 0
    theta_null = _null_theta(args, doc, cfg)

    res = fit_mle(panel, cfg, init=init, fixed=fit_opts.get("fixed"),
                  starts=fit_opts.get("starts", 3), seed=seed,
                  max_iter=fit_opts.get("max_iter", 500),
                  fit_migration_params=fit_opts.get("fit_migration", False))
    rows = res.table(cfg, reference=theta_null, one_sided=fit_opts.get("one_sided", False))
    dev = deviance(panel, res.theta_hat, theta_null, cfg)
    try:
        resc = rescale(res.theta_hat, cfg)
        rescaled = {"tau": resc.tau, "starred": dict(zip(resc.names, resc.starred)),
                    "rho": list(resc.rho)}
    except ModelError as e:
        rescaled = {"error": str(e)}
    report = {
        "command": "fit",
        "panel": str(args.panel),
        "model": config_dict(cfg),
        "theta_hat": theta_to_dict(res.theta_hat),
        "estimates": rows,
        "log_lik": res.log_lik,
        "null": theta_to_dict(theta_null),
        "deviance": dev,
        "rescaled": rescaled,
        "boundary_params": sorted(res.boundary_params),
        "converged": res.converged,
        "iterations": res.iterations,
        "starts": res.starts,
        "n_pairs": res.n_pairs,
    }
    if fit_opts.get("fit_migration"):
        mp = res.theta_hat.migration
        report["migration"] = {"emigration_prob": mp.emigration_prob,
                               "immigration_rate": mp.immigration_rate,
                               "immigrant_position_spread": mp.immigrant_position_spread,
                               "immigrant_covariate_probs": [list(p) for p in mp.immigrant_covariate_probs]}
    out = Path(args.out)
    text = fit_table_text(rows)
    text += f"\nlog-likelihood {res.log_lik:.4f}   deviance vs null {dev:.4f}   " \
            f"converged {str(res.converged).lower()}\n"
    if "tau" in rescaled:
        text += "\nrescaled: " + "  ".join(f"{k}*={v:.3f}" for k, v in rescaled["starred"].items())
        text += f"  tau={rescaled['tau']:.3f}\n"
    _write(out / "report.json", canonical_dumps(report, indent=2) + "\n")
    _write(out / "report.txt", text)
    if not args.quiet:
        sys.stdout.write(text)
    return EXIT_OK


# --- align ------------------------------------------------------------------

def cmd_align(args) -> int:
    ref_panel = read_panel(args.reference)
    cfg = ref_panel.config
    reference = dict(ref_panel.waves[0].positions)
    waves: list[WaveState] = []
    for path in args.waves:
        waves.extend(read_panel(path, cfg).waves)
    if not waves:
        raise ConfigError("no waves to align")
    aligned = align_sequence([dict(w.positions) for w in waves], reference)
    out_waves = tuple(WaveState(w.t, w.actors, pos, w.covariates) for w, pos in zip(waves, aligned))
    panel = Panel(out_waves, cfg)
    write_panel(panel, args.out)
    log.info("aligned %d wave(s) to %s", len(out_waves), args.reference)
    return EXIT_OK


# --- intervene --------------------------------------------------------------

def scenario_from(doc: dict, seed: int, replicates: int | None = None) -> Scenario:
    cfg = model_config_from(doc)
    theta = theta_from(_require(doc, "theta"), cfg, migration_from(doc.get("migration")))
    ivs = []
    for k, iv in enumerate(doc.get("interventions", [])):
        sel = dict(iv.get("selector", {}))
        if "covariate" in sel:
            sel["covariate"] = sel["covariate"] - 1
        m = iv["covariate"] - 1
        if m >= cfg.q:
            raise ConfigError(f"config: field 'interventions/{k}/covariate' exceeds q={cfg.q}")
        ivs.append(Intervention(time=iv["time"], covariate=m, value=iv["value"],
                                success_prob=iv.get("success_prob", 1.0), selector=Selector(**sel)))
    return Scenario(base=_seed_wave(doc, cfg, seed), theta=theta, cfg=cfg,
                    horizon=_require(doc, "horizon"),
                    replicates=replicates if replicates is not None else doc.get("replicates", 1),
                    interventions=tuple(ivs))


def cmd_intervene(args) -> int:
    doc = load_run_config(args.config)
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    scen = scenario_from(doc, seed, args.replicates)
    report = run_scenario(scen, RandomStreams(seed), threads=_threads(args))
    out = Path(args.out)
    _write(out / "prevalence.csv", rows_to_csv(report.rows()))
    _write(out / "metadata.json", canonical_dumps({
        "command": "intervene", "seed": seed, "replicates": scen.replicates,
        "horizon": scen.horizon, "model": config_dict(scen.cfg), "theta": doc["theta"],
        "interventions": doc.get("interventions", []), "warnings": report.warnings,
    }, indent=2) + "\n")
    return EXIT_OK


# --- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stepp", description="Simulate and fit STEPP models.")
    p.add_argument("--version", action="version", version=f"stepp {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", required=True, help="output directory (file for align)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=None,
                        help="worker processes (default: $STEPP_THREADS or 1)")
        sp.add_argument("--quiet", action="store_true")

    sp = sub.add_parser("simulate", help="simulate panels from a parameter vector")
    sp.add_argument("--config", required=True)
    sp.add_argument("--replicates", type=int, default=None)
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", help="maximum likelihood fit of a panel")
    sp.add_argument("--panel", required=True)
    sp.add_argument("--config", default=None)
    sp.add_argument("--null-params", default=None,
                    help="null parameter vector as a JSON file or inline JSON")
    common(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("align", help="Procrustes-align waves to a reference")
    sp.add_argument("--reference", required=True, help="panel file; its first wave is the reference")
    sp.add_argument("waves", nargs="+", help="panel files whose waves are aligned")
    common(sp)
    sp.set_defaults(func=cmd_align)

    sp = sub.add_parser("intervene", help="run an intervention scenario")
    sp.add_argument("--config", required=True)
    sp.add_argument("--replicates", type=int, default=None)
    common(sp)
    sp.set_defaults(func=cmd_intervene)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ModelError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
