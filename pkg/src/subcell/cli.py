"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 input error, 4 plan
unsatisfiable within the search cap.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .antenna_planner import PlannerConfig, PlannerError, UnsatisfiablePlan, plan
from .config import ConfigError, RunConfig, RunManifest, config_digest, load_config
from .harness import (TABLE2, HarnessError, compare_systems, read_trials_csv,
                      run_bdbf_experiment, synth_dataset, write_results_csv,
                      write_trials_csv)
from .mginf_queue import (ArrivalProfile, ConcurrencyModel, QueueDomainError,
                          adequacy_curve, offered_load_grid)
from .phasefit import (PhaseTypeDist, PhaseTypeError, dump_dist, empht_fit,
                       read_durations, DurationSamples)

log = logging.getLogger("subcell")

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_UNSAT = 0, 2, 3, 4
FIT_SEED = 20240


class InputError(Exception):
    pass


def _outdir(path: str | None) -> Path:
    out = Path(path or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(cfg: RunConfig, *sections: str):
    for name in sections:
        if getattr(cfg, name) is None:
            raise ConfigError(f"{name}: section required for this command")


def _seed(args, cfg: RunConfig | None = None, default: int = FIT_SEED) -> int:
    if args.seed is not None:
        return args.seed
    if cfg is not None and cfg.seed is not None:
        return cfg.seed
    return default


def _service(cfg: RunConfig, seed: int):
    """Fitted (or given) service distribution and, for synthetic data, its
    arrival profile."""
    d = cfg.durations
    if d.alpha is not None:
        try:
            return PhaseTypeDist(np.array(d.alpha, float), np.array(d.rate_matrix, float)), None
        except PhaseTypeError as exc:
            raise ConfigError(f"durations: {exc}") from None
    profile = None
    if d.path is not None:
        samples = read_durations(cfg.base_dir / d.path)
    elif d.samples is not None:
        samples = DurationSamples(d.samples)
    else:
        if d.table2_set not in TABLE2:
            raise ConfigError(f"durations.table2_set: must be one of {sorted(TABLE2)}")
        samples, profile = synth_dataset(TABLE2[d.table2_set], seed)
    fit = empht_fit(samples, m=d.m, max_iters=d.max_iters, seed=seed)
    if fit.status != "ok":
        for msg in fit.messages:
            log.warning("fit: %s", msg)
    return fit.dist, profile


def _model(cfg: RunConfig, seed: int) -> ConcurrencyModel:
    _require(cfg, "durations")
    dist, profile = _service(cfg, seed)
    if cfg.arrivals is not None:
        try:
            profile = ArrivalProfile.from_dict(cfg.arrivals)
        except (QueueDomainError, TypeError, ValueError) as exc:
            raise ConfigError(f"arrivals: {exc}") from None
    if profile is None:
        raise ConfigError("arrivals: section required unless durations.table2_set is used")
    return ConcurrencyModel(profile, dist)


def _manifest(name: str, cfg: RunConfig | None, seed) -> RunManifest:
    doc = cfg.to_dict() if cfg is not None else {}
    return RunManifest(name, config_digest(doc), seed, config=doc)


# ---------------------------------------------------------------------------

def cmd_fit_ph(args) -> int:
    try:
        samples = read_durations(args.input)
    except OSError as exc:
        raise InputError(f"{args.input}: {exc.strerror}") from None
    fit = empht_fit(samples, m=args.m, seed=_seed(args))
    for msg in fit.messages:
        print(f"warning: {msg}", file=sys.stderr)
    out = Path(args.out or "ph_fit.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    dump_dist(fit.dist, out, fit.loglik)
    print(f"fitted m={args.m} in {fit.n_iter} iterations, loglik {fit.loglik[-1]:.6f} -> {out}")
    return EXIT_OK


def cmd_queue_analyze(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    model = _model(cfg, seed)
    pc = cfg.planner or PlannerConfig()
    out = _outdir(args.out)
    man = _manifest("queue-analyze", cfg, seed)

    ts = np.linspace(0.0, model.profile.horizon, 4 * model.profile.n_slots + 1)
    v = offered_load_grid(model, ts)
    with open(out / "offered_load.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_min", "offered_load"])
        w.writerows([repr(float(t)), repr(float(x))] for t, x in zip(ts, v))
    n = np.arange(1, args.n_max + 1)
    curve = adequacy_curve(model, n, pc.qos, pc.strict)
    _write_curve(out / "adequacy.csv", n, curve, pc)
    man.outputs = ["offered_load.csv", "adequacy.csv"]
    man.finish(out / "manifest.json")
    print(f"peak offered load {v.max():.4f}; E[P] at N_U={args.n_max}: {curve[-1]:.4f}")
    return EXIT_OK


def _write_curve(path, n, curve, pc: PlannerConfig):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n_u", "n_st", "mean_adequacy"])
        for k, p in zip(n, curve):
            w.writerow([int(k), pc.n_st_for(int(k)), repr(float(p))])


def cmd_plan(args) -> int:
    cfg = load_config(args.config)
    _require(cfg, "planner")
    seed = _seed(args, cfg)
    model = _model(cfg, seed)
    out = _outdir(args.out)
    man = _manifest("plan", cfg, seed)
    rep = plan(model, cfg.planner, cfg.selector, n_curve=args.n_max)
    _write_curve(out / "adequacy.csv", np.arange(1, len(rep.curve) + 1), rep.curve, cfg.planner)
    doc = rep.to_dict()
    doc["selector"] = cfg.selector
    (out / "plan.json").write_text(json.dumps(doc, indent=2) + "\n")
    man.outputs = ["plan.json", "adequacy.csv"]
    chosen = doc[f"n_st_{cfg.selector}"]
    if chosen is None:
        man.status = "unsatisfiable"
        man.warnings = rep.errors
        man.finish(out / "manifest.json")
        raise UnsatisfiablePlan(cfg.planner.cap, f"{cfg.selector} rule")
    man.finish(out / "manifest.json")
    print(f"N_ST*={chosen} N_U*={doc[f'n_u_{cfg.selector}']} N_IT={doc['n_it']}")
    return EXIT_OK


def _scenario(args, cfg: RunConfig):
    _require(cfg, "scenario")
    sc = cfg.scenario
    changes = {}
    if args.seed is not None:
        changes["master_seed"] = args.seed
    elif cfg.seed is not None:
        changes["master_seed"] = cfg.seed
    if args.trials is not None:
        changes["n_trials"] = args.trials
    try:
        return dataclasses.replace(sc, **changes)
    except HarnessError as exc:
        raise ConfigError(f"scenario: {exc}") from None


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    sc = _scenario(args, cfg)
    out = _outdir(args.out)
    run_cfg = dataclasses.replace(cfg, scenario=sc)
    man = _manifest("simulate", run_cfg, sc.master_seed)
    res = run_bdbf_experiment(sc, jobs=args.jobs)
    write_results_csv(res, out / "results.csv")
    write_trials_csv(res, out / "trials.csv")
    man.outputs = ["results.csv", "trials.csv"]
    man.status = res.status
    man.warnings = list(res.warnings)
    man.finish(out / "manifest.json")
    print(f"{sc.n_trials} trials, failure rate {res.failure_rate:.2%} -> {out / 'results.csv'}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    sc = _scenario(args, cfg)
    out = _outdir(args.out)
    man = _manifest("compare", dataclasses.replace(cfg, scenario=sc), sc.master_seed)
    if args.trials_file:
        try:
            res = read_trials_csv(sc, args.trials_file)
        except OSError as exc:
            raise InputError(f"{args.trials_file}: {exc.strerror}") from None
    else:
        res = run_bdbf_experiment(sc, jobs=args.jobs)
    rows = compare_systems(res, args.eps_a, args.eps_b)
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["eps_sq_a", "eps_sq_b", "zeta_watts", "mean_diff", "se_diff",
                    "n_pairs", "a_exceeds_b", "significant_2se"])
        for r in rows:
            w.writerow([repr(r.eps_a), repr(r.eps_b), repr(r.zeta), repr(r.mean_diff),
                        repr(r.se_diff), r.n_pairs, r.holds, r.significant])
    failing = [r for r in rows if not r.holds]
    man.outputs = ["comparison.csv"]
    man.warnings = [f"a <= b at eps_a={r.eps_a}, eps_b={r.eps_b}, zeta={r.zeta}" for r in failing]
    man.finish(out / "manifest.json")
    print(f"{len(rows) - len(failing)}/{len(rows)} cells with mean(a) > mean(b)")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--out", help="output file (fit-ph) or directory")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--trials", type=int, help="override scenario.n_trials")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="subcell", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fit-ph", parents=[common], help="fit a phase-type distribution")
    s.add_argument("input", help="one duration per line")
    s.add_argument("--m", type=int, default=4, help="number of phases")
    s.set_defaults(func=cmd_fit_ph)

    s = sub.add_parser("queue-analyze", parents=[common], help="offered load and adequacy")
    s.add_argument("--n-max", type=int, default=40)
    s.set_defaults(func=cmd_queue_analyze, needs_config=True)

    s = sub.add_parser("plan", parents=[common], help="size SAP and IAP antenna arrays")
    s.add_argument("--n-max", type=int, default=40, help="rows in the E[P] table")
    s.set_defaults(func=cmd_plan, needs_config=True)

    s = sub.add_parser("simulate", parents=[common], help="Monte-Carlo BDBF experiment")
    s.set_defaults(func=cmd_simulate, needs_config=True)

    s = sub.add_parser("compare", parents=[common], help="paired system a/b comparison")
    s.add_argument("--trials-file", help="trials.csv from a previous simulate run")
    s.add_argument("--eps-a", type=float)
    s.add_argument("--eps-b", type=float)
    s.set_defaults(func=cmd_compare, needs_config=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "needs_config", False) and not args.config:
            raise ConfigError("--config: required for this command")
        if args.jobs < 1:
            raise ConfigError("--jobs: must be >= 1")
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UnsatisfiablePlan as exc:
        print(f"unsatisfiable: {exc}", file=sys.stderr)
        return EXIT_UNSAT
    except (InputError, PhaseTypeError, QueueDomainError, PlannerError, HarnessError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
