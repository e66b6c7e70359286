"""Command line front end.

Three subcommands: ``analyze`` runs estimators on a subject-level CSV,
``simulate`` runs a Monte Carlo study, ``truth`` evaluates the oracle
estimands of a scenario.  All randomness flows from the config seed (or the
--seed override); --threads changes speed only, never results.

Exit codes: 0 success, 2 config or schema error, 3 estimation failure,
4 degenerate trimming or bootstrap.
"""

from __future__ import annotations

import argparse
import json
import pathlib
import sys
import time

import numpy as np

from .analysis import parse_analysis_config, run_analysis, write_report
from .exceptions import (
    BootstrapDegenerateError,
    CipwrError,
    ConfigError,
    MonteCarloDegenerateError,
    TrimDegenerateError,
)
from .simulate import (
    ScenarioConfig,
    run_monte_carlo,
    setting_one_config,
    setting_two_config,
    truth_oracle,
)

EXIT_CONFIG = 2
EXIT_ESTIMATION = 3
EXIT_DEGENERATE = 4


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError([("", f"cannot read config {path}: {exc}")]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([("", f"config is not valid JSON: {exc}")]) from None


def _scenario_from_config(raw) -> tuple[ScenarioConfig, dict]:
    """Build a ScenarioConfig from a simulation config mapping.

    ``parameters`` either spells out the scenario fields or names a preset:
    {"preset": "one", "strength": ..., "censoring": ..., "target": ...} or
    {"preset": "two", "scenario": 1 | 2}.
    """
    errors = []
    if not isinstance(raw, dict):
        raise ConfigError([("", "config must be a JSON object")])
    params = raw.get("parameters")
    if not isinstance(params, dict):
        raise ConfigError([("/parameters", "missing parameters object")])
    n = raw.get("n", 1500)
    seed = raw.get("seed", 0)
    misspec = raw.get("misspec", [])
    if not isinstance(n, int) or n < 2:
        errors.append(("/n", "n must be an integer >= 2"))
    if not isinstance(seed, int):
        errors.append(("/seed", "seed must be an integer"))
    if not isinstance(misspec, list):
        errors.append(("/misspec", "expected a list"))
        misspec = []
    if errors:
        raise ConfigError(errors)
    try:
        if "preset" in params:
            preset = params["preset"]
            if preset == "one":
                cfg = setting_one_config(
                    strength=params.get("strength", "weak"),
                    censoring=params.get("censoring", "covariate"),
                    target=params.get("target", 0.3),
                    n=n, seed=seed, misspec=misspec,
                )
            elif preset == "two":
                cfg = setting_two_config(
                    scenario=params.get("scenario", 1),
                    n=n, seed=seed, misspec=misspec,
                )
            else:
                raise ConfigError([("/parameters/preset", "expected 'one' or 'two'")])
        else:
            body = dict(params)
            body.setdefault("setting", raw.get("setting"))
            body["n"] = n
            body["seed"] = seed
            body["misspec"] = misspec
            cfg = ScenarioConfig.from_dict(body)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError([("/parameters", str(exc))]) from None
    if raw.get("setting") is not None and raw["setting"] != cfg.setting:
        raise ConfigError([("/setting", f"config names setting {raw['setting']!r} "
                            f"but parameters describe {cfg.setting!r}")])
    return cfg, raw


def cmd_analyze(args) -> int:
    raw = _load_json(args.config)
    if args.seed is not None:
        raw = {**raw, "seed": args.seed}
    config = parse_analysis_config(raw)
    report = run_analysis(config)
    out = write_report(report, args.out)
    print(f"wrote {out / 'results.csv'}")
    failed = report.manifest["estimators_failed"]
    if failed:
        print(f"estimators failed: {', '.join(failed)}", file=sys.stderr)
        if len(failed) == len(config.estimators):
            return EXIT_ESTIMATION
    return 0


def cmd_simulate(args) -> int:
    raw = _load_json(args.config)
    if args.seed is not None:
        raw = {**raw, "seed": args.seed}
    cfg, raw = _scenario_from_config(raw)
    nrep = raw.get("nrep", 100)
    if not isinstance(nrep, int) or nrep < 2:
        raise ConfigError([("/nrep", "nrep must be an integer >= 2")])
    methods = tuple(raw.get("estimators", ("cipwr",)))
    ci_methods = raw.get("ci_methods", {"cipwr": "sandwich"} if "cipwr" in methods else {})
    truth_draws = raw.get("truth_draws", 1_000_000)

    t_start = time.perf_counter()
    truths = truth_oracle(cfg, num_draws=truth_draws, seed=cfg.seed)
    table = run_monte_carlo(
        cfg, num_replicates=nrep, truths=truths, methods=methods,
        ci_methods=ci_methods, seed=cfg.seed, n_jobs=args.threads,
    )
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table.to_dataframe().to_csv(out / "metrics.csv", index=False)
    manifest = {
        "config": {**raw, "parameters": cfg.to_dict()},
        "seed": cfg.seed,
        "nrep": nrep,
        "replicates_failed": table.num_failed,
        "truths": [float(v) for v in truths.arm_survival],
        "truth_mc_se": [float(v) for v in truths.mc_se],
        "versions": _versions(),
        "wall_time_seconds": time.perf_counter() - t_start,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {out / 'metrics.csv'}")
    return 0


def cmd_truth(args) -> int:
    raw = _load_json(args.config)
    if args.seed is not None:
        raw = {**raw, "seed": args.seed}
    cfg, raw = _scenario_from_config(raw)
    result = truth_oracle(cfg, num_draws=args.draws, seed=cfg.seed)
    lines = []
    for j, (mu, se) in enumerate(zip(result.arm_survival, result.mc_se), start=1):
        line = f"arm {j}: survival {mu:.6f}  risk {1 - mu:.6f}  oracle se {se:.2e}"
        print(line)
        lines.append(line)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "arm_survival": [float(v) for v in result.arm_survival],
        "arm_risk": [float(1 - v) for v in result.arm_survival],
        "oracle_se": [float(v) for v in result.mc_se],
        "num_draws": result.num_draws,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
    }
    with open(out / "truths.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {out / 'truths.json'}")
    return 0


def _versions() -> dict:
    import pandas
    import scipy

    from . import __version__

    return {
        "cipwr": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pandas.__version__,
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cipwr",
        description="Treatment-specific survival at a horizon from censored cohorts",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    analyze = sub.add_parser("analyze", help="run estimators on a CSV dataset")
    analyze.add_argument("--config", required=True, help="analysis config JSON")
    analyze.add_argument("--out", required=True, help="output directory")
    analyze.add_argument("--seed", type=int, default=None, help="override config seed")
    analyze.add_argument("--threads", type=int, default=1,
                         help="worker count (never affects results)")
    analyze.set_defaults(func=cmd_analyze)

    simulate = sub.add_parser("simulate", help="run a Monte Carlo study")
    simulate.add_argument("--config", required=True, help="scenario config JSON")
    simulate.add_argument("--out", required=True, help="output directory")
    simulate.add_argument("--seed", type=int, default=None, help="override config seed")
    simulate.add_argument("--threads", type=int, default=1,
                          help="worker count (never affects results)")
    simulate.set_defaults(func=cmd_simulate)

    truth = sub.add_parser("truth", help="evaluate oracle estimands of a scenario")
    truth.add_argument("--config", required=True, help="scenario config JSON")
    truth.add_argument("--out", required=True, help="output directory")
    truth.add_argument("--draws", type=int, default=1_000_000,
                       help="oracle Monte Carlo draws")
    truth.add_argument("--seed", type=int, default=None, help="override config seed")
    truth.add_argument("--threads", type=int, default=1,
                       help="worker count (never affects results)")
    truth.set_defaults(func=cmd_truth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrimDegenerateError, BootstrapDegenerateError,
            MonteCarloDegenerateError) as exc:
        print(f"degenerate: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except CipwrError as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
