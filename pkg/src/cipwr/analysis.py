"""CSV-driven analysis: config validation, dataset IO, trimming, reports.

The analyze workflow reads a subject-level CSV, optionally trims propensity
tails, runs the requested estimators, attaches confidence intervals, and
writes three files: a results table (one row per method and quantity), a
long-format diagnostics table, and a JSON manifest.  Result and diagnostics
files are byte-identical across reruns of the same config and seed; only the
manifest carries wall-clock time.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .data import Dataset
from .design import DesignSpec
from .estimators import (
    METHODS,
    PipelineSpec,
    fit_nuisances,
    result_quantities,
    run_pipeline,
)
from .exceptions import CipwrError, ConfigError, TrimDegenerateError
from .inference import bootstrap, cipwr_sandwich, wald_ci

CI_METHODS = ("auto", "sandwich", "bootstrap", "none")
TIME_MODES = ("observation", "observed_censoring")


@dataclass(frozen=True)
class AnalysisConfig:
    input: str
    arm_column: str
    event_time_column: str
    censor_time_column: str
    covariate_columns: tuple
    horizon: float
    estimators: tuple
    designs: DesignSpec
    trimming: bool = False
    ci_method: str = "auto"
    ci_level: float = 0.95
    bootstrap_replicates: int = 200
    seed: int = 0
    time_mode: str = "observation"
    hajek_pseudo: bool = False


def _require(raw, key, pointer, errors, kind=None):
    if key not in raw:
        errors.append((f"{pointer}/{key}", "missing required key"))
        return None
    value = raw[key]
    if kind is not None and not isinstance(value, kind):
        names = kind if isinstance(kind, tuple) else (kind,)
        errors.append(
            (f"{pointer}/{key}", f"expected {'/'.join(k.__name__ for k in names)}")
        )
        return None
    return value


def parse_analysis_config(raw: dict) -> AnalysisConfig:
    """Validate a config mapping; raises ConfigError listing every problem
    with a JSON-pointer path."""
    errors = []
    if not isinstance(raw, dict):
        raise ConfigError([("", "config must be a JSON object")])
    path = _require(raw, "input", "", errors, str)
    columns = _require(raw, "columns", "", errors, dict)
    col = {}
    if columns is not None:
        for key in ("arm", "event_time", "censor_time"):
            col[key] = _require(columns, key, "/columns", errors, str)
        cov = _require(columns, "covariates", "/columns", errors, list)
        if cov is not None:
            if not cov or not all(isinstance(c, str) for c in cov):
                errors.append(("/columns/covariates", "need a nonempty list of column names"))
                cov = None
        col["covariates"] = cov
    horizon = _require(raw, "horizon", "", errors, (int, float))
    if horizon is not None and not horizon > 0:
        errors.append(("/horizon", "horizon must be positive"))
    estimators = _require(raw, "estimators", "", errors, list)
    if estimators is not None:
        if not estimators:
            errors.append(("/estimators", "need at least one estimator"))
        for i, name in enumerate(estimators):
            if name not in METHODS:
                errors.append(
                    (f"/estimators/{i}",
                     f"unknown estimator {name!r}; options: {sorted(METHODS)}")
                )
    designs_raw = _require(raw, "designs", "", errors, dict)
    designs = None
    if designs_raw is not None and col.get("covariates"):
        parts = {}
        for part in ("outcome", "treatment", "censoring"):
            terms = _require(designs_raw, part, "/designs", errors, list)
            parts[part] = tuple(terms) if terms is not None else None
        if all(v is not None for v in parts.values()):
            try:
                designs = DesignSpec(
                    outcome_terms=parts["outcome"],
                    treatment_terms=parts["treatment"],
                    censoring_terms=parts["censoring"],
                    covariate_dim=len(col["covariates"]),
                )
            except CipwrError as exc:
                errors.append(("/designs", str(exc)))

    trimming = raw.get("trimming", False)
    if not isinstance(trimming, bool):
        errors.append(("/trimming", "expected true or false"))
        trimming = False
    ci = raw.get("ci", {})
    ci_method, level, breps = "auto", 0.95, 200
    if not isinstance(ci, dict):
        errors.append(("/ci", "expected an object"))
    else:
        ci_method = ci.get("method", "auto")
        if ci_method not in CI_METHODS:
            errors.append(("/ci/method", f"expected one of {CI_METHODS}"))
        level = ci.get("level", 0.95)
        if not isinstance(level, (int, float)) or not 0 < level < 1:
            errors.append(("/ci/level", "level must be in (0, 1)"))
        breps = ci.get("bootstrap_replicates", 200)
        if not isinstance(breps, int) or (
            ci_method in ("auto", "bootstrap") and breps < 2
        ):
            errors.append(("/ci/bootstrap_replicates", "need an integer >= 2"))
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        errors.append(("/seed", "seed must be an integer"))
        seed = 0
    time_mode = raw.get("time_mode", "observation")
    if time_mode not in TIME_MODES:
        errors.append(("/time_mode", f"expected one of {TIME_MODES}"))
    hajek = raw.get("hajek_pseudo", False)
    if not isinstance(hajek, bool):
        errors.append(("/hajek_pseudo", "expected true or false"))
        hajek = False
    if errors:
        raise ConfigError(errors)
    return AnalysisConfig(
        input=path,
        arm_column=col["arm"],
        event_time_column=col["event_time"],
        censor_time_column=col["censor_time"],
        covariate_columns=tuple(col["covariates"]),
        horizon=float(horizon),
        estimators=tuple(estimators),
        designs=designs,
        trimming=trimming,
        ci_method=ci_method,
        ci_level=float(level),
        bootstrap_replicates=breps,
        seed=seed,
        time_mode=time_mode,
        hajek_pseudo=hajek,
    )


def read_dataset_csv(path, config: AnalysisConfig) -> Dataset:
    """Load a subject-level CSV into a Dataset.

    An empty event_time cell means the event was never observed before
    censoring; an empty censor_time cell means the event came first.
    """
    # the default float parser is off in the last bit or two; round_trip
    # keeps write_dataset_csv -> read_dataset_csv exact
    frame = pd.read_csv(path, float_precision="round_trip")
    missing = [
        c
        for c in (config.arm_column, config.event_time_column,
                  config.censor_time_column, *config.covariate_columns)
        if c not in frame.columns
    ]
    if missing:
        raise ConfigError(
            [("/columns", f"column {c!r} not present in {path}") for c in missing]
        )
    try:
        cov = frame[list(config.covariate_columns)].to_numpy(dtype=float)
    except (ValueError, TypeError) as exc:
        raise ConfigError(
            [("/columns/covariates", f"non-numeric covariate data: {exc}")]
        ) from None
    arms = frame[config.arm_column].to_numpy()
    event = pd.to_numeric(frame[config.event_time_column], errors="coerce").to_numpy(dtype=float)
    censor = pd.to_numeric(frame[config.censor_time_column], errors="coerce").to_numpy(dtype=float)
    raw_event = frame[config.event_time_column]
    raw_censor = frame[config.censor_time_column]
    bad = [
        ("/columns/event_time", f"row {i}: unparseable value {v!r}")
        for i, v in enumerate(raw_event)
        if not _blank(v) and np.isnan(event[i])
    ] + [
        ("/columns/censor_time", f"row {i}: unparseable value {v!r}")
        for i, v in enumerate(raw_censor)
        if not _blank(v) and np.isnan(censor[i])
    ]
    if bad:
        raise ConfigError(bad)
    return Dataset.from_arrays(cov, arms, event, censor, config.horizon)


def _blank(value) -> bool:
    return value is None or (isinstance(value, float) and np.isnan(value)) or (
        isinstance(value, str) and value.strip() == ""
    )


def write_dataset_csv(path, ds: Dataset, config: AnalysisConfig | None = None):
    """Inverse of read_dataset_csv; absent times become empty cells."""
    if config is None:
        cov_names = [f"x{k + 1}" for k in range(ds.covariate_dim)]
        arm_c, ev_c, cn_c = "arm", "event_time", "censor_time"
    else:
        cov_names = list(config.covariate_columns)
        arm_c, ev_c, cn_c = (
            config.arm_column, config.event_time_column, config.censor_time_column,
        )
    frame = pd.DataFrame(ds.covariates, columns=cov_names)
    frame[arm_c] = ds.arms
    frame[ev_c] = [
        "" if not np.isfinite(t) else repr(float(t)) for t in ds.event_times
    ]
    frame[cn_c] = [
        "" if not np.isfinite(t) else repr(float(t)) for t in ds.censor_times
    ]
    frame.to_csv(path, index=False, float_format=None)


def trim_lopez_gutman(ds: Dataset, propensity) -> tuple[Dataset, int]:
    """One-shot rectangular propensity trimming.

    For every arm j the retained interval is [max over arm groups of the
    within-group minimum of the j-th propensity column, min over groups of
    the within-group maximum]; subjects must fall inside the interval for
    every column to stay.  Raises TrimDegenerateError when the retained set
    loses an entire arm (an empty interval empties every arm).
    """
    pi = np.asarray(propensity, dtype=float)
    if pi.shape != (ds.n, ds.num_arms):
        raise ValueError(f"propensity must be (n, J) = ({ds.n}, {ds.num_arms})")
    keep = np.ones(ds.n, dtype=bool)
    for j in range(ds.num_arms):
        col = pi[:, j]
        lows = [col[ds.arms == g].min() for g in range(1, ds.num_arms + 1)]
        highs = [col[ds.arms == g].max() for g in range(1, ds.num_arms + 1)]
        low, high = max(lows), min(highs)
        keep &= (col >= low) & (col <= high)
    removed = int(ds.n - keep.sum())
    for g in range(1, ds.num_arms + 1):
        if not np.any(keep & (ds.arms == g)):
            raise TrimDegenerateError(
                f"trimming removed every subject in arm {g} "
                f"({removed} of {ds.n} subjects excluded)"
            )
    return ds.subset(np.flatnonzero(keep)), removed


@dataclass(frozen=True)
class AnalysisReport:
    results: pd.DataFrame
    diagnostics: pd.DataFrame
    manifest: dict


def _result_rows(method, res, ses, level, ci_tag):
    rows = []
    quantities = result_quantities(res)
    flags = ";".join(res.flags)
    for name, value in quantities.items():
        se = ses.get(name, np.nan)
        if np.isnan(se):
            lo = hi = np.nan
            row_flags = flags
        else:
            lo, hi = wald_ci(value, se, level)
            row_flags = ";".join(filter(None, [flags, f"ci:{ci_tag}"]))
        rows.append(
            {
                "method": method,
                "quantity": name,
                "estimate": value,
                "se": se,
                "ci_low": lo,
                "ci_high": hi,
                "flags": row_flags,
            }
        )
    return rows


def run_analysis(config: AnalysisConfig, dataset: Dataset | None = None) -> AnalysisReport:
    """Execute the full analyze workflow.

    Per-method estimation errors become rows flagged ``error:<Type>`` so the
    remaining estimators still report; errors in shared stages (loading,
    nuisance fitting, trimming, bootstrap) propagate.
    """
    t_start = time.perf_counter()
    ds = read_dataset_csv(config.input, config) if dataset is None else dataset
    n_loaded = ds.n

    removed = 0
    if config.trimming:
        nuis = fit_nuisances(
            ds,
            PipelineSpec(designs=config.designs, methods=("ipw",),
                         time_mode=config.time_mode),
        )
        ds, removed = trim_lopez_gutman(ds, nuis.propensity)

    spec = PipelineSpec(
        designs=config.designs,
        methods=config.estimators,
        time_mode=config.time_mode,
        hajek_pseudo=config.hajek_pseudo,
    )
    nuisances = fit_nuisances(ds, spec)
    results, errors = {}, {}
    for method in config.estimators:
        try:
            results[method] = METHODS[method](ds, nuisances, spec)
        except CipwrError as exc:
            errors[method] = exc

    ses = {m: {} for m in results}
    ci_tag = {m: "none" for m in results}
    if config.ci_method in ("auto", "sandwich") and "cipwr" in results:
        sw = cipwr_sandwich(
            ds, config.designs, results["cipwr"],
            propensity_fit=nuisances.propensity_fit,
            censoring_fits=nuisances.censoring_fits,
            time_mode=config.time_mode,
        )
        ses["cipwr"] = sw.quantity_se()
        ci_tag["cipwr"] = "sandwich"
    boot_methods = [
        m for m in results
        if (config.ci_method == "bootstrap")
        or (config.ci_method == "auto" and ci_tag[m] == "none")
    ]
    if boot_methods:
        boot_spec = dataclasses.replace(spec, methods=tuple(boot_methods))
        bs = bootstrap(
            ds, boot_spec,
            num_replicates=config.bootstrap_replicates,
            seed=config.seed, level=config.ci_level,
        )
        for m in boot_methods:
            ses[m] = {q: iv.se for q, iv in bs.tables[m].items()}
            ci_tag[m] = "bootstrap"

    rows = []
    for method in config.estimators:
        if method in results:
            rows.extend(
                _result_rows(method, results[method], ses[method],
                             config.ci_level, ci_tag[method])
            )
        else:
            exc = errors[method]
            rows.append(
                {
                    "method": method,
                    "quantity": "error",
                    "estimate": np.nan,
                    "se": np.nan,
                    "ci_low": np.nan,
                    "ci_high": np.nan,
                    "flags": f"error:{type(exc).__name__}:{exc}",
                }
            )
    results_frame = pd.DataFrame(
        rows, columns=["method", "quantity", "estimate", "se",
                       "ci_low", "ci_high", "flags"]
    )

    diag_rows = [
        {"section": "data", "method": "", "arm": "", "name": "subjects_loaded",
         "value": float(n_loaded)},
        {"section": "data", "method": "", "arm": "", "name": "subjects_analyzed",
         "value": float(ds.n)},
        {"section": "trim", "method": "", "arm": "", "name": "subjects_removed",
         "value": float(removed)},
        {"section": "censoring", "method": "", "arm": "all",
         "name": "censored_fraction",
         "value": float(np.mean(ds.response_observed == 0))},
    ]
    for j in range(1, ds.num_arms + 1):
        mask = ds.arm_mask(j)
        diag_rows.append(
            {"section": "censoring", "method": "", "arm": str(j),
             "name": "censored_fraction",
             "value": float(np.mean(ds.response_observed[mask] == 0))}
        )
        diag_rows.append(
            {"section": "data", "method": "", "arm": str(j),
             "name": "subjects", "value": float(mask.sum())}
        )
    for method, res in results.items():
        for key in ("effective_sample_size", "min_weight", "max_weight"):
            values = res.diagnostics.get(key)
            if values is None:
                continue
            for j, value in enumerate(values, start=1):
                diag_rows.append(
                    {"section": "weights", "method": method, "arm": str(j),
                     "name": key, "value": float(value)}
                )
    diagnostics = pd.DataFrame(
        diag_rows, columns=["section", "method", "arm", "name", "value"]
    )

    manifest = {
        "config": _config_echo(config),
        "seed": config.seed,
        "subjects_loaded": n_loaded,
        "subjects_analyzed": ds.n,
        "trimmed": removed,
        "estimators_failed": sorted(errors),
        "versions": _versions(),
        "wall_time_seconds": time.perf_counter() - t_start,
    }
    return AnalysisReport(results_frame, diagnostics, manifest)


def _config_echo(config: AnalysisConfig) -> dict:
    echo = dataclasses.asdict(config)
    echo["designs"] = {
        "outcome": [t.label() for t in config.designs.outcome_terms],
        "treatment": [t.label() for t in config.designs.treatment_terms],
        "censoring": [t.label() for t in config.designs.censoring_terms],
    }
    return echo


def _versions() -> dict:
    import scipy

    from . import __version__

    return {
        "cipwr": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
    }


def write_report(report: AnalysisReport, out_dir):
    """Write results.csv, diagnostics.csv, and manifest.json into out_dir."""
    import pathlib

    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.results.to_csv(out / "results.csv", index=False)
    report.diagnostics.to_csv(out / "diagnostics.csv", index=False)
    with open(out / "manifest.json", "w") as fh:
        json.dump(report.manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out
