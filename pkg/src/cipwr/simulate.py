"""Synthetic cohorts, oracle truths, and the Monte Carlo driver.

Two data-generating families are provided.  Setting one draws five
covariates, assigns one of three arms by a softmax model, draws the event
time from a logistic location model (so the implied model for I(T >= d) is
exactly a logistic regression), and censors with a Weibull proportional
hazards law.  Setting two uses two covariates, exponential censoring with
arm shifts, and a two-phase exponential event hazard whose covariate effects
flip sign at a phase-change time, so hazards cross and no proportional
hazards or logistic outcome model is exactly right.

Truths come from :func:`truth_oracle`, which simulates potential event times
with no treatment selection and no censoring and averages I(T >= d).

All randomness is derived from explicit seeds.  The Monte Carlo driver gives
every replicate its own spawned seed stream and aggregates in replicate
order, so results are identical for any worker count.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .data import Dataset
from .design import DesignSpec
from .estimators import PipelineSpec, result_quantities, run_pipeline
from .exceptions import CipwrError, MonteCarloDegenerateError, NoOpWarning

_TINY = 1e-12


@dataclass(frozen=True)
class CrossingHazards:
    """Two-phase exponential event law with sign-flipping covariate effects.

    Hazard before ``phase_change_time``: rate1_j * exp(a1_j . x); after:
    rate2_j * exp(a2_j . x) with a2 defaulting to -a1, so subjects on
    opposite sides of a1 . x = 0 trade places in risk ordering.
    """

    phase_change_time: float
    phase1_coefs: tuple
    phase1_rates: tuple
    phase2_rates: tuple
    phase2_coefs: tuple | None = None

    def coefs(self):
        a1 = np.asarray(self.phase1_coefs, dtype=float)
        a2 = -a1 if self.phase2_coefs is None else np.asarray(self.phase2_coefs, dtype=float)
        return a1, a2


@dataclass(frozen=True)
class ScenarioConfig:
    """Parameters of one synthetic scenario; ``setting`` is "one" or "two"."""

    setting: str
    n: int
    horizon: float
    treatment_coefs: tuple
    seed: int = 0
    misspec: frozenset = frozenset()
    # setting one
    outcome_locations: tuple | None = None   # per arm over (1, x1, x2, x3)
    outcome_scale: float = 7.0
    censoring_coefs: tuple | None = None     # per arm over (1, x1, x2, x5)
    weibull_rate: float = 0.01
    weibull_shape: float = 7.0
    # setting two
    crossing: CrossingHazards | None = None
    exp_censoring_rate: float | None = None
    exp_censoring_x: tuple | None = None     # (gamma1, gamma2)
    exp_censoring_arm: tuple | None = None   # per-arm log-rate shift

    def __post_init__(self):
        if self.setting not in ("one", "two"):
            raise ValueError(f"unknown setting {self.setting!r}")
        object.__setattr__(self, "misspec", frozenset(self.misspec))
        bad = self.misspec - {"outcome", "treatment", "censoring"}
        if bad:
            raise ValueError(f"unknown misspecification flags {sorted(bad)}")

    @property
    def num_arms(self) -> int:
        return len(self.treatment_coefs)

    @property
    def covariate_dim(self) -> int:
        return 5 if self.setting == "one" else 2

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["misspec"] = sorted(self.misspec)
        if self.crossing is not None:
            out["crossing"] = dataclasses.asdict(self.crossing)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioConfig":
        raw = dict(raw)

        def tup(x):
            if isinstance(x, (list, tuple)):
                return tuple(tup(v) for v in x)
            return x

        if raw.get("crossing") is not None:
            # JSON turns the nested coefficient tuples into lists
            fields = {k: tup(v) for k, v in raw["crossing"].items()}
            raw["crossing"] = CrossingHazards(**fields)
        raw["misspec"] = frozenset(raw.get("misspec", ()))
        for key in ("treatment_coefs", "outcome_locations", "censoring_coefs",
                    "exp_censoring_x", "exp_censoring_arm"):
            if raw.get(key) is not None:
                raw[key] = tup(raw[key])
        return cls(**raw)


def default_designs(cfg: ScenarioConfig, misspec=None) -> DesignSpec:
    """Working-model designs matched to the scenario, with requested parts
    degraded by dropping every term that touches x2."""
    if misspec is None:
        misspec = cfg.misspec
    if cfg.setting == "one":
        designs = DesignSpec(
            outcome_terms=("1", "x1", "x2", "x3"),
            treatment_terms=("1", "x1", "x2", "x4"),
            censoring_terms=("x1", "x2", "x5"),
            covariate_dim=5,
        )
    else:
        designs = DesignSpec(
            outcome_terms=("1", "x1", "x2", "x1^2", "x2^2", "x1*x2"),
            treatment_terms=("x1", "x2"),
            censoring_terms=("x1", "x2"),
            covariate_dim=2,
        )
    return apply_misspecification(designs, misspec)


def apply_misspecification(designs: DesignSpec, misspec) -> DesignSpec:
    """Drop the x2 terms from the flagged model parts.

    Flagging a part whose design never touches x2 is a no-op and warns.
    """
    misspec = frozenset(misspec)
    if not misspec:
        return designs
    terms = {
        "outcome": designs.outcome_terms,
        "treatment": designs.treatment_terms,
        "censoring": designs.censoring_terms,
    }
    for part in sorted(misspec):
        if not any(t.uses(1) for t in terms[part]):
            warnings.warn(
                f"{part} design has no x2 term to drop", NoOpWarning, stacklevel=2
            )
    return designs.drop_covariate(1, parts=tuple(sorted(misspec)))


def _softmax_rows(eta):
    eta = eta - eta.max(axis=1, keepdims=True)
    num = np.exp(eta)
    return num / num.sum(axis=1, keepdims=True)


def _sample_categorical(rng, probs):
    """Inverse-CDF draw per row; returns labels 1..J."""
    cum = np.cumsum(probs, axis=1)
    cum[:, -1] = 1.0
    u = rng.random(probs.shape[0])
    return 1 + (u[:, None] >= cum).sum(axis=1)


def _covariates_one(rng, n):
    x123 = rng.standard_normal((n, 3))
    x4 = (rng.random(n) < 0.4).astype(float)
    x5 = rng.uniform(-2.0, 2.0, n)
    return np.column_stack([x123, x4, x5])


def _event_times_one(cfg, rng, cov, arms):
    """Logistic-location event times for the given arm assignment."""
    beta = np.asarray(cfg.outcome_locations, dtype=float)
    basis = np.column_stack([np.ones(cov.shape[0]), cov[:, 0], cov[:, 1], cov[:, 2]])
    loc = np.einsum("np,np->n", basis, beta[arms - 1])
    u = np.clip(rng.random(cov.shape[0]), _TINY, 1.0 - _TINY)
    t = loc + cfg.outcome_scale * (np.log(u) - np.log1p(-u))
    return np.maximum(t, 1e-6)


def _censor_times_one(cfg, rng, cov, arms):
    gamma = np.asarray(cfg.censoring_coefs, dtype=float)
    basis = np.column_stack([np.ones(cov.shape[0]), cov[:, 0], cov[:, 1], cov[:, 4]])
    g = np.einsum("np,np->n", basis, gamma[arms - 1])
    e = np.maximum(-np.log1p(-rng.random(cov.shape[0])), _TINY)
    return (e / (cfg.weibull_rate * np.exp(g))) ** (1.0 / cfg.weibull_shape)


def _covariates_two(rng, n):
    return rng.standard_normal((n, 2))


def _event_times_two(cfg, rng, cov, arms):
    a1, a2 = cfg.crossing.coefs()
    b1 = np.asarray(cfg.crossing.phase1_rates, dtype=float)
    b2 = np.asarray(cfg.crossing.phase2_rates, dtype=float)
    rate1 = b1[arms - 1] * np.exp(np.einsum("np,np->n", cov, a1[arms - 1]))
    rate2 = b2[arms - 1] * np.exp(np.einsum("np,np->n", cov, a2[arms - 1]))
    e = np.maximum(-np.log1p(-rng.random(cov.shape[0])), _TINY)
    t0 = cfg.crossing.phase_change_time
    brk = rate1 * t0
    return np.where(e < brk, e / rate1, t0 + (e - brk) / rate2)


def _censor_times_two(cfg, rng, cov, arms):
    shift = np.asarray(cfg.exp_censoring_arm, dtype=float)
    g1, g2 = cfg.exp_censoring_x
    g = g1 * cov[:, 0] + g2 * cov[:, 1] + shift[arms - 1]
    e = np.maximum(-np.log1p(-rng.random(cov.shape[0])), _TINY)
    return e / (cfg.exp_censoring_rate * np.exp(g))


_PARTS = {
    "one": (_covariates_one, _event_times_one, _censor_times_one),
    "two": (_covariates_two, _event_times_two, _censor_times_two),
}


def generate_dataset(cfg: ScenarioConfig, seed) -> Dataset:
    """One synthetic cohort.  ``seed`` may be an int or a SeedSequence."""
    rng = np.random.default_rng(seed)
    covariates, events, censors = _PARTS[cfg.setting]
    cov = covariates(rng, cfg.n)
    basis = (
        np.column_stack([np.ones(cfg.n), cov[:, 0], cov[:, 1], cov[:, 3]])
        if cfg.setting == "one"
        else cov
    )
    probs = _softmax_rows(basis @ np.asarray(cfg.treatment_coefs, dtype=float).T)
    arms = _sample_categorical(rng, probs)
    t = events(cfg, rng, cov, arms)
    c = censors(cfg, rng, cov, arms)
    return Dataset.from_arrays(cov, arms, t, c, cfg.horizon, num_arms=cfg.num_arms)


@dataclass(frozen=True)
class TruthResult:
    """Oracle arm survivals with their Monte Carlo standard errors."""

    arm_survival: np.ndarray
    mc_se: np.ndarray
    num_draws: int

    def quantity_truths(self) -> dict[str, float]:
        mu = self.arm_survival
        out = {}
        for a in range(mu.size):
            out[f"survival_{a + 1}"] = float(mu[a])
            out[f"risk_{a + 1}"] = float(1.0 - mu[a])
        for a in range(mu.size):
            for b in range(a + 1, mu.size):
                out[f"contrast_{a + 1}_{b + 1}"] = float(mu[a] - mu[b])
        return out


def truth_oracle(cfg: ScenarioConfig, num_draws=1_000_000, seed=0) -> TruthResult:
    """Estimand values by brute force: potential event times for every arm
    with no selection and no censoring, averaged as I(T >= horizon)."""
    rng = np.random.default_rng(seed)
    covariates, events, _ = _PARTS[cfg.setting]
    cov = covariates(rng, int(num_draws))
    mu = np.empty(cfg.num_arms)
    for j in range(1, cfg.num_arms + 1):
        arms = np.full(int(num_draws), j, dtype=np.int64)
        t = events(cfg, rng, cov, arms)
        mu[j - 1] = float(np.mean(t >= cfg.horizon))
    se = np.sqrt(mu * (1.0 - mu) / num_draws)
    mu.flags.writeable = False
    se.flags.writeable = False
    return TruthResult(mu, se, int(num_draws))


def censored_fraction(ds: Dataset) -> float:
    """Share of subjects whose response at the horizon is unobserved."""
    return float(np.mean(ds.response_observed == 0))


def calibrate_censoring_offset(cfg: ScenarioConfig, target, *, probe_n=200_000,
                               seed=20_260_101, tol=0.002, max_iter=60):
    """Shift the censoring intercepts (setting one) or log-rate (setting two)
    until the censored-by-horizon share hits ``target``.

    Returns (adjusted_config, achieved_fraction).  The share is monotone in
    the shift, so plain bisection on a widening bracket suffices.
    """

    def shifted(offset):
        if cfg.setting == "one":
            coefs = tuple(
                (row[0] + offset,) + tuple(row[1:]) for row in cfg.censoring_coefs
            )
            return dataclasses.replace(cfg, censoring_coefs=coefs)
        return dataclasses.replace(
            cfg, exp_censoring_rate=cfg.exp_censoring_rate * float(np.exp(offset))
        )

    def frac(offset):
        probe = dataclasses.replace(shifted(offset), n=probe_n)
        return censored_fraction(generate_dataset(probe, seed))

    lo, hi = -1.0, 1.0
    for _ in range(60):
        if frac(lo) < target:
            break
        lo *= 2.0
    for _ in range(60):
        if frac(hi) > target:
            break
        hi *= 2.0
    offset = 0.0
    for _ in range(max_iter):
        offset = 0.5 * (lo + hi)
        f = frac(offset)
        if abs(f - target) <= tol:
            break
        if f < target:
            lo = offset
        else:
            hi = offset
    return shifted(offset), frac(offset)


# ---------------------------------------------------------------------------
# Frozen default scenarios.  Censoring intercepts were calibrated with
# calibrate_censoring_offset against the simulated censored-by-horizon share
# and outcome intercepts against the oracle truths; see the values' comments.
# ---------------------------------------------------------------------------

_TREATMENT_ONE = (
    (0.0, 0.4, -0.3, 0.3),
    (0.2, -0.3, 0.4, -0.3),
    (0.0, -0.1, -0.1, 0.0),
)

_OUTCOME_ONE = {
    "weak": (
        (134.26, 2.0, 2.0, 2.0),
        (130.0, 2.0, 2.0, 2.0),
        (126.06, 2.0, 2.0, 2.0),
    ),
    "strong": (
        (134.31, 7.0, 7.0, 7.0),
        (126.13, 7.0, 7.0, 7.0),
        (130.0, 7.0, 7.0, 7.0),
    ),
}

_CENSORING_SLOPES_ONE = {
    "covariate": (0.4, 0.4, 0.25),
    "heavy": (1.0, 1.0, 0.5),
    "random": (0.0, 0.0, 0.0),
}

# Calibrated intercepts keyed by (outcome strength, censoring kind, target
# censored share); all arms share the intercept.
_CENSORING_INTERCEPTS_ONE = {
    ("weak", "covariate", 0.2): -30.922,
    ("weak", "covariate", 0.3): -30.406,
    ("weak", "covariate", 0.4): -30.000,
    ("weak", "random", 0.3): -30.266,
    ("weak", "heavy", 0.4): -30.219,
    ("strong", "covariate", 0.3): -30.383,
}


def setting_one_config(strength="weak", censoring="covariate", target=0.3,
                       n=1500, seed=0, misspec=()) -> ScenarioConfig:
    """Calibrated three-arm scenario of the first simulation family."""
    key = (strength, censoring, target)
    if key not in _CENSORING_INTERCEPTS_ONE:
        raise KeyError(
            f"no calibrated intercept for {key}; run calibrate_censoring_offset"
        )
    g0 = _CENSORING_INTERCEPTS_ONE[key]
    slopes = _CENSORING_SLOPES_ONE[censoring]
    return ScenarioConfig(
        setting="one",
        n=n,
        horizon=130.0,
        seed=seed,
        misspec=frozenset(misspec),
        treatment_coefs=_TREATMENT_ONE,
        outcome_locations=_OUTCOME_ONE[strength],
        censoring_coefs=tuple((g0,) + slopes for _ in range(3)),
    )


# Setting two: treatment and censoring parameters follow the two published
# scenarios; the event law is the crossing-hazards construction above with
# rates tuned so the censored share lands near the published values.
_SETTING_TWO = {
    1: dict(
        treatment_coefs=((0.0, 0.0), (0.2, 0.0), (0.3, 0.0)),
        horizon=0.5,
        exp_censoring_rate=0.8,
        exp_censoring_x=(1.0, 0.0),
        exp_censoring_arm=(0.0, 0.2, 0.4),
        crossing=CrossingHazards(
            phase_change_time=0.25,
            phase1_coefs=((0.7, -0.4), (0.5, 0.5), (-0.6, 0.3)),
            phase1_rates=(1.15, 1.495, 2.07),
            phase2_rates=(2.07, 1.495, 1.15),
        ),
    ),
    2: dict(
        treatment_coefs=((0.0, 0.0), (0.2, 0.0), (0.3, 0.0)),
        horizon=0.3,
        exp_censoring_rate=0.7,
        exp_censoring_x=(-0.5, 0.5),
        exp_censoring_arm=(0.0, 0.4, 0.2),
        crossing=CrossingHazards(
            phase_change_time=0.15,
            phase1_coefs=((0.7, -0.4), (0.5, 0.5), (-0.6, 0.3)),
            phase1_rates=(3.6, 4.68, 6.48),
            phase2_rates=(6.48, 4.68, 3.6),
        ),
    ),
}


def setting_two_config(scenario=1, n=1500, seed=0, misspec=()) -> ScenarioConfig:
    params = _SETTING_TWO[scenario]
    return ScenarioConfig(
        setting="two", n=n, seed=seed, misspec=frozenset(misspec), **params
    )


# ---------------------------------------------------------------------------
# Monte Carlo driver
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsTable:
    """Aggregated operating characteristics, one row per method x quantity."""

    rows: tuple
    num_replicates: int
    num_failed: int

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame(list(self.rows))

    def lookup(self, method, quantity) -> dict:
        for row in self.rows:
            if row["method"] == method and row["quantity"] == quantity:
                return row
        raise KeyError((method, quantity))


def _mc_replicate(cfg, spec, ci_methods, level, child):
    from .inference import cipwr_sandwich, wald_ci

    try:
        ds = generate_dataset(cfg, child)
        results, nuisances = run_pipeline(ds, spec)
        out = {}
        for method, res in results.items():
            quantities = result_quantities(res)
            intervals = {}
            if ci_methods.get(method) == "sandwich":
                sw = cipwr_sandwich(
                    ds, spec.designs, res,
                    propensity_fit=nuisances.propensity_fit,
                    censoring_fits=nuisances.censoring_fits,
                    time_mode=spec.time_mode,
                )
                for name, se in sw.quantity_se().items():
                    lo, hi = wald_ci(quantities[name], se, level)
                    intervals[name] = (se, float(lo), float(hi))
            out[method] = (quantities, intervals)
        return out
    except CipwrError:
        return None


def run_monte_carlo(cfg: ScenarioConfig, *, num_replicates, truths,
                    methods=("cipwr",), ci_methods=None, level=0.95,
                    seed=None, n_jobs=1, time_mode="observation",
                    hajek_pseudo=False,
                    max_failure_fraction=0.05) -> MetricsTable:
    """Replicate the scenario and aggregate bias, spread, and coverage.

    ``truths`` is a TruthResult (or a sequence of per-arm survivals).
    ``ci_methods`` maps method tags to "sandwich" for analytic intervals;
    other methods get point estimates only.  Failed replicates are dropped
    in full (keeping methods paired) and counted; more than
    ``max_failure_fraction`` of them raises MonteCarloDegenerateError.
    RMSE is defined through bias and the (ddof=1) empirical SD, so
    rmse^2 = bias^2 + esd^2 holds exactly.
    """
    if seed is None:
        seed = cfg.seed
    ci_methods = dict(ci_methods or {})
    spec = PipelineSpec(
        designs=default_designs(cfg),
        methods=tuple(methods),
        time_mode=time_mode,
        hajek_pseudo=hajek_pseudo,
    )
    if isinstance(truths, TruthResult):
        truth_map = truths.quantity_truths()
    else:
        truth_map = TruthResult(
            np.asarray(truths, dtype=float), np.zeros(len(truths)), 0
        ).quantity_truths()

    children = np.random.SeedSequence(seed).spawn(num_replicates)
    if n_jobs != 1:
        from joblib import Parallel, delayed

        draws = Parallel(n_jobs=n_jobs)(
            delayed(_mc_replicate)(cfg, spec, ci_methods, level, child)
            for child in children
        )
    else:
        draws = [_mc_replicate(cfg, spec, ci_methods, level, child) for child in children]

    ok = [d for d in draws if d is not None]
    failed = num_replicates - len(ok)
    if failed > max_failure_fraction * num_replicates or not ok:
        raise MonteCarloDegenerateError(
            f"{failed} of {num_replicates} replicates failed"
        )

    rows = []
    for method in methods:
        for name, truth in truth_map.items():
            est = np.array([d[method][0][name] for d in ok])
            bias = float(np.mean(est) - truth)
            esd = float(np.std(est, ddof=1))
            row = {
                "method": method,
                "quantity": name,
                "truth": float(truth),
                "mean_estimate": float(np.mean(est)),
                "bias": bias,
                "esd": esd,
                "rmse": float(np.hypot(bias, esd)),
                "coverage": np.nan,
                "mean_se": np.nan,
                "num_replicates": len(ok),
                "num_failed": failed,
            }
            if ci_methods.get(method) == "sandwich":
                ses = np.array([d[method][1][name][0] for d in ok])
                lo = np.array([d[method][1][name][1] for d in ok])
                hi = np.array([d[method][1][name][2] for d in ok])
                row["coverage"] = float(np.mean((lo <= truth) & (truth <= hi)))
                row["mean_se"] = float(np.mean(ses))
            rows.append(row)
    return MetricsTable(tuple(rows), num_replicates, failed)
