"""Point estimators of treatment-specific survival at the horizon.

Every estimator returns the same shape of result: per-arm survival
probabilities mu_j = P(T >= d) under assignment to arm j, the antisymmetric
contrast matrix mu_j - mu_k (equivalently the risk difference of arm k versus
arm j), and weight diagnostics.  The estimators differ in which coarsening
mechanisms they adjust for:

================  ==========  =========  =================================
method            treatment    censoring  notes
================  ==========  =========  =================================
naive             no          no         complete-case arm means
ipw               yes         no         Horvitz-Thompson, biased when
                                         censoring removes responses
cipw              yes         yes        adds inverse uncensoring weight
cipwr             yes         yes        weighted outcome regression, then
                                         standardization over everyone
caipw_wang        yes         partial    IPCW from arm-level Kaplan-Meier,
                                         augmented; needs censoring
                                         independent of covariates
pseudo_ipw        yes         partial    jackknife pseudo-values from
                                         arm-level Kaplan-Meier; same
                                         restriction
================  ==========  =========  =================================
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import Dataset
from .design import DesignSpec, build_design
from .exceptions import EmptyCellError, PositivityError
from .glm import LogisticFit, MultinomialFit, fit_multinomial, fit_weighted_logistic, predict_propensity
from .survival import CensoringFit, fit_censoring_models, jackknife_pseudo, kaplan_meier

UNCENSOR_FLOOR = 1e-8


def contrasts_from_arms(arm_values) -> np.ndarray:
    """Antisymmetric matrix of pairwise differences value_j - value_k."""
    v = np.asarray(arm_values, dtype=float)
    return v[:, None] - v[None, :]


@dataclass(frozen=True)
class EstimateResult:
    """Point estimates plus weight diagnostics for one estimator."""

    method: str
    arm_survival: np.ndarray
    contrasts: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    outcome_fits: tuple[LogisticFit, ...] | None = None

    @property
    def arm_risk(self) -> np.ndarray:
        return 1.0 - self.arm_survival

    @property
    def flags(self) -> tuple[str, ...]:
        return tuple(self.diagnostics.get("flags", ()))


def result_quantities(result: EstimateResult) -> dict[str, float]:
    """Flatten a result into named scalars: survival and risk per arm, plus
    each ordered contrast survival_j - survival_k for j < k."""
    out = {}
    j = result.arm_survival.size
    for a in range(j):
        out[f"survival_{a + 1}"] = float(result.arm_survival[a])
        out[f"risk_{a + 1}"] = float(1.0 - result.arm_survival[a])
    for a in range(j):
        for b in range(a + 1, j):
            out[f"contrast_{a + 1}_{b + 1}"] = float(result.contrasts[a, b])
    return out


def _finish(method, mu, diagnostics, outcome_fits=None) -> EstimateResult:
    mu = np.asarray(mu, dtype=float)
    flags = list(diagnostics.get("flags", []))
    if np.any((mu < 0.0) | (mu > 1.0)):
        flags.append("arm_survival_out_of_range")
    diagnostics["flags"] = flags
    mu.flags.writeable = False
    return EstimateResult(method, mu, contrasts_from_arms(mu), diagnostics, outcome_fits)


def _weight_diags(diagnostics, weights_per_arm):
    ess, wmin, wmax = [], [], []
    for w in weights_per_arm:
        pos = w[w > 0]
        if pos.size == 0:
            ess.append(0.0)
            wmin.append(np.nan)
            wmax.append(np.nan)
        else:
            ess.append(float(pos.sum() ** 2 / np.sum(pos**2)))
            wmin.append(float(pos.min()))
            wmax.append(float(pos.max()))
    diagnostics["effective_sample_size"] = ess
    diagnostics["min_weight"] = wmin
    diagnostics["max_weight"] = wmax
    return diagnostics


def _check_propensity(ds, propensity):
    pi = np.asarray(propensity, dtype=float)
    if pi.shape != (ds.n, ds.num_arms):
        raise ValueError(
            f"propensity matrix must be (n, J) = ({ds.n}, {ds.num_arms}), got {pi.shape}"
        )
    if np.any(pi <= 0) or np.any(pi >= 1):
        bad = np.flatnonzero(np.any((pi <= 0) | (pi >= 1), axis=1))
        raise PositivityError(
            "propensity estimates outside (0, 1)", rows=bad.tolist()
        )
    return pi


def estimate_naive(ds: Dataset) -> EstimateResult:
    """Complete-case arm means: mean of I(T >= d) among observed responses."""
    mu = np.empty(ds.num_arms)
    weights = []
    for j in range(ds.num_arms):
        cell = ds.arm_mask(j + 1) & (ds.response_observed == 1)
        if not cell.any():
            raise EmptyCellError(f"arm {j + 1} has no observed responses")
        mu[j] = ds.survival_filled[cell].mean()
        weights.append(cell.astype(float))
    return _finish("naive", mu, _weight_diags({}, weights))


def estimate_ipw(ds: Dataset, propensity) -> EstimateResult:
    """Inverse-propensity weighting of observed responses (Horvitz-Thompson).

    Adjusts only for treatment selection; the complete-case restriction is
    left unweighted, so this stays biased under censoring by design.
    """
    pi = _check_propensity(ds, propensity)
    d_mat = ds.arm_indicators()
    base = d_mat * ds.response_observed[:, None] / pi
    mu = (base * ds.survival_filled[:, None]).sum(axis=0) / ds.n
    return _finish("ipw", mu, _weight_diags({}, list(base.T)))


def _uncensoring_probability(ds: Dataset, censoring_fits, censoring_terms):
    """exp(-Lambda_hat_(Z_i)(L_i)) per subject, clipped below at the floor."""
    w = build_design(ds.covariates, censoring_terms)
    c = np.ones(ds.n)
    for fit in censoring_fits:
        rows = np.flatnonzero(ds.arm_mask(fit.arm))
        c[rows] = np.exp(-fit.cumhaz(w[rows], ds.obs_times[rows]))
    used = ds.response_observed == 1
    clipped = int(np.sum(used & (c < UNCENSOR_FLOOR)))
    return np.maximum(c, UNCENSOR_FLOOR), clipped


def estimate_cipw(ds: Dataset, propensity, censoring_fits,
                  censoring_terms) -> EstimateResult:
    """IPW with an additional inverse uncensoring-probability factor."""
    pi = _check_propensity(ds, propensity)
    c, clipped = _uncensoring_probability(ds, censoring_fits, censoring_terms)
    d_mat = ds.arm_indicators()
    base = d_mat * (ds.response_observed / c)[:, None] / pi
    mu = (base * ds.survival_filled[:, None]).sum(axis=0) / ds.n
    diags = _weight_diags({"clipped_uncensoring": clipped}, list(base.T))
    if clipped:
        diags.setdefault("flags", []).append("uncensoring_floor_applied")
    return _finish("cipw", mu, diags)


def estimate_cipwr(ds: Dataset, propensity, censoring_fits, outcome_terms,
                   censoring_terms) -> EstimateResult:
    """Coarsening-weighted outcome regression with standardization.

    Per arm: solve the weighted logistic score equation for I(T >= d) on the
    outcome design with weights D_ij R_i / (pi_ij exp(-Lambda_ij(L_i))), then
    average the fitted probabilities over all n subjects.  Consistent when
    either the outcome model or both coarsening models are correct.
    """
    pi = _check_propensity(ds, propensity)
    c, clipped = _uncensoring_probability(ds, censoring_fits, censoring_terms)
    x = build_design(ds.covariates, outcome_terms)
    d_mat = ds.arm_indicators()
    base = d_mat * (ds.response_observed / c)[:, None] / pi
    mu = np.empty(ds.num_arms)
    fits = []
    for j in range(ds.num_arms):
        fit = fit_weighted_logistic(x, ds.survival_filled, base[:, j])
        fits.append(fit)
        mu[j] = float(np.mean(fit.predict(x)))
    diags = _weight_diags({"clipped_uncensoring": clipped}, list(base.T))
    if clipped:
        diags.setdefault("flags", []).append("uncensoring_floor_applied")
    return _finish("cipwr", mu, diags, outcome_fits=tuple(fits))


def estimate_caipw_wang(ds: Dataset, propensity, outcome_terms) -> EstimateResult:
    """Augmented IPW with Kaplan-Meier censoring weights.

    Weights are w_i = R_i / K_hat_(Z_i)(L_i-) where K_hat_j is the arm-j
    Kaplan-Meier estimate of the censoring survival function; the outcome
    augmentation uses a per-arm weighted logistic fit.  The Kaplan-Meier step
    assumes censoring depends on the arm at most, not on covariates.
    """
    pi = _check_propensity(ds, propensity)
    x = build_design(ds.covariates, outcome_terms)
    w = np.zeros(ds.n)
    for arm in range(1, ds.num_arms + 1):
        rows = np.flatnonzero(ds.arm_mask(arm))
        km = kaplan_meier(ds.observation_times[rows], 1 - ds.event_by_obs[rows])
        k_left = km.left_limit(ds.obs_times[rows])
        observed = ds.response_observed[rows] == 1
        dead = observed & (k_left <= 0.0)
        if dead.any():
            raise PositivityError(
                f"arm {arm} censoring survival hits zero before some observed "
                "responses",
                rows=rows[dead].tolist(),
            )
        w[rows[observed]] = 1.0 / k_left[observed]
    d_mat = ds.arm_indicators()
    mu = np.empty(ds.num_arms)
    fits = []
    for j in range(ds.num_arms):
        fit = fit_weighted_logistic(x, ds.survival_filled, w * d_mat[:, j])
        fits.append(fit)
        h = fit.predict(x)
        term = (
            d_mat[:, j] * ds.survival_filled / pi[:, j]
            - (d_mat[:, j] - pi[:, j]) / pi[:, j] * h
        )
        mu[j] = float(np.sum(w * term) / np.sum(w))
    diags = _weight_diags({}, [w * d_mat[:, j] for j in range(ds.num_arms)])
    return _finish("caipw_wang", mu, diags, outcome_fits=tuple(fits))


def estimate_pseudo_ipw(ds: Dataset, propensity, *, hajek=False) -> EstimateResult:
    """Horvitz-Thompson weighting of jackknife pseudo-values.

    Pseudo-values are computed from the arm-level Kaplan-Meier survival at
    the horizon on (min(T, C, d), I(event by horizon)); like the augmented
    Kaplan-Meier estimator this presumes censoring is covariate-free within
    arms.  ``hajek=True`` normalizes by the summed inverse propensities
    instead of n.
    """
    pi = _check_propensity(ds, propensity)
    event_by_horizon = (ds.event_by_obs == 1) & (ds.event_times <= ds.horizon)
    mu = np.empty(ds.num_arms)
    weights = []
    pseudo_range = []
    for j in range(ds.num_arms):
        rows = np.flatnonzero(ds.arm_mask(j + 1))
        theta = jackknife_pseudo(
            ds.obs_times[rows], event_by_horizon[rows].astype(int), ds.horizon
        )
        inv = 1.0 / pi[rows, j]
        denom = inv.sum() if hajek else float(ds.n)
        mu[j] = float(np.sum(theta * inv) / denom)
        weights.append(inv)
        pseudo_range.append((float(theta.min()), float(theta.max())))
    diags = _weight_diags({"pseudo_value_range": pseudo_range}, weights)
    return _finish("pseudo_ipw", mu, diags)


# ---------------------------------------------------------------------------
# Pipeline: nuisances fitted once, estimators applied to the shared fits.
# Additional comparators can be registered under new method tags.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Nuisances:
    """Nuisance fits shared by the estimators of one analysis."""

    propensity_fit: MultinomialFit | None
    propensity: np.ndarray
    censoring_fits: list[CensoringFit] | None


@dataclass(frozen=True)
class PipelineSpec:
    """What to estimate and with which working models."""

    designs: DesignSpec
    methods: tuple[str, ...] = ("cipwr",)
    time_mode: str = "observation"
    hajek_pseudo: bool = False

    def __post_init__(self):
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; available: {sorted(METHODS)}")


def fit_nuisances(ds: Dataset, spec: PipelineSpec) -> Nuisances:
    needs_propensity = any(m != "naive" for m in spec.methods)
    needs_censoring = any(m in ("cipw", "cipwr") for m in spec.methods)
    prop_fit, pi = None, None
    if needs_propensity:
        v = build_design(ds.covariates, spec.designs.treatment_terms)
        prop_fit = fit_multinomial(v, ds.arms, ds.num_arms)
        pi = predict_propensity(prop_fit, v)
    cens = None
    if needs_censoring:
        cens = fit_censoring_models(
            ds, spec.designs.censoring_terms, spec.time_mode
        )
    return Nuisances(prop_fit, pi, cens)


METHODS = {
    "naive": lambda ds, nu, spec: estimate_naive(ds),
    "ipw": lambda ds, nu, spec: estimate_ipw(ds, nu.propensity),
    "cipw": lambda ds, nu, spec: estimate_cipw(
        ds, nu.propensity, nu.censoring_fits, spec.designs.censoring_terms
    ),
    "cipwr": lambda ds, nu, spec: estimate_cipwr(
        ds, nu.propensity, nu.censoring_fits, spec.designs.outcome_terms,
        spec.designs.censoring_terms
    ),
    "caipw_wang": lambda ds, nu, spec: estimate_caipw_wang(
        ds, nu.propensity, spec.designs.outcome_terms
    ),
    "pseudo_ipw": lambda ds, nu, spec: estimate_pseudo_ipw(
        ds, nu.propensity, hajek=spec.hajek_pseudo
    ),
}


def run_pipeline(ds: Dataset, spec: PipelineSpec):
    """Fit nuisances once and apply every requested estimator.

    Returns (results, nuisances) where results maps method tag to
    EstimateResult in the order requested.
    """
    nuisances = fit_nuisances(ds, spec)
    results = {m: METHODS[m](ds, nuisances, spec) for m in spec.methods}
    return results, nuisances
