"""Interval estimation: analytic influence-function variance and bootstrap.

The analytic variance treats the full estimation chain as one stacked set of
estimating equations.  Per arm j the per-subject influence value has five
pieces:

    psi_ij = m_ij - mu_j                          (standardization residual)
           + A B^{-1} phi_ij                      (weighted outcome score)
           + A B^{-1} F H^{-1} s_i                (treatment-model correction)
           + A B^{-1} P Omega^{-1} U_ij           (censoring-coefficient corr.)
           + A B^{-1} integral q dM*_ij / s0      (baseline-hazard correction)

with A = d mu / d beta; B minus the derivative of the weighted score in the
outcome coefficients; (F, H) the derivative in the treatment coefficients and
the treatment-model information; (P, Omega, U) the analogous pieces for the
censoring coefficients, where P folds in the dependence of the Breslow
baseline on those coefficients; and the last term integrating the
censoring-process martingale residual against q(u), the derivative of the
weighted score in the baseline-hazard increment at u.  Every block comes from
differentiating the estimating function directly, and the test suite checks
each one against central finite differences.

Corrections are only included for parameters that were actually estimated:
passing a plain propensity matrix (instead of a fitted model) marks the
propensities as known, and arms without censoring events contribute no
censoring correction.

Var(mu_j) = n^{-2} sum_i psi_ij^2; contrasts difference the influence columns
first, preserving the between-arm correlation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import expit
from scipy.stats import norm

from .data import Dataset
from .design import DesignSpec, build_design
from .estimators import (
    EstimateResult,
    PipelineSpec,
    _uncensoring_probability,
    result_quantities,
    run_pipeline,
)
from .exceptions import BootstrapDegenerateError, CipwrError, SingularBlockError
from .glm import predict_propensity
from .survival import censoring_fit_inputs


def wald_ci(estimate, se, level=0.95):
    """Symmetric normal-quantile interval around ``estimate``."""
    z = norm.ppf(0.5 + level / 2.0)
    estimate = np.asarray(estimate, dtype=float)
    se = np.asarray(se, dtype=float)
    return estimate - z * se, estimate + z * se


def _solve(mat, rhs, name):
    try:
        sol = scipy.linalg.solve(mat, rhs, assume_a="sym")
    except (scipy.linalg.LinAlgError, ValueError):
        raise SingularBlockError(f"variance block {name} is singular") from None
    if not np.all(np.isfinite(sol)):
        raise SingularBlockError(f"variance block {name} is singular")
    return sol


@dataclass(frozen=True)
class InfluenceComponents:
    """Derivative blocks and per-subject pieces behind one arm's influence values."""

    arm: int
    a_row: np.ndarray                        # d mu / d beta, (pX,)
    b_matrix: np.ndarray                     # minus d score / d beta, (pX, pX)
    f_blocks: tuple | None                   # per non-reference class, (pX, pV)
    h_matrix: np.ndarray | None              # treatment information, ((J-1)pV)^2
    omega: np.ndarray | None                 # censoring information, (pW, pW)
    u_rows: np.ndarray | None                # per-subject censoring scores, (n, pW)
    k_at_obs: np.ndarray | None              # K_ij(L_i), (n, pW)
    martingale_integrals: np.ndarray | None  # integral_0^L dM*_ij / s0, (n,)
    psi_terms: np.ndarray                    # (n, 5) additive decomposition

    def h_block(self, l):
        """Diagonal information block for non-reference class l (0-based)."""
        if self.h_matrix is None or self.f_blocks is None:
            return None
        pv = self.h_matrix.shape[0] // len(self.f_blocks)
        return self.h_matrix[l * pv:(l + 1) * pv, l * pv:(l + 1) * pv]


@dataclass(frozen=True)
class SandwichResult:
    """Per-arm and contrast standard errors with the influence matrix."""

    arm_se: np.ndarray        # (J,)
    contrast_se: np.ndarray   # (J, J)
    influence: np.ndarray     # (n, J)
    components: tuple[InfluenceComponents, ...]

    def quantity_se(self) -> dict[str, float]:
        out = {}
        j = self.arm_se.size
        for a in range(j):
            out[f"survival_{a + 1}"] = float(self.arm_se[a])
            out[f"risk_{a + 1}"] = float(self.arm_se[a])
        for a in range(j):
            for b in range(a + 1, j):
                out[f"contrast_{a + 1}_{b + 1}"] = float(self.contrast_se[a, b])
        return out


def _cox_pieces(ds, phi, rows, tau, delta_c, warm, gamma):
    """Censoring-side blocks for one arm.

    Risk-set quantities are recomputed from the same inputs the fit used, so
    sum_k dM*_k(u) = 0 holds exactly at every event time.  Returns
    (omega, u_rows, k_at_obs, mart, t4) with full-length rows (zero outside
    the arm); omega is None when the censoring design is empty.
    """
    n = ds.n
    n_arm, p_w = warm.shape
    r = np.exp(warm @ gamma)
    order = np.argsort(tau, kind="stable")
    ts, st = tau[order], delta_c[order]
    ev = ts[st == 1]
    u = np.unique(ev)
    k = u.size
    first = np.searchsorted(ts, u, side="left")
    d_u = np.searchsorted(ev, u, side="right") - np.searchsorted(ev, u, side="left")
    rs = r[order]
    s0 = np.cumsum(rs[::-1])[::-1][first]
    dlam = d_u / s0

    # q(u) = n^{-1} sum over arm subjects with obs_time >= u of phi_i * r_i.
    obs = ds.obs_times[rows]
    pr = phi[rows] * r[:, None]
    oa = np.argsort(obs, kind="stable")
    obs_sorted = obs[oa]
    suffix = np.vstack([np.cumsum(pr[oa][::-1], axis=0)[::-1], np.zeros((1, phi.shape[1]))])
    q = suffix[np.searchsorted(obs_sorted, u, side="left")] / n

    # Scalar and vector prefix sums over event times.
    nq_s0 = q * (n / s0)[:, None]
    g2 = np.vstack([np.zeros((1, phi.shape[1])), np.cumsum(nq_s0 * dlam[:, None], axis=0)])
    gs = np.concatenate([[0.0], np.cumsum(dlam * n / s0)])
    pos_tau = np.searchsorted(u, tau, side="right")
    pos_obs = np.searchsorted(u, obs, side="right")
    at_event = np.searchsorted(u, tau, side="left")

    is_ev = delta_c == 1
    t4_arm = -r[:, None] * g2[pos_tau]
    t4_arm[is_ev] += nq_s0[at_event[is_ev]]
    t4 = np.zeros((n, phi.shape[1]))
    t4[rows] = t4_arm

    mart_arm = -r * gs[np.minimum(pos_tau, pos_obs)]
    jump_in_range = is_ev & (tau <= ds.obs_times[rows])
    mart_arm[jump_in_range] += (n / s0)[at_event[jump_in_range]]
    mart = np.zeros(n)
    mart[rows] = mart_arm

    if p_w == 0:
        return None, None, None, mart, t4

    ws = warm[order] * rs[:, None]
    s1 = np.cumsum(ws[::-1], axis=0)[::-1][first]
    wbar = s1 / s0[:, None]
    wxx = ws[:, :, None] * warm[order][:, None, :]
    s2 = np.cumsum(wxx[::-1], axis=0)[::-1][first]
    omega = (
        np.einsum("k,kab->ab", d_u, s2 / s0[:, None, None])
        - np.einsum("k,ka,kb->ab", d_u, wbar, wbar)
    ) / n

    g0 = np.concatenate([[0.0], np.cumsum(dlam)])
    g1 = np.vstack([np.zeros((1, p_w)), np.cumsum(wbar * dlam[:, None], axis=0)])
    comp = r[:, None] * (warm * g0[pos_tau][:, None] - g1[pos_tau])
    u_arm = -comp
    u_arm[is_ev] += warm[is_ev] - wbar[at_event[is_ev]]
    u_rows = np.zeros((n, p_w))
    u_rows[rows] = u_arm

    k_arm = r[:, None] * (warm * g0[pos_obs][:, None] - g1[pos_obs])
    k_at_obs = np.zeros((n, p_w))
    k_at_obs[rows] = k_arm
    return omega, u_rows, k_at_obs, mart, t4


def cipwr_sandwich(ds: Dataset, designs: DesignSpec, result: EstimateResult, *,
                   propensity_fit=None, propensity=None, censoring_fits=None,
                   time_mode="observation") -> SandwichResult:
    """Influence-function standard errors for the regression-standardized
    estimator.

    Pass ``propensity_fit`` when the propensities were estimated (enables the
    treatment-model correction) or ``propensity`` when they are known.
    ``censoring_fits`` should be the fits the weights were built from; omit
    it when no censoring adjustment was applied.
    """
    if (propensity_fit is None) == (propensity is None):
        raise ValueError("pass exactly one of propensity_fit / propensity")
    if result.outcome_fits is None:
        raise ValueError("result carries no outcome fits; run the regression estimator")
    n, num_arms = ds.n, ds.num_arms
    x = build_design(ds.covariates, designs.outcome_terms)
    if propensity_fit is not None:
        v = build_design(ds.covariates, designs.treatment_terms)
        pi = predict_propensity(propensity_fit, v)
    else:
        v = None
        pi = np.asarray(propensity, dtype=float)
    if censoring_fits is not None:
        c, _ = _uncensoring_probability(ds, censoring_fits, designs.censoring_terms)
    else:
        c = np.ones(n)
    d_mat = ds.arm_indicators()

    psi = np.empty((n, num_arms))
    comps = []
    for j in range(num_arms):
        beta = result.outcome_fits[j].coefficients
        m = expit(x @ beta)
        mu = float(np.mean(m))
        base = d_mat[:, j] * ds.response_observed / (pi[:, j] * c)
        phi = x * (base * (ds.survival_filled - m))[:, None]
        a_row = (m * (1.0 - m)) @ x / n
        b_mat = x.T @ (x * (base * m * (1.0 - m))[:, None]) / n
        ab = _solve(b_mat, a_row, f"B_{j + 1}")

        terms = np.zeros((n, 5))
        terms[:, 0] = m - mu
        terms[:, 1] = phi @ ab

        f_blocks = h_mat = None
        if propensity_fit is not None:
            jm1 = num_arms - 1
            p_v = v.shape[1]
            f_cols, s_cols = [], []
            h_mat = np.empty((jm1 * p_v, jm1 * p_v))
            for l in range(jm1):
                sel = 1.0 if l == j else 0.0
                f_cols.append(-(phi.T @ (v * (sel - pi[:, l])[:, None])) / n)
                s_cols.append(v * (d_mat[:, l] - pi[:, l])[:, None])
                for mm in range(jm1):
                    curv = pi[:, l] * ((1.0 if l == mm else 0.0) - pi[:, mm])
                    h_mat[l * p_v:(l + 1) * p_v, mm * p_v:(mm + 1) * p_v] = (
                        v.T @ (v * curv[:, None]) / n
                    )
            f_blocks = tuple(f_cols)
            f_full = np.hstack(f_cols)
            s_full = np.hstack(s_cols)
            terms[:, 2] = s_full @ _solve(h_mat, f_full.T @ ab, "H")

        omega = u_rows = k_at_obs = mart = None
        cens_fit = censoring_fits[j] if censoring_fits is not None else None
        if cens_fit is not None and not cens_fit.no_censoring_events:
            rows, tau, delta_c = censoring_fit_inputs(ds, j + 1, time_mode)
            warm = build_design(ds.covariates, designs.censoring_terms)[rows]
            omega, u_rows, k_at_obs, mart, t4 = _cox_pieces(
                ds, phi, rows, tau, delta_c, warm, cens_fit.fit.coefficients
            )
            if omega is not None:
                p_mat = phi.T @ k_at_obs / n
                terms[:, 3] = u_rows @ _solve(omega, p_mat.T @ ab, f"Omega_{j + 1}")
            terms[:, 4] = t4 @ ab

        psi[:, j] = terms.sum(axis=1)
        comps.append(
            InfluenceComponents(
                arm=j + 1, a_row=a_row, b_matrix=b_mat, f_blocks=f_blocks,
                h_matrix=h_mat, omega=omega, u_rows=u_rows, k_at_obs=k_at_obs,
                martingale_integrals=mart, psi_terms=terms,
            )
        )

    arm_se = np.sqrt(np.sum(psi**2, axis=0)) / n
    diff = psi[:, :, None] - psi[:, None, :]
    contrast_se = np.sqrt(np.sum(diff**2, axis=0)) / n
    return SandwichResult(arm_se, contrast_se, psi, tuple(comps))


@dataclass(frozen=True)
class QuantityInterval:
    estimate: float
    se: float
    lower: float
    upper: float


@dataclass(frozen=True)
class BootstrapResult:
    """Resampling intervals per method and quantity."""

    tables: dict
    num_replicates: int
    num_failed: int
    level: float
    style: str


def _bootstrap_one(ds, spec, child):
    rng = np.random.default_rng(child)
    idx = rng.integers(0, ds.n, ds.n)
    try:
        results, _ = run_pipeline(ds.subset(idx), spec)
    except CipwrError:
        return None
    return {m: result_quantities(r) for m, r in results.items()}


def bootstrap(ds: Dataset, spec: PipelineSpec, *, num_replicates=200, seed=0,
              level=0.95, style="wald", n_jobs=1,
              max_failure_fraction=0.1) -> BootstrapResult:
    """Nonparametric bootstrap of the full pipeline.

    Each replicate resamples n records with replacement, refits every
    nuisance model, and recomputes each estimator.  Replicates are driven by
    per-replicate seed streams spawned from ``seed``, and aggregation runs in
    replicate order, so results do not depend on ``n_jobs``.  Replicates that
    fail to fit are dropped; more than ``max_failure_fraction`` failures
    raises BootstrapDegenerateError.

    ``style="wald"`` centers a normal interval on the full-sample estimate
    with the bootstrap standard deviation; ``style="percentile"`` uses
    empirical quantiles of the replicate estimates.
    """
    if style not in ("wald", "percentile"):
        raise ValueError(f"unknown interval style {style!r}")
    results0, _ = run_pipeline(ds, spec)
    children = np.random.SeedSequence(seed).spawn(num_replicates)
    if n_jobs != 1:
        from joblib import Parallel, delayed

        draws = Parallel(n_jobs=n_jobs)(
            delayed(_bootstrap_one)(ds, spec, child) for child in children
        )
    else:
        draws = [_bootstrap_one(ds, spec, child) for child in children]
    ok = [d for d in draws if d is not None]
    failed = num_replicates - len(ok)
    if failed > max_failure_fraction * num_replicates or len(ok) < 2:
        raise BootstrapDegenerateError(
            f"{failed} of {num_replicates} bootstrap replicates failed"
        )
    z = norm.ppf(0.5 + level / 2.0)
    tables = {}
    for method, res in results0.items():
        table = {}
        for name, est in result_quantities(res).items():
            arr = np.array([d[method][name] for d in ok])
            se = float(np.std(arr, ddof=1))
            if style == "wald":
                lo, hi = est - z * se, est + z * se
            else:
                lo, hi = np.quantile(arr, [0.5 - level / 2.0, 0.5 + level / 2.0])
            table[name] = QuantityInterval(float(est), se, float(lo), float(hi))
        tables[method] = table
    return BootstrapResult(tables, num_replicates, failed, level, style)
