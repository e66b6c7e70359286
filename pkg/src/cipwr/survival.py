"""Survival primitives: step functions, Kaplan-Meier, proportional hazards
for the censoring process, Breslow baselines, and jackknife pseudo-values.

Conventions used throughout:

* risk sets are left-continuous, Y_i(t) = I(time_i >= t), so a subject is at
  risk at its own observation time;
* ties are handled by the Breslow convention (one risk set per distinct time);
* fitted step functions are evaluated right-continuously, so a jump at t is
  included in the value at t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .data import Dataset
from .design import build_design, parse_terms
from .exceptions import (
    ConvergenceError,
    ModeError,
    NoEventsError,
    RankError,
    SeparationError,
    UndefinedAtHorizonError,
)

COX_DIVERGENCE_BOUND = 1e2
MAX_HALVINGS = 20
TIME_MODES = ("observation", "observed_censoring")


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function with value ``initial`` before the first knot."""

    knots: np.ndarray
    values: np.ndarray
    initial: float = 0.0

    def __post_init__(self):
        knots = np.ascontiguousarray(self.knots, dtype=float)
        values = np.ascontiguousarray(self.values, dtype=float)
        if knots.shape != values.shape or knots.ndim != 1:
            raise ValueError("knots and values must be 1-d arrays of equal length")
        if knots.size and np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        knots.flags.writeable = False
        values.flags.writeable = False
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)

    def _eval(self, t, side):
        idx = np.searchsorted(self.knots, t, side=side)
        full = np.concatenate([[self.initial], self.values])
        out = full[idx]
        return float(out) if np.isscalar(t) else out

    def __call__(self, t):
        return self._eval(t, "right")

    def left_limit(self, t):
        """Value just before t (a jump at t itself is excluded)."""
        return self._eval(t, "left")


def kaplan_meier(times, status) -> StepFunction:
    """Product-limit survival estimate; jumps only at event times.

    Beyond the last observation the last value is carried forward.
    """
    times = np.asarray(times, dtype=float)
    status = np.asarray(status)
    _check_survival_input(times, status)
    order = np.argsort(times, kind="stable")
    ts, st = times[order], status[order]
    event_times = np.unique(ts[st == 1])
    if event_times.size == 0:
        return StepFunction(np.empty(0), np.empty(0), initial=1.0)
    first_at_risk = np.searchsorted(ts, event_times, side="left")
    n_at_risk = ts.size - first_at_risk
    d = np.searchsorted(ts[st == 1], event_times, side="right") - np.searchsorted(
        ts[st == 1], event_times, side="left"
    )
    surv = np.cumprod(1.0 - d / n_at_risk)
    return StepFunction(event_times, surv, initial=1.0)


def _check_survival_input(times, status):
    if times.ndim != 1 or times.shape != status.shape:
        raise ValueError("times and status must be 1-d arrays of equal length")
    if times.size == 0:
        raise ValueError("empty survival sample")
    if not np.all(np.isfinite(times)) or np.any(times <= 0):
        raise ValueError("times must be positive and finite")
    if not np.all((status == 0) | (status == 1)):
        raise ValueError("status must be 0/1")


def breslow_cumhaz(times, status, risk_scores) -> StepFunction:
    """Breslow cumulative baseline hazard for given per-subject risk scores.

    The jump at a distinct event time is (number of events) divided by the
    summed risk scores of everyone still at risk.  Unit scores reduce this to
    the Nelson-Aalen estimator.
    """
    times = np.asarray(times, dtype=float)
    status = np.asarray(status)
    scores = np.asarray(risk_scores, dtype=float)
    _check_survival_input(times, status)
    order = np.argsort(times, kind="stable")
    ts, st, sc = times[order], status[order], scores[order]
    event_times = np.unique(ts[st == 1])
    if event_times.size == 0:
        return StepFunction(np.empty(0), np.empty(0), initial=0.0)
    suffix = np.cumsum(sc[::-1])[::-1]
    first_at_risk = np.searchsorted(ts, event_times, side="left")
    s0 = suffix[first_at_risk]
    ev = ts[st == 1]
    d = np.searchsorted(ev, event_times, side="right") - np.searchsorted(
        ev, event_times, side="left"
    )
    return StepFunction(event_times, np.cumsum(d / s0), initial=0.0)


def cox_loglik(design, times, status, gamma):
    """Breslow-tie log partial likelihood."""
    parts = _cox_parts(design, times, status, gamma, want_hessian=False)
    return parts["loglik"]


def cox_score(design, times, status, gamma):
    """Gradient of the log partial likelihood."""
    parts = _cox_parts(design, times, status, gamma, want_hessian=False)
    return parts["score"]


def _cox_parts(design, times, status, gamma, want_hessian=True):
    """Sorted risk-set sums shared by the likelihood, score, and Hessian."""
    design = np.asarray(design, dtype=float)
    times = np.asarray(times, dtype=float)
    status = np.asarray(status)
    n, p = design.shape
    order = np.argsort(times, kind="stable")
    ts, st, xs = times[order], status[order], design[order]
    r = np.exp(xs @ gamma)
    event_mask = st == 1
    ev_times = ts[event_mask]
    event_times = np.unique(ev_times)
    first_at_risk = np.searchsorted(ts, event_times, side="left")
    d = np.searchsorted(ev_times, event_times, side="right") - np.searchsorted(
        ev_times, event_times, side="left"
    )
    s0 = np.cumsum(r[::-1])[::-1][first_at_risk]
    rx = r[:, None] * xs
    s1 = np.cumsum(rx[::-1], axis=0)[::-1][first_at_risk]
    starts = np.searchsorted(ev_times, event_times, side="left")
    ev_x_sum = np.add.reduceat(xs[event_mask], starts, axis=0) if event_times.size else np.zeros((0, p))
    wbar = s1 / s0[:, None]
    loglik = float(np.sum(ev_x_sum @ gamma) - np.sum(d * np.log(s0)))
    score = ev_x_sum.sum(axis=0) - (d[:, None] * wbar).sum(axis=0)
    out = {
        "loglik": loglik,
        "score": score,
        "event_times": event_times,
        "d": d,
        "s0": s0,
        "wbar": wbar,
    }
    if want_hessian:
        rxx = rx[:, :, None] * xs[:, None, :]
        s2 = np.cumsum(rxx[::-1], axis=0)[::-1][first_at_risk]
        h = np.einsum("k,kab->ab", d, s2 / s0[:, None, None]) - np.einsum(
            "k,ka,kb->ab", d, wbar, wbar
        )
        out["neg_hessian"] = h
    return out


@dataclass(frozen=True)
class CoxFit:
    """Proportional-hazards fit with its Breslow baseline cumulative hazard."""

    coefficients: np.ndarray
    baseline: StepFunction
    iterations: int
    gradient_norm: float
    loglik: float

    def cumhaz(self, design, t):
        """Cumulative hazard at time(s) t for covariate row(s) ``design``."""
        design = np.asarray(design, dtype=float)
        rel = np.exp(design @ self.coefficients)
        return self.baseline(t) * rel


def cumhaz_at(fit: CoxFit, design, t):
    return fit.cumhaz(design, t)


def fit_cox(design, times, status, *, tol=1e-8, max_iter=100) -> CoxFit:
    """Damped-Newton Cox fit (Breslow ties), censoring-agnostic in naming.

    An empty design (p = 0) skips estimation and returns the Nelson-Aalen
    baseline.  Raises NoEventsError without events, RankError when the
    partial-likelihood information is degenerate at zero (constant or
    collinear columns), SeparationError on a diverging iterate, and
    ConvergenceError when the iteration budget runs out.
    """
    design = np.asarray(design, dtype=float)
    times = np.asarray(times, dtype=float)
    status = np.asarray(status)
    _check_survival_input(times, status)
    n, p = design.shape
    if not np.any(status == 1):
        raise NoEventsError("no events in survival sample")
    if p == 0:
        gamma = np.zeros(0)
        base = breslow_cumhaz(times, status, np.ones(n))
        return CoxFit(gamma, base, 0, 0.0, cox_loglik(design, times, status, gamma))

    gamma = np.zeros(p)
    parts = _cox_parts(design, times, status, gamma)
    _check_cox_rank(parts["neg_hessian"])
    # under a monotone likelihood the score still vanishes along the divergent
    # path, so convergence alone proves nothing; what gives the pathology away
    # is the information collapsing relative to its value at zero
    info_floor = float(scipy.linalg.eigvalsh(parts["neg_hessian"])[0])
    ll = parts["loglik"]
    for it in range(1, max_iter + 1):
        # mean-scale score keeps the criterion comparable across sample sizes
        gnorm = float(np.max(np.abs(parts["score"]))) / n
        if gnorm <= tol:
            info_here = float(scipy.linalg.eigvalsh(parts["neg_hessian"])[0])
            if info_here <= 1e-6 * info_floor:
                raise SeparationError(
                    "partial-likelihood maximum diverges (monotone likelihood)"
                )
            frozen = gamma.copy()
            frozen.flags.writeable = False
            base = breslow_cumhaz(times, status, np.exp(design @ frozen))
            return CoxFit(frozen, base, it - 1, gnorm, ll)
        try:
            step = scipy.linalg.solve(
                parts["neg_hessian"], parts["score"], assume_a="pos"
            )
        except (scipy.linalg.LinAlgError, ValueError):
            raise SeparationError(
                "singular partial-likelihood information at iterate"
            ) from None
        scale = 1.0
        for _ in range(MAX_HALVINGS):
            cand = gamma + scale * step
            cand_ll = cox_loglik(design, times, status, cand)
            if cand_ll >= ll or not np.isfinite(ll):
                break
            scale *= 0.5
        gamma = gamma + scale * step
        if np.linalg.norm(gamma) > COX_DIVERGENCE_BOUND:
            raise SeparationError(
                "coefficient norm diverged; monotone partial likelihood"
            )
        parts = _cox_parts(design, times, status, gamma)
        ll = parts["loglik"]
    raise ConvergenceError(
        f"proportional-hazards solver did not converge in {max_iter} iterations",
        last_iterate=gamma,
    )


def _check_cox_rank(neg_hessian):
    diag = np.diag(neg_hessian)
    scale = max(float(diag.max(initial=0.0)), 1e-300)
    flat = np.flatnonzero(diag <= 1e-12 * scale)
    if flat.size:
        raise RankError(
            f"columns {flat.tolist()} carry no partial-likelihood information "
            "(constant within risk sets)",
            columns=flat.tolist(),
        )
    eigvals = np.linalg.eigvalsh(neg_hessian)
    if eigvals[0] <= 1e-12 * max(eigvals[-1], 1e-300):
        vec = np.linalg.eigh(neg_hessian)[1][:, 0]
        cols = np.flatnonzero(np.abs(vec) > 0.3).tolist()
        raise RankError(
            f"collinear columns {cols} in proportional-hazards design",
            columns=cols,
        )


@dataclass(frozen=True)
class CensoringFit:
    """Per-arm censoring-process fit used to build uncensoring probabilities.

    ``no_censoring_events`` marks arms where nobody was censored: the
    cumulative hazard is identically zero there and coefficients are a zero
    vector by convention.
    """

    arm: int
    time_mode: str
    fit: CoxFit
    no_censoring_events: bool = False

    def cumhaz(self, design, t):
        return self.fit.cumhaz(design, t)


def censoring_fit_inputs(ds: Dataset, arm: int, time_mode: str):
    """(row_indices, times, status) the arm's censoring model is fitted on.

    ``observation`` uses min(T, C) with a censoring event when the
    observation ended by censoring; ``observed_censoring`` requires fully
    recorded censoring times and uses (C_i, 1) for every subject.
    """
    if time_mode not in TIME_MODES:
        raise ModeError(f"unknown time mode {time_mode!r}; expected {TIME_MODES}")
    rows = np.flatnonzero(ds.arm_mask(arm))
    if time_mode == "observed_censoring":
        if not ds.censor_times_fully_observed:
            raise ModeError(
                "observed_censoring mode requires censoring times on every record"
            )
        return rows, ds.censor_times[rows], np.ones(rows.size, dtype=np.int64)
    times = ds.observation_times[rows]
    status = 1 - ds.event_by_obs[rows]
    return rows, times, status


def fit_censoring_models(ds: Dataset, censoring_terms, time_mode="observation",
                         *, tol=1e-8, max_iter=100) -> list[CensoringFit]:
    """Fit one censoring-process model per arm.

    Arms without a single censoring event get the trivial zero-hazard fit so
    downstream weights degrade gracefully to pure inverse propensity.
    """
    terms = parse_terms(censoring_terms)
    w = build_design(ds.covariates, terms)
    fits = []
    for arm in range(1, ds.num_arms + 1):
        rows, times, status = censoring_fit_inputs(ds, arm, time_mode)
        if not np.any(status == 1):
            trivial = CoxFit(
                np.zeros(w.shape[1]),
                StepFunction(np.empty(0), np.empty(0), initial=0.0),
                0,
                0.0,
                0.0,
            )
            fits.append(CensoringFit(arm, time_mode, trivial, no_censoring_events=True))
            continue
        fit = fit_cox(w[rows], times, status, tol=tol, max_iter=max_iter)
        fits.append(CensoringFit(arm, time_mode, fit))
    return fits


def jackknife_pseudo(times, status, horizon) -> np.ndarray:
    """Jackknife pseudo-values n*S(d) - (n-1)*S_loo(d) of Kaplan-Meier survival.

    With no censoring this returns exactly I(time_i >= horizon).  Raises
    UndefinedAtHorizonError when follow-up is exhausted by censoring strictly
    before the horizon, leaving the curve untethered there.
    """
    times = np.asarray(times, dtype=float)
    status = np.asarray(status)
    _check_survival_input(times, status)
    n = times.size
    if n < 2:
        raise ValueError("need at least two observations for jackknife pseudo-values")
    t_max = times.max()
    if t_max < horizon and not np.any(status[times == t_max] == 1):
        raise UndefinedAtHorizonError(
            f"last follow-up {t_max} is censored before horizon {horizon}"
        )
    full = kaplan_meier(times, status)(horizon)

    event_times = np.unique(times[status == 1])
    event_times = event_times[event_times <= horizon]
    if event_times.size == 0:
        # No events by the horizon: S = 1 exactly in the full and every
        # leave-one-out sample.
        return np.ones(n)
    order = np.argsort(times, kind="stable")
    ts = times[order]
    n_at_risk = n - np.searchsorted(ts, event_times, side="left")
    ev = np.sort(times[status == 1])
    d = np.searchsorted(ev, event_times, side="right") - np.searchsorted(
        ev, event_times, side="left"
    )
    # Leave-one-out factors per subject: dropping subject i shrinks every
    # risk set it belonged to and removes its own event.  Processed in
    # subject chunks so the (chunk, K) work array stays small.
    loo = np.empty(n)
    chunk = max(1, (1 << 22) // max(1, event_times.size))
    for start in range(0, n, chunk):
        t_i = times[start:start + chunk, None]
        s_i = status[start:start + chunk, None]
        at_risk_i = t_i >= event_times[None, :]
        own_event = (s_i == 1) & (t_i == event_times[None, :])
        den = n_at_risk[None, :] - at_risk_i
        num = d[None, :] - own_event
        factors = np.where(den > 0, 1.0 - num / np.where(den > 0, den, 1), 1.0)
        loo[start:start + chunk] = np.prod(factors, axis=1)
    return n * full - (n - 1) * loo
