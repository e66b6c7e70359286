"""Subject records, coarsening derivation, and the validated dataset container.

The raw observables per subject are covariates, an arm label, and (partially
observed) event and censoring times.  Everything the estimators consume is
derived from those plus the horizon:

    obs_time            L = min(T, C, d)
    event_by_obs        I(T <= C)
    response_observed   R = I(C >= min(T, d))
    survival_indicator  I(T >= d), defined only when R = 1

An absent event time means no event was observed before censoring and enters
the indicators as T = +inf; an absent censoring time means the event came
first and enters as C = +inf.  At least one of the two must be present.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .exceptions import DatasetValidationError


def derive_coarsening(event_time, censor_time, horizon):
    """Derive (obs_time, event_by_obs, response_observed, survival_indicator).

    ``event_time`` may be None (no event observed before censoring);
    ``censor_time`` may be None (event observed first).  ``survival_indicator``
    is None exactly when the response is not observed.
    """
    if event_time is None and censor_time is None:
        raise ValueError("event_time and censor_time cannot both be absent")
    if not (horizon > 0 and math.isfinite(horizon)):
        raise ValueError(f"horizon must be a positive finite real, got {horizon}")
    t = math.inf if event_time is None else float(event_time)
    c = math.inf if censor_time is None else float(censor_time)
    if not t > 0:
        raise ValueError(f"event_time must be positive, got {event_time}")
    if not c > 0:
        raise ValueError(f"censor_time must be positive, got {censor_time}")
    obs_time = min(t, c, horizon)
    event_by_obs = 1 if t <= c else 0
    response_observed = 1 if c >= min(t, horizon) else 0
    survival = (1 if t >= horizon else 0) if response_observed else None
    return obs_time, event_by_obs, response_observed, survival


@dataclass(frozen=True)
class SubjectRecord:
    """One subject with raw times and the coarsening derived at a horizon."""

    covariates: tuple[float, ...]
    arm: int
    event_time: float | None
    censor_time: float | None
    obs_time: float
    event_by_obs: int
    response_observed: int
    survival_indicator: int | None

    @classmethod
    def from_times(cls, covariates, arm, event_time, censor_time, horizon):
        obs, ev, resp, surv = derive_coarsening(event_time, censor_time, horizon)
        return cls(
            covariates=tuple(float(v) for v in covariates),
            arm=int(arm),
            event_time=None if event_time is None else float(event_time),
            censor_time=None if censor_time is None else float(censor_time),
            obs_time=obs,
            event_by_obs=ev,
            response_observed=resp,
            survival_indicator=surv,
        )


def _freeze(arr):
    arr.flags.writeable = False
    return arr


class Dataset:
    """Immutable columnar view of a validated cohort.

    Construct via :func:`validate_dataset`, :meth:`from_records` or
    :meth:`from_arrays`; all three run the full validation.  Absent event and
    censoring times are stored as ``+inf`` in the raw-time arrays and the
    unobserved survival indicators as ``nan``.  Arrays are read-only so a
    dataset can be shared across worker processes without copies.
    """

    def __init__(self, *, covariates, arms, event_times, censor_times,
                 horizon, num_arms, _validated=False):
        if not _validated:
            raise TypeError(
                "use validate_dataset / Dataset.from_records / Dataset.from_arrays"
            )
        self.covariates = _freeze(np.ascontiguousarray(covariates, dtype=float))
        self.arms = _freeze(np.ascontiguousarray(arms, dtype=np.int64))
        self.event_times = _freeze(np.ascontiguousarray(event_times, dtype=float))
        self.censor_times = _freeze(np.ascontiguousarray(censor_times, dtype=float))
        self.horizon = float(horizon)
        self.num_arms = int(num_arms)
        t, c, d = self.event_times, self.censor_times, self.horizon
        self.obs_times = _freeze(np.minimum(np.minimum(t, c), d))
        self.event_by_obs = _freeze((t <= c).astype(np.int64))
        self.response_observed = _freeze((c >= np.minimum(t, d)).astype(np.int64))
        surv = np.where(t >= d, 1.0, 0.0)
        surv[self.response_observed == 0] = np.nan
        self.survival_indicators = _freeze(surv)
        # Survival indicators with unobserved entries zero-filled: the
        # convention for zero-weight rows in weighted fits.
        self.survival_filled = _freeze(np.nan_to_num(surv, nan=0.0))
        # min(T, C) without the horizon truncation: the follow-up time the
        # censoring-process models are fitted on.
        self.observation_times = _freeze(np.minimum(t, c))
        self.censor_times_fully_observed = bool(np.all(np.isfinite(c)))

    @property
    def n(self) -> int:
        return self.arms.shape[0]

    @property
    def covariate_dim(self) -> int:
        return self.covariates.shape[1]

    def arm_mask(self, arm: int) -> np.ndarray:
        return self.arms == arm

    def arm_indicators(self) -> np.ndarray:
        """(n, J) matrix of I(Z_i = j)."""
        return (self.arms[:, None] == np.arange(1, self.num_arms + 1)[None, :]).astype(float)

    @cached_property
    def records(self) -> tuple[SubjectRecord, ...]:
        out = []
        for i in range(self.n):
            t = self.event_times[i]
            c = self.censor_times[i]
            out.append(
                SubjectRecord.from_times(
                    self.covariates[i],
                    int(self.arms[i]),
                    None if math.isinf(t) else float(t),
                    None if math.isinf(c) else float(c),
                    self.horizon,
                )
            )
        return tuple(out)

    @classmethod
    def from_records(cls, records, horizon, num_arms=None) -> "Dataset":
        return validate_dataset(records, horizon, num_arms=num_arms)

    @classmethod
    def from_arrays(cls, covariates, arms, event_times, censor_times, horizon,
                    num_arms=None) -> "Dataset":
        """Build from columnar arrays; NaN or +inf mark absent times."""
        covariates = np.atleast_2d(np.asarray(covariates, dtype=float))
        arms = np.asarray(arms, dtype=np.int64)
        t = np.where(np.isnan(event_times), np.inf, np.asarray(event_times, dtype=float))
        c = np.where(np.isnan(censor_times), np.inf, np.asarray(censor_times, dtype=float))
        violations = _check_arrays(covariates, arms, t, c, horizon, num_arms)
        if violations:
            raise DatasetValidationError(violations)
        j = int(arms.max()) if num_arms is None else int(num_arms)
        return cls(covariates=covariates, arms=arms, event_times=t,
                   censor_times=c, horizon=horizon, num_arms=j, _validated=True)

    def subset(self, indices) -> "Dataset":
        """Dataset restricted to ``indices`` (kept order, duplicates allowed).

        Used by the bootstrap and by overlap trimming; arm coverage is
        re-validated so an emptied arm surfaces immediately.
        """
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset.from_arrays(
            self.covariates[idx],
            self.arms[idx],
            self.event_times[idx],
            self.censor_times[idx],
            self.horizon,
            num_arms=self.num_arms,
        )


def _check_arrays(covariates, arms, t, c, horizon, num_arms):
    violations = []
    n = arms.shape[0]
    if covariates.shape[0] != n or t.shape[0] != n or c.shape[0] != n:
        violations.append((-1, "covariates, arms, and time arrays disagree in length"))
        return violations
    if n == 0:
        violations.append((-1, "dataset is empty"))
        return violations
    if covariates.ndim != 2 or covariates.shape[1] < 1:
        violations.append((-1, "covariates must form an (n, p) matrix with p >= 1"))
        return violations
    if not (horizon is not None and horizon > 0 and math.isfinite(horizon)):
        violations.append((-1, f"horizon must be a positive finite real, got {horizon}"))
        return violations
    for i in np.flatnonzero(~np.isfinite(covariates).all(axis=1)):
        violations.append((int(i), "non-finite covariate value"))
    j = int(arms.max(initial=0)) if num_arms is None else int(num_arms)
    if j < 2:
        violations.append((-1, f"at least two arms required, got {j}"))
    else:
        bad = (arms < 1) | (arms > j)
        for i in np.flatnonzero(bad):
            violations.append((int(i), f"arm label {arms[i]} outside 1..{j}"))
        if not bad.any():
            present = np.bincount(arms, minlength=j + 1)[1:]
            for a in np.flatnonzero(present == 0):
                violations.append((-1, f"empty arm {a + 1}"))
    both_absent = np.isinf(t) & np.isinf(c)
    for i in np.flatnonzero(both_absent):
        violations.append((int(i), "event_time and censor_time both absent"))
    nonpos = (t <= 0) | (c <= 0)
    for i in np.flatnonzero(nonpos):
        violations.append((int(i), "times must be positive"))
    return violations


def validate_dataset(records, horizon, num_arms=None) -> Dataset:
    """Validate raw records and return a Dataset, or raise with every violation.

    Checks cover: consistent covariate dimension, finite values, positive
    times, at least one of event/censor time per row, arm labels covering
    1..J with no empty arm, and derived fields consistent with re-deriving the
    coarsening at ``horizon`` (a record built at a different horizon fails
    here).
    """
    records = list(records)
    violations = []
    p = None
    rows = []
    for i, r in enumerate(records):
        cov = np.asarray(r.covariates, dtype=float)
        if p is None:
            p = cov.shape[0]
        elif cov.shape[0] != p:
            violations.append((i, f"covariate length {cov.shape[0]} != {p}"))
            continue
        try:
            derived = derive_coarsening(r.event_time, r.censor_time, horizon)
        except ValueError as exc:
            violations.append((i, str(exc)))
            continue
        stored = (r.obs_time, r.event_by_obs, r.response_observed, r.survival_indicator)
        if derived != stored:
            violations.append(
                (i, f"derived fields {stored} inconsistent with horizon {horizon}")
            )
        rows.append((i, cov, r))
    if violations:
        raise DatasetValidationError(violations)
    covariates = np.vstack([cov for _, cov, _ in rows])
    arms = np.array([r.arm for _, _, r in rows], dtype=np.int64)
    t = np.array(
        [math.inf if r.event_time is None else r.event_time for _, _, r in rows]
    )
    c = np.array(
        [math.inf if r.censor_time is None else r.censor_time for _, _, r in rows]
    )
    violations = _check_arrays(covariates, arms, t, c, horizon, num_arms)
    if violations:
        raise DatasetValidationError(violations)
    j = int(arms.max()) if num_arms is None else int(num_arms)
    return Dataset(covariates=covariates, arms=arms, event_times=t,
                   censor_times=c, horizon=horizon, num_arms=j, _validated=True)
