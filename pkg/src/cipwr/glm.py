"""Weighted binary logistic and multinomial logistic maximum likelihood.

Both solvers are damped Newton iterations started at zero: full Newton step,
step-halving (at most 20 halvings) whenever the penalized quantity -- here the
plain log likelihood -- fails to improve, convergence declared when the score
max-norm, normalized by the total weight, drops to ``tol``.  Divergence of the iterate or a perfectly
predicted class is reported as separation rather than silent garbage.

Zero-weight rows are retained so fitted-probability vectors stay aligned with
the full dataset; their responses may be arbitrary placeholders.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import expit, logsumexp

from .exceptions import ConvergenceError, RankError, SeparationError

DIVERGENCE_BOUND = 1e4
SATURATION_EPS = 1e-10
MAX_HALVINGS = 20


def _check_rank(design, row_scale=None, what="design"):
    """Pivoted-QR rank check; names the redundant columns on failure."""
    n, p = design.shape
    if p == 0:
        return
    scaled = design if row_scale is None else design * row_scale[:, None]
    _, r, piv = scipy.linalg.qr(scaled, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(n, p) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    deficient = np.flatnonzero(diag <= tol)
    if deficient.size:
        cols = sorted(int(piv[k]) for k in deficient)
        raise RankError(
            f"{what} is rank deficient; redundant columns {cols}", columns=cols
        )


def logistic_loglik(design, response, weights, beta):
    """Weighted Bernoulli log likelihood at ``beta`` (stable in the tails)."""
    eta = design @ beta
    return float(np.sum(weights * (response * eta - np.logaddexp(0.0, eta))))


def logistic_score(design, response, weights, beta):
    """Gradient of :func:`logistic_loglik` with respect to ``beta``."""
    p = expit(design @ beta)
    return design.T @ (weights * (response - p))


@dataclass(frozen=True)
class LogisticFit:
    """Solved weighted logistic regression."""

    coefficients: np.ndarray
    iterations: int
    gradient_norm: float
    loglik: float

    def predict(self, design) -> np.ndarray:
        return expit(np.asarray(design, dtype=float) @ self.coefficients)


def predict_logistic(fit: LogisticFit, design) -> np.ndarray:
    return fit.predict(design)


def fit_weighted_logistic(design, response, weights, *, tol=1e-10,
                          max_iter=100) -> LogisticFit:
    """Solve the weighted logistic score equation sum_i w_i x_i (y_i - p_i) = 0.

    Raises RankError when the positively weighted design is rank deficient,
    SeparationError when the weighted responses are all one class, the iterate
    diverges, or the fit saturates, and ConvergenceError (carrying the last
    iterate) when the iteration budget runs out.
    """
    design = np.asarray(design, dtype=float)
    response = np.asarray(response, dtype=float)
    weights = np.asarray(weights, dtype=float)
    n, p = design.shape
    if response.shape != (n,) or weights.shape != (n,):
        raise ValueError("design, response, and weights disagree in length")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite and nonnegative")
    active = weights > 0
    if not active.any():
        raise SeparationError("no positive weights")
    for cls in (0.0, 1.0):
        if not np.any(active & (response == cls)):
            raise SeparationError(
                f"no positive weight on response class {int(cls)}; MLE diverges"
            )
    _check_rank(design[active], np.sqrt(weights[active]), what="weighted design")

    beta = np.zeros(p)
    ll = logistic_loglik(design, response, weights, beta)
    # convergence is judged on the score divided by the total weight, which
    # makes the criterion invariant to sample size and to weight rescaling
    denom = float(weights.sum())
    for it in range(1, max_iter + 1):
        prob = expit(design @ beta)
        grad = design.T @ (weights * (response - prob))
        gnorm = float(np.max(np.abs(grad))) / denom
        if gnorm <= tol:
            _check_logistic_separation(beta, prob, response, active, tol)
            frozen = beta.copy()
            frozen.flags.writeable = False
            return LogisticFit(frozen, it - 1, gnorm, ll)
        curv = weights * prob * (1.0 - prob)
        hess = design.T @ (design * curv[:, None])
        try:
            step = scipy.linalg.solve(hess, grad, assume_a="pos")
        except (scipy.linalg.LinAlgError, ValueError):
            raise SeparationError(
                "singular observed information; fit is saturating"
            ) from None
        scale = 1.0
        for _ in range(MAX_HALVINGS):
            cand = beta + scale * step
            cand_ll = logistic_loglik(design, response, weights, cand)
            if cand_ll >= ll or not np.isfinite(ll):
                break
            scale *= 0.5
        beta = beta + scale * step
        ll = logistic_loglik(design, response, weights, beta)
        if np.linalg.norm(beta) > DIVERGENCE_BOUND:
            raise SeparationError(
                f"coefficient norm exceeded {DIVERGENCE_BOUND:g}; data are separated"
            )
    raise ConvergenceError(
        f"logistic solver did not converge in {max_iter} iterations "
        f"(score max-norm {gnorm:.3e})",
        last_iterate=beta,
    )


def _saturation_eps(tol):
    # residuals at a converged separated fit sit near the stopping tolerance,
    # not at machine precision, so the detector must track ``tol``
    return min(1e-4, max(SATURATION_EPS, 1e3 * tol))


def _check_logistic_separation(beta, prob, response, active, tol):
    eps = _saturation_eps(tol)
    ones = active & (response == 1.0)
    zeros = active & (response == 0.0)
    if np.all(prob[ones] >= 1.0 - eps) or np.all(prob[zeros] <= eps):
        raise SeparationError("fitted probabilities saturated at {0,1}")


def multinomial_loglik(design, labels, theta):
    """Multinomial log likelihood; ``theta`` is (J-1, p), class J is reference."""
    eta = np.concatenate(
        [design @ theta.T, np.zeros((design.shape[0], 1))], axis=1
    )
    return float(
        np.sum(eta[np.arange(design.shape[0]), labels - 1] - logsumexp(eta, axis=1))
    )


def _softmax_probs(design, theta):
    eta = np.concatenate(
        [design @ theta.T, np.zeros((design.shape[0], 1))], axis=1
    )
    eta -= eta.max(axis=1, keepdims=True)
    num = np.exp(eta)
    return num / num.sum(axis=1, keepdims=True)


def multinomial_score(design, labels, theta):
    """Stacked score (one p-block per non-reference class)."""
    probs = _softmax_probs(design, theta)
    j = theta.shape[0] + 1
    ind = (labels[:, None] == np.arange(1, j)[None, :]).astype(float)
    resid = ind - probs[:, : j - 1]
    return (design.T @ resid).T.ravel()


@dataclass(frozen=True)
class MultinomialFit:
    """Solved multinomial logistic regression with reference class J."""

    coefficients: np.ndarray  # (J - 1, p)
    num_classes: int
    iterations: int
    gradient_norm: float
    loglik: float

    def predict(self, design) -> np.ndarray:
        return _softmax_probs(np.asarray(design, dtype=float), self.coefficients)


def predict_propensity(fit: MultinomialFit, design) -> np.ndarray:
    """(n, J) matrix of class probabilities; rows sum to one."""
    return fit.predict(design)


def fit_multinomial(design, labels, num_classes, *, tol=1e-8,
                    max_iter=100) -> MultinomialFit:
    """Multinomial logistic MLE over classes 1..J with class J as reference."""
    design = np.asarray(design, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    n, p = design.shape
    j = int(num_classes)
    if j < 2:
        raise ValueError(f"need at least two classes, got {j}")
    if labels.shape != (n,):
        raise ValueError("design and labels disagree in length")
    if labels.min() < 1 or labels.max() > j:
        raise ValueError(f"labels must lie in 1..{j}")
    counts = np.bincount(labels, minlength=j + 1)[1:]
    if np.any(counts == 0):
        missing = [int(c + 1) for c in np.flatnonzero(counts == 0)]
        raise SeparationError(f"classes {missing} absent; intercepts diverge")
    _check_rank(design, what="treatment design")

    theta = np.zeros((j - 1, p))
    ind = (labels[:, None] == np.arange(1, j)[None, :]).astype(float)
    ll = multinomial_loglik(design, labels, theta)
    for it in range(1, max_iter + 1):
        probs = _softmax_probs(design, theta)
        resid = ind - probs[:, : j - 1]
        grad = (design.T @ resid).T.ravel()
        gnorm = float(np.max(np.abs(grad))) / n
        if gnorm <= tol:
            _check_multinomial_separation(probs, labels, j, tol)
            frozen = theta.copy()
            frozen.flags.writeable = False
            return MultinomialFit(frozen, j, it - 1, gnorm, ll)
        hess = np.empty(((j - 1) * p, (j - 1) * p))
        for l in range(j - 1):
            for m in range(j - 1):
                curv = probs[:, l] * ((1.0 if l == m else 0.0) - probs[:, m])
                block = design.T @ (design * curv[:, None])
                hess[l * p:(l + 1) * p, m * p:(m + 1) * p] = -block
        try:
            step = scipy.linalg.solve(-hess, grad, assume_a="pos")
        except (scipy.linalg.LinAlgError, ValueError):
            raise SeparationError(
                "singular observed information; fit is saturating"
            ) from None
        scale = 1.0
        for _ in range(MAX_HALVINGS):
            cand = theta + scale * step.reshape(j - 1, p)
            cand_ll = multinomial_loglik(design, labels, cand)
            if cand_ll >= ll or not np.isfinite(ll):
                break
            scale *= 0.5
        theta = theta + scale * step.reshape(j - 1, p)
        ll = multinomial_loglik(design, labels, theta)
        if np.linalg.norm(theta) > DIVERGENCE_BOUND:
            raise SeparationError(
                f"coefficient norm exceeded {DIVERGENCE_BOUND:g}; data are separated"
            )
    raise ConvergenceError(
        f"multinomial solver did not converge in {max_iter} iterations "
        f"(score max-norm {gnorm:.3e})",
        last_iterate=theta,
    )


def _check_multinomial_separation(probs, labels, num_classes, tol):
    eps = _saturation_eps(tol)
    for cls in range(1, num_classes + 1):
        members = labels == cls
        if members.any() and np.all(probs[members, cls - 1] >= 1.0 - eps):
            raise SeparationError(
                f"class {cls} perfectly predicted; data are separated"
            )
