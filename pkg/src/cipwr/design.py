"""Design-matrix construction from small covariate-transform term lists.

A term is a product of integer powers of raw covariates, e.g. ``x1``,
``x1*x2`` or ``x2^2``; the bare intercept is spelled ``1``.  Terms are kept
deliberately tiny: they exist so configuration files can name the columns of
the outcome, treatment and censoring models without shipping code.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DesignError

_FACTOR_RE = re.compile(r"^x(\d+)(?:\^(\d+))?$")


@dataclass(frozen=True)
class Term:
    """Product of (covariate_index, power) factors; empty factors = intercept.

    Covariate indices are 0-based internally; the string form is 1-based
    (``x1`` is column 0) to match the usual naming of simulated covariates.
    """

    factors: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        for index, power in self.factors:
            if index < 0:
                raise DesignError(f"covariate index must be >= 0, got {index}")
            if power < 1:
                raise DesignError(f"power must be >= 1, got {power}")

    @property
    def is_intercept(self) -> bool:
        return not self.factors

    def max_index(self) -> int:
        return max((i for i, _ in self.factors), default=-1)

    def label(self) -> str:
        if not self.factors:
            return "1"
        return "*".join(
            f"x{i + 1}" if p == 1 else f"x{i + 1}^{p}" for i, p in self.factors
        )

    def uses(self, index: int) -> bool:
        return any(i == index for i, _ in self.factors)


def parse_term(text: str) -> Term:
    """Parse ``"1"``, ``"x3"``, ``"x1*x2"``, ``"x2^2"`` into a Term."""
    text = text.strip()
    if text == "1":
        return Term()
    factors: dict[int, int] = {}
    for piece in text.split("*"):
        m = _FACTOR_RE.match(piece.strip())
        if m is None:
            raise DesignError(f"cannot parse term factor {piece!r} in {text!r}")
        index = int(m.group(1)) - 1
        power = int(m.group(2) or 1)
        if index < 0:
            raise DesignError(f"covariate names are 1-based, got {piece!r}")
        factors[index] = factors.get(index, 0) + power
    return Term(tuple(sorted(factors.items())))


def parse_terms(texts) -> tuple[Term, ...]:
    return tuple(parse_term(t) if isinstance(t, str) else t for t in texts)


@dataclass(frozen=True)
class DesignSpec:
    """Term lists for the three working models.

    The outcome design always carries a leading intercept; one is prepended
    if the given list lacks it.  Treatment terms normally include ``1`` as
    well, while the censoring design is intercept-free (the proportional
    hazards baseline absorbs it).
    """

    outcome_terms: tuple[Term, ...]
    treatment_terms: tuple[Term, ...]
    censoring_terms: tuple[Term, ...] = ()
    covariate_dim: int | None = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "outcome_terms", parse_terms(self.outcome_terms))
        object.__setattr__(self, "treatment_terms", parse_terms(self.treatment_terms))
        object.__setattr__(self, "censoring_terms", parse_terms(self.censoring_terms))
        if not any(t.is_intercept for t in self.outcome_terms):
            object.__setattr__(
                self, "outcome_terms", (Term(),) + self.outcome_terms
            )
        if self.covariate_dim is not None:
            for group, terms in (
                ("outcome", self.outcome_terms),
                ("treatment", self.treatment_terms),
                ("censoring", self.censoring_terms),
            ):
                for t in terms:
                    if t.max_index() >= self.covariate_dim:
                        raise DesignError(
                            f"{group} term {t.label()} references covariate "
                            f"index {t.max_index()} but only "
                            f"{self.covariate_dim} covariates exist"
                        )

    def drop_covariate(self, index: int, parts=("outcome", "treatment", "censoring")) -> "DesignSpec":
        """Return a copy with every term touching ``index`` removed from ``parts``."""

        def strip(terms, name):
            if name not in parts:
                return terms
            return tuple(t for t in terms if not t.uses(index))

        return DesignSpec(
            outcome_terms=strip(self.outcome_terms, "outcome"),
            treatment_terms=strip(self.treatment_terms, "treatment"),
            censoring_terms=strip(self.censoring_terms, "censoring"),
            covariate_dim=self.covariate_dim,
        )


def build_design(covariates: np.ndarray, terms) -> np.ndarray:
    """Evaluate a term list on an (n, p) covariate matrix.

    Returns an (n, len(terms)) float matrix; an empty term list yields an
    (n, 0) matrix, which downstream proportional-hazards code accepts.
    """
    covariates = np.asarray(covariates, dtype=float)
    if covariates.ndim != 2:
        raise DesignError("covariates must be a 2-d array")
    n, p = covariates.shape
    terms = parse_terms(terms)
    cols = np.empty((n, len(terms)), dtype=float)
    for k, term in enumerate(terms):
        if term.max_index() >= p:
            raise DesignError(
                f"term {term.label()} references covariate index "
                f"{term.max_index()} but data has {p} covariates"
            )
        col = np.ones(n, dtype=float)
        for index, power in term.factors:
            col = col * covariates[:, index] ** power
        cols[:, k] = col
    return cols
