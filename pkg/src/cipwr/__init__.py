"""Treatment-specific survival at a fixed horizon from censored cohorts.

The centerpiece is a censoring-adjusted inverse-probability-weighted
regression estimator: complete cases are reweighted by the product of the
propensity of the received arm and the model-based probability of remaining
uncensored, an outcome regression is fit under those weights, and its
predictions are standardized over the full cohort.  Comparator estimators,
analytic and bootstrap inference, synthetic scenarios, and a command line
front end live in the submodules.
"""

from .data import Dataset, SubjectRecord, derive_coarsening, validate_dataset
from .design import DesignSpec, Term, build_design, parse_term, parse_terms
from .estimators import (
    EstimateResult,
    METHODS,
    Nuisances,
    PipelineSpec,
    contrasts_from_arms,
    estimate_caipw_wang,
    estimate_cipw,
    estimate_cipwr,
    estimate_ipw,
    estimate_naive,
    estimate_pseudo_ipw,
    fit_nuisances,
    result_quantities,
    run_pipeline,
)
from .exceptions import (
    BootstrapDegenerateError,
    CipwrError,
    ConfigError,
    ConvergenceError,
    DatasetValidationError,
    DesignError,
    EmptyCellError,
    ModeError,
    MonteCarloDegenerateError,
    NoEventsError,
    PositivityError,
    RankError,
    SeparationError,
    SingularBlockError,
    TrimDegenerateError,
    UndefinedAtHorizonError,
)
from .glm import (
    LogisticFit,
    MultinomialFit,
    fit_multinomial,
    fit_weighted_logistic,
    predict_propensity,
)
from .inference import (
    BootstrapResult,
    SandwichResult,
    bootstrap,
    cipwr_sandwich,
    wald_ci,
)
from .simulate import (
    MetricsTable,
    ScenarioConfig,
    TruthResult,
    calibrate_censoring_offset,
    censored_fraction,
    generate_dataset,
    run_monte_carlo,
    setting_one_config,
    setting_two_config,
    truth_oracle,
)
from .survival import (
    CensoringFit,
    CoxFit,
    StepFunction,
    breslow_cumhaz,
    fit_censoring_models,
    fit_cox,
    jackknife_pseudo,
    kaplan_meier,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
