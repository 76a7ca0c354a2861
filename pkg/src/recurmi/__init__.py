"""Recurrent-event cohort simulation, count imputation, and frailty models.

The package covers one analysis pipeline end to end:

1. :mod:`recurmi.simulate` draws cohorts with event dependence, subject
   heterogeneity, and an optional hidden pre-study event history.
2. :mod:`recurmi.riskset` turns a cohort into stratified risk intervals
   (counting-process or gap-time layout).
3. :mod:`recurmi.impute` fits a mean-parameterized Conway-Maxwell-Poisson
   count model and multiply imputes the unknown pre-study episode counts.
4. :mod:`recurmi.coxfrailty` fits stratified gamma-frailty proportional
   hazards models; :mod:`recurmi.pooling` combines per-imputation fits.
5. :mod:`recurmi.evaluate` and :mod:`recurmi.figures` run Monte Carlo
   scenario grids and report bias, coverage, and interval length.

The ``recurmi`` command line tool (see :mod:`recurmi.cli`) drives the same
pipeline from INI scenario files.
"""

from .config import parse_config, parse_config_text
from .coxfrailty import (
    CoxFit,
    CoxOptions,
    StratumDroppedWarning,
    breslow_partial_loglik,
    fit_cox_frailty,
)
from .distributions import ComPoissonParams, com_poisson_moments, com_poisson_sample
from .errors import (
    ConfigError,
    ConvergenceError,
    DataError,
    DegenerateFitError,
    DivergenceError,
    DomainError,
    FitError,
    NumericError,
    PoolingError,
    RecurMIError,
    SchemaError,
    SingularError,
)
from .evaluate import (
    CriterionFlags,
    ModelSummary,
    ReplicateResult,
    ScenarioSummary,
    check_criteria,
    flags_to_csv,
    population_id,
    run_replicate,
    run_scenario,
    summaries_to_csv,
    summarize,
    summary_csv_to_flags,
)
from .figures import figure_svg, render_figures, write_figures
from .impute import (
    ComPoissonFit,
    ImputedCohort,
    draw_params,
    fit_com_poisson_glm,
    fit_imputation_model,
    multiple_impute,
    predict_scores,
)
from .pooling import PooledFit, pool_rubin, pooled_from_single
from .riskset import (
    RiskRow,
    StrataMode,
    StratumLabel,
    assign_strata,
    layout_counting_process,
    layout_gap_time,
    rows_from_csv,
    rows_to_csv,
    strata_for_cohort,
)
from .simulate import (
    ALL_MODELS,
    DAYS_PER_YEAR,
    DEFAULT_BETA,
    MODEL_CHFM_STRATA,
    MODEL_SHFMI_CP,
    MODEL_SHFMI_GT,
    POPULATIONS,
    Cohort,
    PopulationSpec,
    ScenarioConfig,
    Subject,
    cohort_to_csv,
    episode_hazard_ratio,
    generate_cohort,
    observed_counts,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # errors
    "RecurMIError", "ConfigError", "DataError", "SchemaError", "DomainError",
    "FitError", "ConvergenceError", "DivergenceError", "DegenerateFitError",
    "SingularError", "NumericError", "PoolingError",
    # simulation
    "PopulationSpec", "POPULATIONS", "ScenarioConfig", "Subject", "Cohort",
    "generate_cohort", "observed_counts", "episode_hazard_ratio",
    "cohort_to_csv", "DEFAULT_BETA", "DAYS_PER_YEAR",
    "ALL_MODELS", "MODEL_SHFMI_CP", "MODEL_SHFMI_GT", "MODEL_CHFM_STRATA",
    # risk intervals
    "StrataMode", "StratumLabel", "RiskRow", "assign_strata",
    "strata_for_cohort", "layout_counting_process", "layout_gap_time",
    "rows_to_csv", "rows_from_csv",
    # count model and imputation
    "ComPoissonParams", "com_poisson_moments", "com_poisson_sample",
    "ComPoissonFit", "fit_com_poisson_glm", "draw_params", "predict_scores",
    "fit_imputation_model", "multiple_impute", "ImputedCohort",
    # fitting and pooling
    "CoxOptions", "CoxFit", "StratumDroppedWarning", "breslow_partial_loglik",
    "fit_cox_frailty", "PooledFit", "pool_rubin", "pooled_from_single",
    # evaluation
    "ReplicateResult", "ModelSummary", "ScenarioSummary", "CriterionFlags",
    "run_replicate", "run_scenario", "summarize", "check_criteria",
    "population_id", "summaries_to_csv", "flags_to_csv", "summary_csv_to_flags",
    # figures and config
    "figure_svg", "render_figures", "write_figures",
    "parse_config", "parse_config_text",
]
