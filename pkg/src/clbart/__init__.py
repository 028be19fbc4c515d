"""Heterogeneous exposure effects in case-crossover designs.

A conditional logistic regression whose exposure coefficient is modeled by
a sum of regression trees over individual-level moderators, fit by
reversible-jump MCMC, plus the posterior summary toolkit and a simulation
benchmark.
"""

__version__ = "0.1.0"

from .clr import ClrFit, clr_fit, stratum_loglik, stratum_score_fisher
from .errors import (
    ClbartError,
    ConvergenceError,
    CoverageError,
    DesignViolationError,
    EmptyCohortError,
    IdentifiabilityError,
    LogConcavityError,
    MalformedStratumError,
    ModeratorKindError,
    ParseError,
)
from .forest import ForestParams, Tree, forest_predict, sample_split_rule, split_prob
from .posterior import (
    CartSummary,
    EffectSummary,
    average_effect,
    cart_summary,
    individual_effects,
    marginal_contribution,
    partial_dependence,
    variable_importance,
)
from .sampler import (
    PosteriorDraws,
    SamplerConfig,
    WaicResult,
    compute_waic,
    run_chain,
)
from .simbench import (
    CohortTruth,
    Metrics,
    ScenarioSpec,
    eval_metrics,
    gen_effect_surface,
    gen_exposure,
    oracle_fit,
    simulate_cohort,
)
from .strata import (
    ColumnSchema,
    Dataset,
    Event,
    Stratum,
    build_time_stratified_windows,
    ingest_dataset,
    referent_dates,
)

__all__ = [name for name in dir() if not name.startswith("_")]
