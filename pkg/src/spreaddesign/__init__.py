"""Model-based survey design for spreading populations.

Fits a Bayesian ecological-diffusion model to gridded survey counts,
forecasts future abundance intensity, and selects the set of survey
transects that minimizes the forecast variance of total abundance via
parallel random search refined by an exchange algorithm.
"""

__version__ = "0.1.0"

from .design import (
    CriterionResult,
    Design,
    EvaluationContext,
    SearchReport,
    build_evaluation_context,
    criterion_qd,
    design_space_size,
    evaluate_design,
    exchange_improve,
    optimize,
    random_search,
)
from .diffusion import (
    GrowthModel,
    IntensityField,
    MotilityField,
    Propagator,
    build_propagator,
    initial_condition,
    motility_field,
    propagate,
    stability_check,
)
from .domain import (
    CovariateRaster,
    Grid,
    Transect,
    TransectSet,
    build_grid,
    design_cells,
    enumerate_transects,
    shoreline_complexity,
    standardize,
)
from .errors import (
    ConfigError,
    DataFormatError,
    DomainError,
    NumericError,
    SpreadDesignError,
    StabilityError,
)
from .forecast import (
    ForecastDraws,
    ImputedDataset,
    forecast,
    posterior_predictive,
    refit_with_imputation,
    total_abundance_intensity,
)
from .mcmc import (
    ChainConfig,
    PosteriorSamples,
    bayesian_p_value,
    gelman_rubin,
    run_chain,
)
from .model import (
    LatentState,
    ModelSpec,
    SurveyData,
    Theta,
    complete_data_loglik,
    log_prior,
    sample_latent_n,
    sample_phi,
)
from .synth import Scenario, reference_scenario, simulate_survey, simulate_truth
