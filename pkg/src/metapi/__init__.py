"""Prediction intervals for random-effects meta-analysis, and a simulation
harness that measures their coverage."""

__version__ = "0.1.0"

from metapi.core import (  # noqa: E402
    HeterogeneityStats,
    MetaDataset,
    REFit,
    StudySummary,
    cochran_q,
    fit_dl,
    fit_reml,
    re_fit,
    tau2_reml,
)
from metapi.distributions import TrueEffectDist, make_true_effect_dist  # noqa: E402
from metapi.errors import (  # noqa: E402
    ConfigError,
    ConvergenceError,
    DatasetError,
    InputError,
    MetaPIError,
    NumericError,
    ParameterError,
    ScenarioAbort,
)
from metapi.intervals import (  # noqa: E402
    PRESETS,
    PIMethodSpec,
    PredictionInterval,
    bootstrap_pi,
    compute_pi,
    ensemble_pi,
    get_method,
    hts_pi,
    sample_tau2_confidence,
)
from metapi.quadform import WeightedChiSquare, weighted_chisq_cdf  # noqa: E402
from metapi.simulation import (  # noqa: E402
    GridConfig,
    Scenario,
    build_grid,
    coverage,
    generate_dataset,
    run_scenario,
    summarize,
    theoretical_length,
)
