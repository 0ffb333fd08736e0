"""Adaptive spline additive models for load-style time series.

Fit per-instant penalized spline models, adapt them online through regime
breaks (Kalman filtering with an optional break covariance, exponential
forgetting), fine-tune coefficients on scarce new data, transfer fine-tuned
deltas across series, and aggregate expert forecasts online.
"""

from .adapt import (
    AdaptiveRun,
    ExpLsConfig,
    ExpLsEstimator,
    GreedyQResult,
    KalmanConfig,
    KalmanFilterAdapter,
    KalmanState,
    expls_fit,
    greedy_search_q,
    kalman_loglik,
    kalman_step,
    run_adaptive,
    solve_theta1,
    static_kalman_fit,
    tune_forgetting,
)
from .aggregate import (
    MixtureState,
    MlPolyAggregator,
    admit_experts,
    initial_state,
    mlpoly_update,
    saturday_expert,
)
from .evaluate import (
    BacktestPlan,
    BacktestResult,
    Metrics,
    ScoreCard,
    backtest,
    metrics,
    preset_plan_2020,
    synthetic_preset,
)
from .features import build_features, exp_smooth, split_by_instant
from .gam import (
    CategoricalTerm,
    GamSpec,
    InteractionTerm,
    InterceptTerm,
    LinearByTerm,
    LinearTerm,
    SmoothTerm,
    SplineGamRegressor,
    TensorSmoothTerm,
    compact_load_spec,
    default_load_spec,
)
from .residual import ArModel, correct_forecast, fit_ar
from .splines import SplineBasis, build_basis
from .synth import Scenario, counterfactual, gen_synthetic
from .timetable import TimeTable, parse_load_csv
from .transfer import (
    FinetuneConfig,
    TransferLink,
    compute_step_size,
    estimate_rho,
    finetune,
    finetune_model,
    gam_delta_forecast,
    gam_delta_finetuned,
    predict_with,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
