"""Momentum-uncertainty gating for adaptive test-time scaling.

Tracks per-step generation uncertainty of a stepwise LLM, aggregates it into
an exponentially weighted momentum estimate, and triggers expensive scaling
strategies (best-of-n, critique refinement, thinking mode) only on steps that
deviate from the trajectory's accumulated confidence.
"""

from .backend import (
    BackendDescriptor,
    GenerationContext,
    HttpBackend,
    MockBackend,
    MockScript,
    StepGeneration,
)
from .harness import (
    DatasetItem,
    RunConfig,
    RunMetrics,
    StrategyClients,
    Trajectory,
    check_answer,
    extract_answer,
    load_dataset,
    replay_gating,
    run_dataset,
    run_trajectory,
)
from .strategies import StrategyOutcome, critic_refine, guided_search, thinking_switch
from .theory import (
    BoundReport,
    DriftModel,
    NoiseModel,
    bias_bound_experiment,
    compare_momentum_vs_average,
    empirical_variance_experiment,
    gradient_form_identity,
    misfire_bound_experiment,
    misfire_exponent_coefficient,
    simple_average_variance,
    variance_coefficient,
)
from .uncertainty import (
    GateDecision,
    MomentumState,
    RunningMeanState,
    ScalePolicy,
    StepUncertainty,
    TokenLogProb,
    gate,
    momentum_closed_form,
    momentum_update,
    running_mean_update,
    step_uncertainty,
    token_level_confidence,
)

__version__ = "0.1.0"
