"""SGD as stochastic approximation: objectives, oracle, dynamics, flow and analysis."""
from .analysis import (
    Tolerances,
    chung_oracle,
    classify_run,
    energy,
    energy_growth_check,
    ensemble_stats,
    escape_statistics,
    fit_power_law,
    fit_rate,
    stay_probability,
)
from .dynamics import StepSchedule, admissible, run_batch, run_sgd, step_size
from .flow import FlowMap, InterpolatedPath, apt_deviation, apt_profile, integrate_flow, lyapunov_check
from .objectives import builtin_objective, check_assumptions
from .oracle import builtin_noise, estimate_excitation, sample

__version__ = "0.1.0"
