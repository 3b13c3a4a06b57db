"""Model-free policy iteration for continuous-time stochastic LQR.

Linear dynamics driven by state- and control-dependent (multiplicative)
noise entering through the input matrix.  The package provides the
model-based generalized Riccati solver (Kleinman/Newton iteration), an
Euler-Maruyama trajectory sampler with reproducible counter-based
randomness, the data-driven policy-iteration learner that works from
sampled trajectories alone, and an experiment harness that measures how
the learned solution converges as the sampling period shrinks.
"""

__version__ = "0.1.0"

from .errors import (
    AdmissibilityError,
    ConfigError,
    ConvergenceError,
    DivergenceError,
    ExcitationError,
    SingularOperatorError,
    StochLqrError,
)
from .model import (
    ArmParams,
    InitialState,
    LinearStochasticSystem,
    default_initial_gain,
    load_system,
    sensorimotor_arm,
    validate_system,
)
from .sde import (
    ExplorationSignal,
    SampledPlant,
    default_exploration,
    simulate,
    simulate_batch,
    zero_exploration,
)
from .riccati import RiccatiSolution, kleinman_step, newton_step, solve
from .adp import AdpConfig, AdpResult, run_adp, run_pi_exact
from .harness import (
    RateFit,
    SweepConfig,
    SweepRecord,
    expected_cost_exact,
    expected_cost_mc,
    fit_rate,
    sweep_h,
)

__all__ = [
    "__version__",
    "AdmissibilityError",
    "ConfigError",
    "ConvergenceError",
    "DivergenceError",
    "ExcitationError",
    "SingularOperatorError",
    "StochLqrError",
    "ArmParams",
    "InitialState",
    "LinearStochasticSystem",
    "default_initial_gain",
    "load_system",
    "sensorimotor_arm",
    "validate_system",
    "ExplorationSignal",
    "SampledPlant",
    "default_exploration",
    "simulate",
    "simulate_batch",
    "zero_exploration",
    "RiccatiSolution",
    "kleinman_step",
    "newton_step",
    "solve",
    "AdpConfig",
    "AdpResult",
    "run_adp",
    "run_pi_exact",
    "RateFit",
    "SweepConfig",
    "SweepRecord",
    "expected_cost_exact",
    "expected_cost_mc",
    "fit_rate",
    "sweep_h",
]
