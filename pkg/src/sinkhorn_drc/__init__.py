"""Distributionally robust finite-horizon control over Sinkhorn ambiguity sets."""

from .ambiguity import (
    AmbiguitySpec,
    DiscreteMeasure,
    GaussianReference,
    ball_nesting_check,
    discrete_ot,
    discrete_sinkhorn,
    feasibility_oracle,
    feasibility_threshold,
)
from .duality import QuadraticLoss, dual_objective, log_partition, worst_case_risk
from .synthesis import (
    MomentSpec,
    SolutionBundle,
    SynthesisRequest,
    Tolerances,
    assemble_sinkhorn_program,
    empirical_feasibility_boundary,
    evaluate_expected_cost,
    q_swap_certificate,
    synthesize_h2,
    synthesize_nominal,
    synthesize_sinkhorn,
    synthesize_wasserstein,
)
from .system import (
    ClosedLoopMap,
    CostSpec,
    SampleSet,
    SystemSpec,
    build_stacked,
    closed_loop_from_controller,
    mass_spring_damper,
    monte_carlo_cost,
    recover_controller,
    rollout,
)

__version__ = "0.1.0"
