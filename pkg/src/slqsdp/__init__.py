"""Stochastic LQ design by Riccati iteration and by model-based / data-driven SDPs."""

from .data import (
    ProbingPolicy,
    TrajectoryBatch,
    load_batch,
    mc_average,
    rank_check,
    save_batch,
    simulate_batch,
)
from .riccati import (
    PolicyValue,
    RiccatiSolution,
    cost_of_gain,
    evaluate_q,
    gain_from_h,
    h_from_p,
    optimal_cost,
    solve_dare,
)
from .system import (
    CostSpec,
    InitialState,
    Instance,
    LinearSystem,
    NoiseModel,
    augment,
    check_stabilizable_detectable,
    is_admissible,
    spectral_radius,
    zoh_discretize,
)

__version__ = "0.1.0"
