"""Average-reward reinforcement learning at desk scale.

Exact tabular oracles for average-reward MDPs, RVI Q-learning with a
delayed f(Q) offset, a minimal exact-gradient neural stack, and an
average-reward soft actor-critic (RVI-SAC) with automatic reset-cost
tuning, plus the experiment harness that drives them.
"""

from avgrl.mdp import (
    TabularMdp,
    TabularPolicy,
    StationaryDistribution,
    average_reward,
    bellman_residual,
    enumerate_optimal,
    evaluate_bias,
    soft_average_reward,
    solve_optimal_rvi,
    stationary_distribution,
    validate_ergodic,
)
from avgrl.tabular import FChoice, StepSchedule, TabularTrainer, g_eta

__all__ = [
    "TabularMdp",
    "TabularPolicy",
    "StationaryDistribution",
    "average_reward",
    "bellman_residual",
    "enumerate_optimal",
    "evaluate_bias",
    "soft_average_reward",
    "solve_optimal_rvi",
    "stationary_distribution",
    "validate_ergodic",
    "FChoice",
    "StepSchedule",
    "TabularTrainer",
    "g_eta",
]
