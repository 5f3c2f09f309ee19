"""Resource-balance-variance task placement."""

from .backend import backend_name
from .core import (
    Candidate,
    Problem,
    SchedulerConfig,
    ScoredScheme,
    TaskScore,
    build_problem,
    compatible,
    explain_choice,
    resource_fractions,
    score_all,
    score_scheme,
    select_allocation,
    select_scored,
)

__all__ = [
    "Candidate",
    "Problem",
    "SchedulerConfig",
    "ScoredScheme",
    "TaskScore",
    "backend_name",
    "build_problem",
    "compatible",
    "explain_choice",
    "resource_fractions",
    "score_all",
    "score_scheme",
    "select_allocation",
    "select_scored",
]
