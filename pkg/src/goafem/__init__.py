"""Goal-oriented adaptive P1 finite elements with inexact multilevel PCG solves."""
from .assembly import CoefficientField, DofMap, GoalData, ProblemData
from .bench import BenchmarkProblem, get_problem
from .driver import AdaptiveConfig, History, run
from .marking import MarkingConfig, mark
from .mesh import Mesh, build_initial, check_conformity, refine_nvb

__all__ = [
    "AdaptiveConfig", "BenchmarkProblem", "CoefficientField", "DofMap", "GoalData", "History",
    "MarkingConfig", "Mesh", "ProblemData", "build_initial", "check_conformity", "get_problem",
    "mark", "refine_nvb", "run",
]
