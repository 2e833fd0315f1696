"""Perturbative one-shot transfer for weakly nonlinear PDEs.

A multi-head physics-informed network is trained once on a linear operator.
Its last hidden layer then serves as a fixed basis: each linear subproblem of
the perturbation series is solved in closed form, and the truncated series
approximates the nonlinear solution.
"""

from .cascade import PerturbationPlan, assemble_solution, build_plan, enumerate_compositions
from .expressions import Expr, ExpressionError
from .grid import Grid, GridField
from .network import MultiHeadCheckpoint, load_checkpoint, save_checkpoint
from .presets import PRESETS, get_preset
from .problem import (
    ConditionSpec,
    LinearOperator,
    PdeProblem,
    Polynomial,
    SpaceTimeDomain,
    kpp_initial_profile,
    kpp_polynomial,
    validate_problem,
)
from .reference import MolConfig, relative_error, solve_reference
from .training import TrainConfig, train
from .transfer import assemble_latent_system, cached_latent_system, solve_cascade, solve_head

__version__ = "0.1.0"
