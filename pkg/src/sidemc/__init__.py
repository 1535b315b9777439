"""Monte Carlo solver for linear parabolic stochastic integro-differential equations.

The solution is represented along characteristics: simulate the jump flow,
invert it, apply the linear transform, average over the latent noise and
restart at large jumps.
"""
__version__ = "0.1.0"

from .errors import ConfigurationError, EvaluationError, NumericalError, SideError
from .expr import Expression, ExpressionSyntaxError, parse_expression, to_source
from .noise import (JumpMeasureSpec, NoiseRealization, TimeGrid, compensator_quadrature, jump_events,
                    sample_noise, wiener_increments)
from .problem import (AuditGrid, CoefficientSet, Field, ProblemSpec, grid_holder_norm, verify_assumptions,
                      weighted_holder_norm)
from .jumpmaps import JumpMapHandle, conjugate_jump_map, diffeo_report, invert_jump_map
from .flow import FlowResult, invert_flow, simulate_flow, simulate_jacobian
from .transform import TransformState, decomposition_check, scalar_psi_closed_form, simulate_transform
from .solver import (SolutionField, compute_correction_terms, estimate_solution, interlace_large_jumps,
                     positivity_report, sweep_observed_seeds)
from .config import ConfigDocument, ConfigError, parse_config

__all__ = [name for name in dir() if not name.startswith("_")]
