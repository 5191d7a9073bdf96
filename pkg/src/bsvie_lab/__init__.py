"""Discrete solvers and diagnostics for backward stochastic Volterra integral
equations driven by Brownian motion, Poisson random measures and an
orthogonal martingale."""

__version__ = "0.1.0"

from .constants import check_type1, check_type2, min_beta, solve_delta_star  # noqa: E402
from .lattice import build_tree, simulate_paths, uniform_clock  # noqa: E402
from .bsde import Generator, linear_generator, solve_bsde  # noqa: E402
from .bsvie import (FreeTerm, complete_M, picard_type1, solve_sfie, solve_type1,  # noqa: E402
                    solve_type1_noY, solve_type2)
