"""Exponential-utility hedging in scaled trinomial models and its volatility-control limit."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    InputError,
    ModelParams,
    Payoff,
    bs_price,
    entropy_penalty,
    nonlinearity_K,
    nonlinearity_K_derivatives,
)
from .lattice import (  # noqa: E402
    VolFractionPolicy,
    dual_ce,
    dual_policy_bound,
    enumerate_ce,
    hedged_ce,
    primal_ce,
    primal_ce_numeric,
)
from .pde import LogGrid, PdeSolution, cfl_dt, closed_form_log_payoff, solve_hjb  # noqa: E402
from .hedge import HedgeStrategy, build_delta_strategy, evaluate_hedge, simulate_pnl  # noqa: E402
from .limits import AlphaPolicy, convergence_study, limit_references, mc_control_value  # noqa: E402
