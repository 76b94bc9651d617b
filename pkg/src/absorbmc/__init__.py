"""Random walks with a probabilistic absorber.

Exact 1-D path-count formulas, a truncated lattice Markov chain with a Monte
Carlo cross-check, a three-parameter continuous channel fit, emission
concentrations and an M/M/1/1 receptor fixed point.
"""

__version__ = "0.1.0"

from .closed_form import p_any, p_boundary, p_free, p_inside, p_outside
from .concentration import (
    DivergentRegimeError,
    EmissionSpec,
    conc_continuous,
    conc_instant,
    conc_steady,
    steady_state_validity,
    upper_incomplete_gamma,
)
from .lattice_walk import (
    AbsorberSpec,
    Convention,
    TruncationError,
    WalkConfig,
    build_chain,
    evolve,
    monte_carlo,
    occupancy_at,
)
from .model_fit import (
    FitDataset,
    FitParams,
    ParamTable,
    build_param_table,
    fit,
    interp_params,
    model_eval,
)
from .receptor_queue import (
    QueueSolution,
    ReceptorSpec,
    TableDomainError,
    arrival_rate,
    blocking_q,
    solve_fixed_point,
    sweep_queue,
)
