"""Security investment optimization for SIS dynamics on dependence graphs."""

from .dynamics import (
    BreachModel,
    Equilibrium,
    dynamics_rhs,
    integrate_ode,
    is_nonsingular_m_matrix,
    solve_mscc_equilibrium,
    spectral_radius,
    stable_equilibrium,
)
from .errors import (
    GenerationError,
    InputError,
    NumericError,
    ParseError,
    SisInvestError,
    SolverError,
)
from .graph import (
    Condensation,
    DependenceGraph,
    add_cross_edges,
    build_graph,
    condense,
    generate_scale_free,
    parse_edge_list,
)
from .perturb import PerturbationScheme, sensitivity_eps, sweep_equilibrium
from .relax import (
    BoundsReport,
    DomainSpec,
    build_relaxation,
    check_exactness,
    recover_feasible,
    solve_barrier,
)
from .rgm import (
    FeasibleSet,
    LinearCost,
    RgmSettings,
    gradient,
    objective,
    solve_rgm,
)

__version__ = "0.1.0"
