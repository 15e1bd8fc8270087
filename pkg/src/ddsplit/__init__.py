"""Nonoverlapping domain decomposition by strongly convergent primal-dual
proximal splitting, with Haugazeau-style best-approximation projections."""

__version__ = "0.1.0"

from .linalg import InnerProductSpace, SolverFailure, SparseSpd, SpdFactorization, spd_solve
from .mesh import (
    Interface,
    Partition,
    SubdomainGrid,
    TraceMap,
    assemble_load,
    assemble_mass,
    assemble_stiffness,
    build_partition_1d,
    build_partition_2d_strips,
    energy_gram,
    global_grid_1d,
    global_grid_2d,
    merge_partition,
    trace_apply,
)
from .harmonic import HarmonicLift, adjoint_sum, build_lifts, interface_jumps, q_lift
from .splitting import (
    AlgorithmFailure,
    AlgorithmParams,
    IterationReport,
    PrimalDualPoint,
    ProblemOracles,
    ProductSpace,
    RunResult,
    haugazeau_project,
    iterate_once,
    kt_residual,
    run,
)
from .prox import (
    InterfaceCouplingSpec,
    ObstacleSpec,
    PLaplacianSpec,
    QuadraticEnergySpec,
    prox_interface,
    prox_obstacle,
    prox_plaplacian,
    prox_quadratic,
    quadratic_energy_spec,
)
from .problems import (
    ProblemSpec,
    build,
    complementarity_report,
    dual_flux_report,
    efficient_primal_update,
    glue,
    stationarity_residual,
)
from .oracle import (
    OracleError,
    energy_distance,
    haugazeau_reference,
    kt_point,
    monolithic_obstacle,
    monolithic_plaplacian,
    monolithic_poisson,
    qp_project_two_halfspaces,
    verify_kt_point,
)
