"""Phase-field brittle fracture solvers.

A 2D finite element library for the fully implicit variational increment
problem of small-strain phase-field fracture, solved by a truncated
nonsmooth Newton multigrid iteration, together with an H-field
operator-splitting baseline and a benchmark CLI.
"""

from .bench import RunConfig, parse_config, run_experiment, write_force_csv, write_stats_csv, write_vtk
from .grid import BoundaryConditions, GridHierarchy, QuadratureData, build_single_notch_mesh, strain_at_qp
from .assembly import assemble_gen_hessian, assemble_gradient
from .increment import (
    IncrementProblem,
    State,
    energy,
    project_feasible,
    reaction_force,
    stationarity_measure,
)
from .linalg import BlockSparseMatrix, TruncationMask, apply_truncation, block_gauss_seidel, v_cycle
from .materials import (
    DensityEval,
    MaterialModel,
    SymTensor,
    crack_density,
    degradation,
    eig_sym,
    psi_eval,
    split_energy,
)
from .opsplit import HistoryField, solve_damage, solve_displacement, solve_increment_opsplit, update_history
from .tnnmg import (
    SolverReport,
    TnnmgConfig,
    damped_update,
    linear_correction,
    presmooth,
    smooth_vertex_damage,
    smooth_vertex_displacement,
    solve_increment,
)

__version__ = "0.1.0"

__all__ = [
    "BlockSparseMatrix",
    "BoundaryConditions",
    "DensityEval",
    "GridHierarchy",
    "HistoryField",
    "IncrementProblem",
    "MaterialModel",
    "QuadratureData",
    "RunConfig",
    "SolverReport",
    "State",
    "SymTensor",
    "TnnmgConfig",
    "TruncationMask",
    "apply_truncation",
    "assemble_gen_hessian",
    "assemble_gradient",
    "block_gauss_seidel",
    "build_single_notch_mesh",
    "crack_density",
    "damped_update",
    "degradation",
    "eig_sym",
    "energy",
    "linear_correction",
    "parse_config",
    "presmooth",
    "project_feasible",
    "psi_eval",
    "reaction_force",
    "run_experiment",
    "smooth_vertex_damage",
    "smooth_vertex_displacement",
    "solve_damage",
    "solve_displacement",
    "solve_increment",
    "solve_increment_opsplit",
    "split_energy",
    "stationarity_measure",
    "strain_at_qp",
    "update_history",
    "v_cycle",
    "write_force_csv",
    "write_stats_csv",
    "write_vtk",
]
