"""The per-load-step algebraic minimization problem.

One load step minimizes J = J0 + phi over the vertex-blocked coefficients
(u, d), where J0 is the smooth quadrature functional of :mod:`assembly` and
phi the nodal indicator of the box d_i in [d_n(p_i), 1] (irreversibility
from below, full damage from above).  phi is lumped at the vertices and is
represented by an infinite-energy sentinel, never by an exception.
"""

from __future__ import annotations

import numpy as np

from . import assembly
from .grid import BoundaryConditions, GridHierarchy


class State:
    """Nodal displacements and damage in vertex-blocked storage.

    ``u`` (M, 2) and ``d`` (M,) are views into one contiguous (M, 3) array
    whose ravel is the flat blocked dof vector (u1, d1, ..., uM, dM).
    """

    def __init__(self, num_vertices: int, array: np.ndarray | None = None):
        if array is None:
            array = np.zeros((num_vertices, 3))
        assert array.shape == (num_vertices, 3)
        self.array = array

    @property
    def num_vertices(self) -> int:
        return self.array.shape[0]

    @property
    def u(self) -> np.ndarray:
        return self.array[:, :2]

    @property
    def d(self) -> np.ndarray:
        return self.array[:, 2]

    @property
    def flat(self) -> np.ndarray:
        return self.array.reshape(-1)

    def copy(self) -> "State":
        return State(self.num_vertices, self.array.copy())

    @classmethod
    def from_flat(cls, flat: np.ndarray) -> "State":
        arr = np.asarray(flat, dtype=float).reshape(-1, 3)
        return cls(arr.shape[0], arr)


class IncrementProblem:
    """Algebraic increment functional for one load step.

    Holds the grid hierarchy (the problem lives on the finest level), the
    material, the Dirichlet data at the new load value, the lower damage
    obstacle d_n (the previous step's damage) and an optional external load
    functional acting on the displacement dofs (zero for the pure-Dirichlet
    benchmark, kept general for other load cases).
    """

    def __init__(self, hierarchy: GridHierarchy, material, bc: BoundaryConditions,
                 load: float, obstacle: np.ndarray, pext: np.ndarray | None = None):
        self.hierarchy = hierarchy
        self.material = material
        self.bc = bc
        self.load = float(load)
        self.obstacle = np.asarray(obstacle, dtype=float)
        M = hierarchy.finest.num_vertices
        if self.obstacle.shape != (M,):
            raise ValueError("obstacle length must match the finest vertex count")
        if np.any(self.obstacle < 0.0) or np.any(self.obstacle > 1.0):
            raise ValueError("obstacle must lie in [0, 1]")
        self.pext = np.zeros((M, 2)) if pext is None else np.asarray(pext, dtype=float)

    @property
    def level(self):
        return self.hierarchy.finest

    @property
    def num_vertices(self) -> int:
        return self.level.num_vertices

    def zero_state(self) -> State:
        return State(self.num_vertices)

    def apply_dirichlet(self, state: State) -> None:
        self.bc.apply(state, self.load)


def energy(problem: IncrementProblem, state: State) -> float:
    """J(state): J0 if the damage box constraints hold, +inf otherwise.

    Feasibility of the box is tested with zero tolerance; Dirichlet data is
    an affine subspace constraint handled by the solvers, not part of J.
    """
    d = state.d
    if np.any(d < problem.obstacle) or np.any(d > 1.0):
        return float("inf")
    return assembly.energy_smooth(problem, state)


def project_feasible(problem: IncrementProblem, state: State) -> State:
    """Euclidean projection onto the feasible box (clamps only d)."""
    out = state.copy()
    np.clip(out.d, problem.obstacle, 1.0, out=out.d)
    return out


def stationarity_measure(problem: IncrementProblem, state: State,
                         gradient: np.ndarray | None = None) -> float:
    """Norm of the box-projected gradient; zero at first-order optimality.

    Free displacement dofs contribute their raw gradient component.  For a
    damage dof at the lower obstacle only the negative gradient part counts
    (a positive one is a valid KKT multiplier), at the upper bound only the
    positive part; Dirichlet dofs are excluded.
    """
    if gradient is None:
        gradient = assembly.assemble_gradient(problem, state)
    g = gradient.reshape(-1, 3).copy()
    g[:, :2][problem.bc.u_mask] = 0.0
    gd = g[:, 2]
    at_lower = state.d <= problem.obstacle
    at_upper = state.d >= 1.0
    gd[at_lower] = np.minimum(gd[at_lower], 0.0)
    gd[at_upper] = np.maximum(gd[at_upper], 0.0)
    gd[problem.bc.d_mask] = 0.0
    return float(np.linalg.norm(g.ravel()))


def reaction_force(problem: IncrementProblem, state: State) -> float:
    """Total vertical force transmitted through the loaded edge (kN).

    Sum of the assembled-gradient y-components over the vertices with
    prescribed vertical displacement on the loaded edge, i.e. the internal
    force residual at the constrained dofs.
    """
    g = assembly.assemble_gradient(problem, state).reshape(-1, 3)
    return float(g[problem.bc.reaction_vertices, 1].sum())
