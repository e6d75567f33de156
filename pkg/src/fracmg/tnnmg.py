"""Truncated nonsmooth Newton multigrid for the increment problem.

One iteration performs

1. nonlinear presmoothing: a Gauss-Seidel pass over the vertices,
   alternating the local displacement and damage subspaces at each vertex,
2. inexact linear correction: one geometric V(3,3) cycle for the
   generalized-Hessian Newton system, truncated to the dofs away from both
   damage bounds and from the Dirichlet set,
3. Euclidean projection of the correction onto the feasible box,
4. a damped update accepting the first step length (backtracking from one)
   that does not increase the energy.

Steps 1 and 4 enforce energy monotonicity as computed, which is the
convergence-theory requirement; projection keeps every iterate feasible.

Two local displacement solvers are available: ``ex`` solves each local
problem with a damped semismooth Newton iteration to high accuracy, ``pre``
takes a single step preconditioned by the fixed local upper-bound stiffness
(1 + k) times the undegraded elasticity, which majorizes every degraded
Hessian selection and therefore descends without a line search.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import assembly
from . import materials as mat
from ._kernels import smoother_sweep
from .grid import qp_fields
from .increment import IncrementProblem, State, energy, project_feasible, stationarity_measure
from .linalg import TruncationMask, apply_truncation, build_mg_hierarchy, v_cycle

SMOOTHERS = ("ex", "pre")


@dataclass
class TnnmgConfig:
    """Solver options; defaults reproduce the benchmark setup."""

    smoother: str = "ex"
    tolerance: float = 1.0e-7
    max_iterations: int = 2000
    truncation_tol: float = 1.0e-10
    ls_max_halvings: int = 30
    local_newton_tol: float = 1.0e-12
    local_newton_max: int = 25
    warm_start_displacement: bool = False
    mg_presmooth: int = 3
    mg_postsmooth: int = 3

    def __post_init__(self):
        self.smoother = self.smoother.lower()
        if self.smoother not in SMOOTHERS:
            raise ValueError(f"unknown smoother {self.smoother!r}")
        if self.tolerance <= 0.0 or self.truncation_tol <= 0.0:
            raise ValueError("tolerances must be positive")


@dataclass
class SolverReport:
    """Per-iteration and per-step diagnostics of one increment solve.

    For the variational solver the recorded energy sequence (initial value
    followed by the post-presmoothing and post-update values of every
    iteration) is non-increasing exactly as computed.
    """

    energies: list = field(default_factory=list)
    energies_half: list = field(default_factory=list)
    stationarity: list = field(default_factory=list)
    rhos: list = field(default_factory=list)
    truncated_dofs: list = field(default_factory=list)
    iterations: int = 0
    walltime_s: float = 0.0
    termination: str = ""
    converged: bool = False
    initial_energy: float = float("nan")
    feasibility_violations: int = 0
    notes: dict = field(default_factory=dict)

    @property
    def energy_chain(self) -> list:
        """Initial, half- and full-iterate energies interleaved in order."""
        chain = [self.initial_energy]
        for jh, jn in zip(self.energies_half, self.energies):
            chain.append(jh)
            chain.append(jn)
        return chain

    @property
    def final_stationarity(self) -> float:
        return self.stationarity[-1] if self.stationarity else float("nan")


class _Workspace:
    """Kernel-side quadrature state for the nonlinear smoother."""

    def __init__(self, problem: IncrementProblem):
        level = problem.level
        self.level = level
        self.problem = problem
        pptr, pqp, pcorner = level.patch_csr()
        self.pptr = pptr
        self.pqp = pqp
        self.pcorner = pcorner
        q = level.quadrature
        self.theta = np.ascontiguousarray(q.shape_values)
        self.dthx = np.ascontiguousarray(q.shape_gradients[:, :, 0])
        self.dthy = np.ascontiguousarray(q.shape_gradients[:, :, 1])
        self.wq = float(q.weights[0])
        self.ufree = np.ascontiguousarray(~problem.bc.u_mask)
        self.dfree = np.ascontiguousarray(~problem.bc.d_mask)
        self.lower = np.ascontiguousarray(problem.obstacle)
        self.eps = np.empty((level.num_qp, 3))
        self.dq = np.empty(level.num_qp)
        self.gdq = np.empty((level.num_qp, 2))
        self.psip = np.empty(level.num_qp)

    def refresh(self, state: State) -> None:
        """Recompute the quadrature-point state from the nodal values."""
        eps, d, gd = qp_fields(self.level, state)
        self.eps[:] = eps
        self.dq[:] = d
        self.gdq[:] = gd
        model = self.problem.material
        pp, _, _, _, _, _ = mat.split_energy_batch(model, eps, want_hessian=False)
        self.psip[:] = pp

    def run(self, state: State, config: TnnmgConfig, vstart: int, vend: int,
            do_disp: bool, do_damage: bool) -> None:
        model = self.problem.material
        smoother_id = 0 if config.smoother == "ex" else 1
        preC = _local_upper_bound_matrices(self.problem) if smoother_id == 1 \
            else _DUMMY_PRE
        status = smoother_sweep(
            state.array, self.ufree, self.dfree, self.lower,
            self.pptr, self.pqp, self.pcorner,
            self.theta, self.dthx, self.dthy, self.wq,
            self.eps, self.dq, self.gdq, self.psip,
            model.split_id, model.lam, model.mu, model.k,
            model.degradation_id, model.gd_b,
            model.g_c * model.c_gamma, model.g_c * model.gamma_grad_coeff,
            model.beta,
            self.problem.pext,
            smoother_id, preC,
            config.local_newton_tol, config.local_newton_max,
            config.ls_max_halvings,
            model.degradation_is_quadratic,
            vstart, vend, do_disp, do_damage,
        )
        if status == 1:
            raise AssertionError("local damage problem is not strictly convex")
        if status == 2:
            raise AssertionError("singular local displacement system")


_DUMMY_PRE = np.zeros((1, 2, 2))


def _local_upper_bound_matrices(problem: IncrementProblem) -> np.ndarray:
    """Per-vertex (1 + k) * undegraded local stiffness, cached (M, 2, 2)."""
    model = problem.material
    hierarchy = problem.hierarchy
    key = ("pre_local", model.lam, model.mu, model.k)
    if key not in hierarchy.cache:
        level = problem.level
        B = assembly._mandel_b_matrix(level)  # (nqp, 3, 4, 2)
        vI = mat.mandel_identity(2)
        C0 = model.lam * np.outer(vI, vI) + 2.0 * model.mu * np.eye(3)
        w = level.quadrature.weights[0]
        corner = w * np.einsum("qkai,kl,qlaj->aij", B, C0, B)
        out = np.zeros((level.num_vertices, 2, 2))
        np.add.at(out, level.cells, corner[None, :, :, :].repeat(level.num_cells, 0))
        hierarchy.cache[key] = (1.0 + model.k) * out
    return hierarchy.cache[key]


# ---------------------------------------------------------------------------
# the four algorithm steps
# ---------------------------------------------------------------------------

def presmooth(problem: IncrementProblem, state: State, config: TnnmgConfig,
              workspace: _Workspace | None = None,
              j_current: float | None = None):
    """One nonlinear Gauss-Seidel pass; returns (state, energy after).

    The pass never increases the energy in exact arithmetic; a guard
    compares the canonically evaluated energy before/after and keeps the
    previous iterate if rounding produced an increase, so the recorded
    energy chain is non-increasing exactly.
    """
    ws = workspace or _Workspace(problem)
    ws.refresh(state)
    if j_current is None:
        j_current = energy(problem, state)
    before = state.array.copy()
    new_state = State(state.num_vertices, state.array.copy())
    ws.run(new_state, config, 0, problem.num_vertices, True, True)
    j_new = energy(problem, new_state)
    if j_new > j_current:
        return State(state.num_vertices, before), j_current
    return new_state, j_new


def smooth_vertex_displacement(problem: IncrementProblem, state: State,
                               vertex: int, variant: str = "ex") -> State:
    """Minimize over the displacement components of one vertex."""
    ws = _Workspace(problem)
    ws.refresh(state)
    out = state.copy()
    ws.run(out, TnnmgConfig(smoother=variant), vertex, vertex + 1, True, False)
    return out


def smooth_vertex_damage(problem: IncrementProblem, state: State,
                         vertex: int) -> State:
    """Exact clamped minimizer of the local damage quadratic at one vertex."""
    ws = _Workspace(problem)
    ws.refresh(state)
    out = state.copy()
    ws.run(out, TnnmgConfig(), vertex, vertex + 1, False, True)
    return out


def truncation_mask(problem: IncrementProblem, state: State,
                    config: TnnmgConfig) -> TruncationMask:
    """Active set of the linear correction.

    Damage dofs within ``truncation_tol`` of either bound and all Dirichlet
    dofs are removed from the correction subspace.
    """
    M = problem.num_vertices
    active = np.ones((M, 3), dtype=bool)
    active[:, :2] = ~problem.bc.u_mask
    ttol = config.truncation_tol
    d = state.d
    active[:, 2] = ((d - problem.obstacle > ttol) & (1.0 - d > ttol)
                    & ~problem.bc.d_mask)
    return TruncationMask(active.ravel())


def linear_correction(problem: IncrementProblem, state: State,
                      config: TnnmgConfig,
                      gradient: np.ndarray | None = None):
    """Truncated inexact Newton step: one geometric V-cycle.

    Returns (correction, mask, gradient); the correction is supported on
    the active subspace.
    """
    if gradient is None:
        gradient = assembly.assemble_gradient(problem, state)
    mask = truncation_mask(problem, state, config)
    A = assembly.assemble_gen_hessian(problem, state)
    At, rt = apply_truncation(A, -gradient, mask)
    ops, masks = build_mg_hierarchy(problem.hierarchy, At, mask)
    c = v_cycle(ops, problem.hierarchy.prolongations_block, rt,
                config.mg_presmooth, config.mg_postsmooth, masks=masks)
    return c, mask, gradient


def damped_update(problem: IncrementProblem, state: State,
                  correction: np.ndarray, config: TnnmgConfig | None = None,
                  j_current: float | None = None):
    """Project the correction and backtrack until the energy does not grow.

    Starting from rho = 1, the step is halved at most ``ls_max_halvings``
    times; if no admissible step is found the update falls back to rho = 0,
    so monotonicity holds unconditionally.
    Returns (new_state, rho, new_energy).
    """
    cfg = config or TnnmgConfig()
    if j_current is None:
        j_current = energy(problem, state)
    projected = project_feasible(
        problem, State.from_flat(state.flat + correction))
    c_pr = projected.flat - state.flat
    rho = 1.0
    for _ in range(cfg.ls_max_halvings + 1):
        trial = State.from_flat(state.flat + rho * c_pr)
        j_trial = energy(problem, trial)
        if j_trial <= j_current:
            return trial, rho, j_trial
        rho *= 0.5
    return state.copy(), 0.0, j_current


# ---------------------------------------------------------------------------
# outer iteration
# ---------------------------------------------------------------------------

def _warm_start_displacement(problem: IncrementProblem, state: State,
                             config: TnnmgConfig) -> State:
    """One linear multigrid step on the displacement block with d frozen."""
    g = assembly.assemble_gradient(problem, state)
    M = problem.num_vertices
    active = np.zeros((M, 3), dtype=bool)
    active[:, :2] = ~problem.bc.u_mask
    mask = TruncationMask(active.ravel())
    A = assembly.assemble_gen_hessian(problem, state)
    At, rt = apply_truncation(A, -g, mask)
    ops, masks = build_mg_hierarchy(problem.hierarchy, At, mask)
    c = v_cycle(ops, problem.hierarchy.prolongations_block, rt,
                config.mg_presmooth, config.mg_postsmooth, masks=masks)
    return State.from_flat(state.flat + c)


def _check_feasible(problem: IncrementProblem, state: State) -> int:
    """Count exact box/Dirichlet violations (zero for every iterate)."""
    bad = int(np.count_nonzero(state.d < problem.obstacle))
    bad += int(np.count_nonzero(state.d > 1.0))
    vals = problem.bc.u_const + problem.load * problem.bc.u_load_scale
    bad += int(np.count_nonzero(state.u[problem.bc.u_mask] != vals[problem.bc.u_mask]))
    bad += int(np.count_nonzero(
        state.d[problem.bc.d_mask] != problem.bc.d_value[problem.bc.d_mask]))
    return bad


def solve_increment(problem: IncrementProblem, initial: State,
                    config: TnnmgConfig | None = None):
    """Solve one increment problem; returns (state, SolverReport).

    Terminates when the energy norm of the total iteration correction drops
    below ``tolerance`` times the energy norm of the previous iterate, or
    after ``max_iterations`` (recorded as non-converged, not raised).
    """
    config = config or TnnmgConfig()
    model = problem.material
    if not model.degradation_is_convex:
        warnings.warn(
            f"degradation {model.degradation!r} is not convex; the solver's "
            "convergence guarantees assume a convex degradation function",
            RuntimeWarning, stacklevel=2)
    t0 = time.perf_counter()
    state = initial.copy()
    problem.apply_dirichlet(state)
    state = project_feasible(problem, state)
    if config.warm_start_displacement:
        state = _warm_start_displacement(problem, state, config)
    norm_matrix = assembly.energy_norm_matrix(problem)
    ws = _Workspace(problem)
    report = SolverReport()
    j = energy(problem, state)
    report.initial_energy = j
    report.feasibility_violations += _check_feasible(problem, state)
    termination = "max_iterations"
    for _ in range(config.max_iterations):
        j_prev = j
        prev_flat = state.flat.copy()
        prev_norm = norm_matrix.norm_of(prev_flat)

        state, j_half = presmooth(problem, state, config, ws, j_prev)
        correction, mask, grad = linear_correction(problem, state, config)
        # measured at the presmoothed iterate, where the Newton data lives
        stat = stationarity_measure(problem, state, grad)
        state, rho, j = damped_update(problem, state, correction, config, j_half)

        report.energies_half.append(j_half)
        report.energies.append(j)
        report.stationarity.append(stat)
        report.rhos.append(rho)
        report.truncated_dofs.append(mask.truncated_count)
        report.feasibility_violations += _check_feasible(problem, state)
        if not (j <= j_half <= j_prev):
            raise AssertionError("energy monotonicity violated")

        delta_norm = norm_matrix.norm_of(state.flat - prev_flat)
        if delta_norm < config.tolerance * prev_norm or (
                delta_norm == 0.0 and prev_norm == 0.0):
            termination = "converged"
            break
    report.iterations = len(report.energies)
    report.converged = termination == "converged"
    report.termination = termination
    report.walltime_s = time.perf_counter() - t0
    return state, report
