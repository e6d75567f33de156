"""Operator-splitting reference solver with a local history field.

Instead of the irreversibility constraint, this formulation carries the
history field H of the largest tensile reference energy seen so far and
alternates two global solves:

* displacement: Div[(g(d) + k) sigma0_plus + sigma0_minus] = 0 at fixed
  damage (semismooth Newton; a single step for the quadratic splits), with
  inner linear solves by conjugate gradients preconditioned by one
  symmetric elasticity V-cycle,
* damage: g_c dgamma/dd(d) + g'(d) H = 0, a single symmetric linear solve
  for the quadratic degradation/crack-density family and a Newton iteration
  otherwise.  No box constraints are imposed; values outside [0, 1] are
  recorded in the diagnostics rather than repaired.

The semi-implicit variant evaluates H at the previous time step, so one
pass (damage solve, then displacement solve) finishes the step; the fully
implicit variant iterates displacement solve, history update and damage
solve until the same normalized energy-norm criterion as the variational
solver is met.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg, spsolve

from . import assembly
from . import materials as mat
from .grid import qp_fields
from .increment import IncrementProblem, State
from .linalg import TruncationMask, apply_truncation, v_cycle
from .tnnmg import SolverReport

MODES = ("semi_implicit", "fully_implicit")


@dataclass
class HistoryField:
    """Largest tensile reference energy per quadrature point, kN/mm^2."""

    values: np.ndarray

    @classmethod
    def zeros(cls, level) -> "HistoryField":
        return cls(np.zeros(level.num_qp))

    def copy(self) -> "HistoryField":
        return HistoryField(self.values.copy())

    def save(self, path) -> None:
        np.save(path, self.values)

    @classmethod
    def load(cls, path) -> "HistoryField":
        return cls(np.load(path))


def tensile_energy_at_qp(problem: IncrementProblem, state: State) -> np.ndarray:
    """psi0_plus at every quadrature point of the finest level."""
    eps, _, _ = qp_fields(problem.level, state)
    pp, _, _, _, _, _ = mat.split_energy_batch(problem.material, eps,
                                               want_hessian=False)
    return pp


def update_history(history: HistoryField, problem: IncrementProblem,
                   state: State) -> HistoryField:
    """Pointwise ratchet H' = max(H, psi0_plus(eps)); never decreases."""
    return HistoryField(np.maximum(history.values, tensile_energy_at_qp(problem, state)))


# ---------------------------------------------------------------------------
# displacement solve
# ---------------------------------------------------------------------------

def _free_u_mask(problem: IncrementProblem) -> TruncationMask:
    M = problem.num_vertices
    active = np.zeros((M, 3), dtype=bool)
    active[:, :2] = ~problem.bc.u_mask
    return TruncationMask(active.ravel())


def _elasticity_preconditioner(problem: IncrementProblem):
    """Symmetric V-cycle of the Dirichlet-truncated undegraded elasticity."""
    hierarchy = problem.hierarchy
    key = ("opsplit_prec", problem.material.lam, problem.material.mu, id(problem.bc))
    if key not in hierarchy.cache:
        mask = _free_u_mask(problem)
        masks = [mask]
        for lev in range(hierarchy.level_count - 1, 0, -1):
            masks.append(masks[-1].inject_coarse(
                hierarchy.coincident_coarse_vertices(lev - 1)))
        masks.reverse()
        ops = []
        for lev in range(hierarchy.level_count):
            A = assembly.assemble_elasticity(hierarchy, problem.material, lev).copy()
            A.truncate_inplace(masks[lev].active)
            ops.append(A)
        hierarchy.cache[key] = (ops, masks)
    ops, masks = hierarchy.cache[key]

    def apply(r):
        return v_cycle(ops, problem.hierarchy.prolongations_block, r,
                       symmetric=True, masks=masks)

    n = 3 * problem.num_vertices
    return LinearOperator((n, n), matvec=apply, dtype=np.float64)


def _fixed_d_energy(problem: IncrementProblem, state: State) -> float:
    return assembly.energy_smooth(problem, state)


def solve_displacement(problem: IncrementProblem, d_fixed: np.ndarray,
                       state: State, newton_tol: float = 1.0e-10,
                       max_newton: int = 50, cg_rtol: float = 1.0e-10):
    """Equilibrium displacements at fixed damage.

    Returns (state, info) where ``info`` has the Newton iteration count and
    a converged flag.  Quadratic splits finish in a single Newton step;
    the anisotropic ones run a damped semismooth Newton iteration.  Damage
    values are stored as given; densities see them clamped to [0, 1].
    """
    out = state.copy()
    out.d[:] = d_fixed
    problem.apply_dirichlet(out)
    mask = _free_u_mask(problem)
    precond = _elasticity_preconditioner(problem)
    g0 = None
    converged = False
    newton_steps = 0
    for it in range(max_newton):
        grad = assembly.assemble_gradient(problem, out)
        r = np.where(mask.active, -grad, 0.0)
        rn = float(np.linalg.norm(r))
        if g0 is None:
            g0 = rn
        if rn <= newton_tol * (1.0 + g0):
            converged = True
            break
        A = assembly.assemble_gen_hessian(problem, out)
        At, rt = apply_truncation(A, r, mask)
        delta, info = cg(At.to_scipy(), rt, rtol=cg_rtol, atol=0.0, M=precond)
        if info != 0:
            warnings.warn(f"displacement CG stopped with info={info}",
                          RuntimeWarning, stacklevel=2)
        newton_steps += 1
        e0 = _fixed_d_energy(problem, out)
        alpha = 1.0
        for _ in range(31):
            trial = State.from_flat(out.flat + alpha * delta)
            if _fixed_d_energy(problem, trial) <= e0:
                out = trial
                break
            alpha *= 0.5
        else:
            break
    return out, {"newton_steps": newton_steps, "converged": converged}


# ---------------------------------------------------------------------------
# damage solve
# ---------------------------------------------------------------------------

def _scalar_system(problem: IncrementProblem, mass_coeff_qp: np.ndarray,
                   grad_coeff: float):
    """Assemble sum_q w c(q) theta theta^T + grad_coeff int grad grad^T."""
    level = problem.level
    mass_q, stiff = assembly.assemble_scalar_operators(level)
    nc = level.num_cells
    local = (np.einsum("eq,qab->eab", mass_coeff_qp.reshape(nc, 4), mass_q)
             + grad_coeff * stiff[None, :, :])
    rows = np.repeat(level.cells, 4, axis=1).ravel()
    cols = np.tile(level.cells, (1, 4)).ravel()
    A = sp.csr_matrix((local.ravel(), (rows, cols)),
                      shape=(level.num_vertices, level.num_vertices))
    A.sum_duplicates()
    return A


def _scalar_load(problem: IncrementProblem, coeff_qp: np.ndarray) -> np.ndarray:
    level = problem.level
    w = level.quadrature.weights[0]
    th = level.quadrature.shape_values
    out = np.zeros(level.num_vertices)
    vals = w * np.einsum("eq,qa->ea", coeff_qp.reshape(level.num_cells, 4), th)
    np.add.at(out, level.cells, vals)
    return out


def damage_residual(problem: IncrementProblem, state: State,
                    history: HistoryField) -> np.ndarray:
    """Nodal residual of g_c dgamma/dd + g'(d) H = 0 (weak form)."""
    model = problem.material
    level = problem.level
    _, d, gd = qp_fields(level, state)
    _, g1, _ = mat.degradation_of(model, np.clip(d, 0.0, 1.0))
    coeff = model.g_c * model.c_gamma * model.w_prime(d) + g1 * history.values
    res = _scalar_load(problem, coeff)
    w = level.quadrature.weights[0]
    dn = level.quadrature.shape_gradients
    gdr = gd.reshape(level.num_cells, 4, 2)
    c2 = 2.0 * model.g_c * model.gamma_grad_coeff * w
    vals = c2 * (np.einsum("eq,qa->ea", gdr[..., 0], dn[:, :, 0])
                 + np.einsum("eq,qa->ea", gdr[..., 1], dn[:, :, 1]))
    np.add.at(res, level.cells, vals)
    res[problem.bc.d_mask] = 0.0
    return res


def solve_damage(problem: IncrementProblem, history: HistoryField,
                 d_n: np.ndarray | None = None, newton_tol: float = 1.0e-11,
                 max_newton: int = 30):
    """Unconstrained damage field for the given history values.

    For the quadratic degradation ``ga`` together with the quadratic crack
    density family this is one symmetric linear solve; other degradations
    run a Newton iteration started from ``d_n``.  No bounds are imposed;
    the caller inspects the returned diagnostics for out-of-range values.
    Returns (d, info).
    """
    model = problem.material
    level = problem.level
    gq = model.g_c
    grad_coeff = 2.0 * gq * model.gamma_grad_coeff

    info: dict = {"singular": False, "newton_steps": 0, "converged": True}

    if model.degradation == "ga":
        # g'(d) = -2 + 2 d makes the Euler equation linear in d
        mass_coeff = -2.0 * model.beta * gq * model.c_gamma + 2.0 * history.values
        A = _scalar_system(problem, mass_coeff, grad_coeff)
        rhs = _scalar_load(problem,
                           2.0 * history.values
                           - (1.0 + model.beta) * gq * model.c_gamma
                           * np.ones(level.num_qp))
        d = _solve_scalar(A, rhs, info)
    else:
        d = np.zeros(level.num_vertices) if d_n is None else np.array(d_n, dtype=float)
        state = State(level.num_vertices)
        info["converged"] = False
        for it in range(max_newton):
            state.d[:] = np.clip(d, 0.0, 1.0)
            res = damage_residual(problem, state, history)
            if np.linalg.norm(res) <= newton_tol * (1.0 + gq * model.c_gamma):
                info["converged"] = True
                break
            _, dq, _ = qp_fields(level, state)
            dq = np.clip(dq, 0.0, 1.0)
            _, _, g2 = mat.degradation_of(model, dq)
            mass_coeff = (gq * model.c_gamma * model.w_second(dq)
                          + g2 * history.values)
            if np.any(mass_coeff < 0.0):
                info["indefinite"] = True
            A = _scalar_system(problem, mass_coeff, grad_coeff)
            try:
                step = _solve_scalar(A, -res, info)
            except RuntimeError:
                info["converged"] = False
                break
            d = d + step
            info["newton_steps"] = it + 1
    info["d_min"] = float(d.min())
    info["d_max"] = float(d.max())
    info["out_of_range"] = bool(d.min() < 0.0 or d.max() > 1.0)
    return d, info


def _solve_scalar(A: sp.csr_matrix, rhs: np.ndarray, info: dict) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("error", sp.linalg.MatrixRankWarning)
        try:
            d = spsolve(A.tocsc(), rhs)
            if not np.all(np.isfinite(d)):
                raise sp.linalg.MatrixRankWarning("non-finite solution")
        except (sp.linalg.MatrixRankWarning, RuntimeError):
            info["singular"] = True
            if A.shape[0] <= 6000:
                d = np.linalg.lstsq(A.toarray(), rhs, rcond=None)[0]
            else:
                raise RuntimeError("singular damage system on a large grid")
    return d


# ---------------------------------------------------------------------------
# per-step driver
# ---------------------------------------------------------------------------

def solve_increment_opsplit(problem: IncrementProblem, initial: State,
                            history: HistoryField, mode: str = "fully_implicit",
                            tol: float = 1.0e-7, max_outer: int = 200):
    """One load step of the H-field splitting; returns (state, history', report).

    ``semi_implicit`` keeps H at its previous-step value: the damage
    equation decouples and one damage + one displacement solve finish the
    step.  ``fully_implicit`` alternates displacement solve, history
    ratchet and damage solve until the normalized energy-norm increment
    drops below ``tol``; this is the reference formulation the variational
    solver is compared against.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    t0 = time.perf_counter()
    report = SolverReport()
    state = initial.copy()
    problem.apply_dirichlet(state)
    hist = history.copy()
    norm_matrix = assembly.energy_norm_matrix(problem)
    diagnostics: dict = {}

    if mode == "semi_implicit":
        d_new, dinfo = solve_damage(problem, hist, state.d)
        state.d[:] = d_new
        state, uinfo = solve_displacement(problem, d_new, state)
        hist = update_history(hist, problem, state)
        report.iterations = 1
        report.converged = uinfo["converged"]
        report.termination = "single_pass"
        diagnostics.update(damage=dinfo, displacement=uinfo)
    else:
        converged = False
        for outer in range(1, max_outer + 1):
            prev = state.flat.copy()
            state, uinfo = solve_displacement(problem, state.d, state)
            hist = update_history(hist, problem, state)
            d_new, dinfo = solve_damage(problem, hist, state.d)
            state.d[:] = d_new
            report.energies.append(assembly.energy_smooth(problem, state))
            delta = norm_matrix.norm_of(state.flat - prev)
            base = norm_matrix.norm_of(prev)
            report.iterations = outer
            diagnostics.update(damage=dinfo, displacement=uinfo)
            if delta < tol * base or (delta == 0.0 and base == 0.0):
                converged = True
                break
        report.converged = converged
        report.termination = "converged" if converged else "max_iterations"

    diagnostics["d_out_of_range"] = bool(
        state.d.min() < 0.0 or state.d.max() > 1.0)
    report.notes = diagnostics
    report.walltime_s = time.perf_counter() - t0
    return state, hist, report
