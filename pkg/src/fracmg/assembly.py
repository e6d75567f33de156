"""Quadrature-sum assembly of the smooth increment functional.

Builds the value, gradient and generalized Hessian of the smooth part

    J0(u, d) = sum_qp w * psi(eps(u), d) + sum_qp w * g_c * gamma(d, grad d)
               + P_ext . u

over a grid level, in the vertex-blocked (u_x, u_y, d) dof layout.  The
nodal obstacle/indicator term is handled in :mod:`fracmg.increment` and is
never quadratured.  Damage values are clamped to [0, 1] before the density
evaluation, which is a no-op on feasible states.
"""

from __future__ import annotations

import math

import numpy as np

from . import materials as mat
from .grid import GridHierarchy, GridLevel, qp_fields
from .linalg import BlockSparseMatrix

_SQRT2 = math.sqrt(2.0)


def _mandel_b_matrix(level: GridLevel) -> np.ndarray:
    """Strain-displacement map in the Mandel basis, (nqp, 3, 4, 2)."""
    dn = level.quadrature.shape_gradients
    B = np.zeros((dn.shape[0], 3, 4, 2))
    B[:, 0, :, 0] = dn[:, :, 0]
    B[:, 1, :, 1] = dn[:, :, 1]
    B[:, 2, :, 0] = dn[:, :, 1] / _SQRT2
    B[:, 2, :, 1] = dn[:, :, 0] / _SQRT2
    return B


def _qp_material(problem, state, want_hessian: bool):
    """Material evaluation at every quadrature point of the finest level."""
    level = problem.level
    model = problem.material
    eps, d, gd = qp_fields(level, state)
    d = np.clip(d, 0.0, 1.0)
    pp, pm, sp, sm, hp, hm = mat.split_energy_batch(model, eps, want_hessian)
    g, g1, g2 = mat.degradation_of(model, d)
    return eps, d, gd, pp, pm, sp, sm, hp, hm, g, g1, g2


def energy_smooth(problem, state) -> float:
    """J0 at ``state``: quadrature sum of psi and g_c gamma plus P_ext."""
    level = problem.level
    model = problem.material
    eps, d, gd = qp_fields(level, state)
    d = np.clip(d, 0.0, 1.0)
    pp, pm, _, _, _, _ = mat.split_energy_batch(model, eps, want_hessian=False)
    g, _, _ = mat.degradation_of(model, d)
    psi = (g + model.k) * pp + pm
    gamma = (model.c_gamma * model.w(d)
             + model.gamma_grad_coeff * np.sum(gd * gd, axis=1))
    w = level.quadrature.weights[0]
    val = w * (psi.sum() + model.g_c * gamma.sum())
    val += float(np.sum(problem.pext * state.u))
    return float(val)


def assemble_gradient(problem, state) -> np.ndarray:
    """Gradient of J0, flat (3M,) in the vertex-blocked layout."""
    level = problem.level
    model = problem.material
    nc = level.num_cells
    _, d, gd, pp, _, sp, sm, _, _, g, g1, _ = _qp_material(problem, state, False)
    w = level.quadrature.weights[0]
    th = level.quadrature.shape_values
    dn = level.quadrature.shape_gradients

    sig = ((g + model.k)[:, None] * sp + sm).reshape(nc, 4, 3)
    s11, s22, s12 = sig[..., 0], sig[..., 1], sig[..., 2]
    fx = w * (np.einsum("eq,qa->ea", s11, dn[:, :, 0])
              + np.einsum("eq,qa->ea", s12, dn[:, :, 1]))
    fy = w * (np.einsum("eq,qa->ea", s22, dn[:, :, 1])
              + np.einsum("eq,qa->ea", s12, dn[:, :, 0]))

    gq = model.g_c
    dcoef = (g1 * pp + gq * model.c_gamma * model.w_prime(d)).reshape(nc, 4)
    gdr = gd.reshape(nc, 4, 2)
    fd = w * (np.einsum("eq,qa->ea", dcoef, th)
              + 2.0 * gq * model.gamma_grad_coeff
              * (np.einsum("eq,qa->ea", gdr[..., 0], dn[:, :, 0])
                 + np.einsum("eq,qa->ea", gdr[..., 1], dn[:, :, 1])))

    out = np.zeros((level.num_vertices, 3))
    np.add.at(out[:, 0], level.cells, fx)
    np.add.at(out[:, 1], level.cells, fy)
    np.add.at(out[:, 2], level.cells, fd)
    out[:, :2] += problem.pext
    return out.ravel()


def _element_uu_tensors(level: GridLevel):
    """Fixed per-qp element tensors w B^T (I x I) B and w B^T B, cached."""
    if not hasattr(level, "_uu_tensors"):
        w = level.quadrature.weights[0]
        B = _mandel_b_matrix(level)
        vI = mat.mandel_identity(2)
        outer_I = np.outer(vI, vI)
        m_outer = w * np.einsum("qkai,kl,qlbj->qaibj", B, outer_I, B)
        m_ident = w * np.einsum("qkai,qkbj->qaibj", B, B)
        level._uu_tensors = (m_outer, m_ident)
    return level._uu_tensors


def assemble_gen_hessian(problem, state) -> BlockSparseMatrix:
    """Generalized second derivative of J0 as a vertex-blocked matrix.

    At points where psi is not twice differentiable the material layer
    supplies a fixed Clarke selection, making this a semismooth Newton
    matrix.
    """
    level = problem.level
    model = problem.material
    nc = level.num_cells
    spectral = model.split == "spectral"
    eps, d, _, pp, _, sp, _, hp, hm, g, g1, g2 = _qp_material(problem, state, spectral)
    w = level.quadrature.weights[0]
    th = level.quadrature.shape_values
    dn = level.quadrature.shape_gradients
    B = _mandel_b_matrix(level)

    gk = (g + model.k).reshape(nc, 4)
    if spectral:
        C = (gk[..., None, None] * hp.reshape(nc, 4, 3, 3) + hm.reshape(nc, 4, 3, 3))
        kuu = w * np.einsum("qkai,eqkl,qlbj->eaibj", B, C, B, optimize=True)
    else:
        # the non-spectral C(eps, d) is alpha (I x I) + beta Id with scalar
        # per-point coefficients, so two fixed element tensors suffice
        lam, mu = model.lam, model.mu
        if model.split == "isotropic":
            alpha = gk * lam
            beta = gk * (2.0 * mu)
        elif model.split == "voldev":
            alpha = gk * (lam + mu) - mu
            beta = np.full_like(gk, 2.0 * mu)
        else:  # volpm
            tr = (eps[:, 0] + eps[:, 1]).reshape(nc, 4)
            chi = (tr >= 0.0).astype(float)
            alpha = (lam + mu) * (gk * chi + (1.0 - chi)) - mu
            beta = np.full_like(gk, 2.0 * mu)
        m_outer, m_ident = _element_uu_tensors(level)
        kuu = (np.einsum("eq,qaibj->eaibj", alpha, m_outer)
               + np.einsum("eq,qaibj->eaibj", beta, m_ident))

    mix = mat.raw_to_mandel(g1[:, None] * sp, 2).reshape(nc, 4, 3)
    kud = w * np.einsum("qkai,eqk,qb->eaib", B, mix, th, optimize=True)

    gq = model.g_c
    ddcoef = (g2 * pp + gq * model.c_gamma * model.w_second(d)).reshape(nc, 4)
    kdd = w * np.einsum("eq,qa,qb->eab", ddcoef, th, th)
    kdd = kdd + 2.0 * w * gq * model.gamma_grad_coeff * np.einsum(
        "qad,qbd->ab", dn, dn)[None, :, :]

    blocks = np.zeros((nc, 4, 4, 3, 3))
    blocks[:, :, :, :2, :2] = kuu.transpose(0, 1, 3, 2, 4)
    blocks[:, :, :, :2, 2] = kud.transpose(0, 1, 3, 2)
    blocks[:, :, :, 2, :2] = kud.transpose(0, 3, 1, 2)
    blocks[:, :, :, 2, 2] = kdd

    return _scatter_blocks(level, blocks)


def _scatter_blocks(level: GridLevel, blocks: np.ndarray) -> BlockSparseMatrix:
    indptr, indices = level.block_pattern()
    nnz = indices.size
    flat_idx = level.scatter_index().ravel()
    data = np.bincount(flat_idx, weights=blocks.ravel(), minlength=9 * nnz)
    return BlockSparseMatrix(indptr, indices, data.reshape(nnz, 3, 3))


def assemble_elasticity(hierarchy: GridHierarchy, model, level_index: int) -> BlockSparseMatrix:
    """Undegraded elasticity block (uu only), cached on the hierarchy.

    This is the fixed SPD model operator used by the termination norm, the
    discrete Korn check, the preconditioned local smoother and the
    operator-splitting displacement preconditioner.
    """
    key = ("elasticity", model.lam, model.mu, level_index)
    if key not in hierarchy.cache:
        level = hierarchy.levels[level_index]
        nc = level.num_cells
        w = level.quadrature.weights[0]
        B = _mandel_b_matrix(level)
        vI = mat.mandel_identity(2)
        C0 = model.lam * np.outer(vI, vI) + 2.0 * model.mu * np.eye(3)
        kuu = w * np.einsum("qkai,kl,qlbj->aibj", B, C0, B)
        blocks = np.zeros((nc, 4, 4, 3, 3))
        blocks[:, :, :, :2, :2] = kuu.transpose(0, 2, 1, 3)[None, :, :, :, :]
        hierarchy.cache[key] = _scatter_blocks(level, blocks)
    return hierarchy.cache[key]


def assemble_scalar_operators(level: GridLevel):
    """Consistent mass and gradient-stiffness element matrices.

    Returns (mass_q, stiff) where ``mass_q`` has shape (nqp, 4, 4) (one
    outer product per quadrature point, weighted) so callers can contract
    per-point coefficient fields, and ``stiff`` the (4, 4) per-cell gradient
    stiffness; both include the quadrature weight.
    """
    w = level.quadrature.weights[0]
    th = level.quadrature.shape_values
    dn = level.quadrature.shape_gradients
    mass_q = w * np.einsum("qa,qb->qab", th, th)
    stiff = w * np.einsum("qad,qbd->ab", dn, dn)
    return mass_q, stiff


def energy_norm_matrix(problem):
    """Fixed SPD matrix inducing the termination norm, cached per problem data.

    u block: undegraded elasticity with Dirichlet rows/columns replaced by
    the identity; d block: g_c (w(1)/c_l) l^2 c_gamma times the damage
    gradient stiffness plus the consistent mass matrix.
    """
    hierarchy = problem.hierarchy
    model = problem.material
    key = ("norm", model.cache_key, id(problem.bc))
    if key not in hierarchy.cache:
        level = problem.level
        elast = assemble_elasticity(hierarchy, model, len(hierarchy.levels) - 1)
        A = elast.copy()
        mass_q, stiff = assemble_scalar_operators(level)
        dd = mass_q.sum(axis=0) + model.g_c * model.gamma_grad_coeff * stiff
        nc = level.num_cells
        blocks = np.zeros((nc, 4, 4, 3, 3))
        blocks[:, :, :, 2, 2] = dd[None, :, :]
        A = A.add(_scatter_blocks(level, blocks))
        mask = problem.bc.scalar_mask()
        A.truncate_inplace(~mask)
        A.set_diagonal_ones(mask)
        hierarchy.cache[key] = A
    return hierarchy.cache[key]
