"""Vertex-blocked sparse linear algebra and the geometric V-cycle.

The carrier type is a CSR-of-dense-3x3-blocks matrix (one block per vertex
pair of the Q1 stencil).  Truncation zeroes the rows and columns of dofs
removed from the correction subspace (constraint-active damage dofs and
Dirichlet dofs); the blocked Gauss-Seidel smoother and the coarsest-level
solve skip the resulting zero diagonal entries, so the V-cycle operates
entirely inside the active subspace.

Instances are independent; within one instance execution is single-threaded
so floating-point results are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from ._kernels import bgs_sweep, ldl_skip_solve

BS = 3  # scalar dofs per vertex block: (u_x, u_y, d)


class BlockSparseMatrix:
    """Sparse matrix with dense 3x3 vertex blocks in block-CSR storage."""

    def __init__(self, indptr, indices, data):
        self.indptr = np.asarray(indptr)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.data = np.asarray(data, dtype=float)
        assert self.data.shape == (self.indices.size, BS, BS)

    @property
    def num_block_rows(self) -> int:
        return self.indptr.size - 1

    @property
    def shape(self):
        n = BS * self.num_block_rows
        return (n, n)

    @classmethod
    def from_scipy(cls, A: sp.spmatrix) -> "BlockSparseMatrix":
        B = A.tobsr(blocksize=(BS, BS))
        B.sort_indices()
        return cls(B.indptr.copy(), B.indices.astype(np.int64), B.data.copy())

    def to_scipy(self) -> sp.bsr_matrix:
        n = BS * self.num_block_rows
        return sp.bsr_matrix(
            (self.data, self.indices, self.indptr), shape=(n, n), blocksize=(BS, BS)
        )

    def copy(self) -> "BlockSparseMatrix":
        return BlockSparseMatrix(self.indptr.copy(), self.indices.copy(), self.data.copy())

    def add(self, other: "BlockSparseMatrix") -> "BlockSparseMatrix":
        if (self.indices.size == other.indices.size
                and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.indices, other.indices)):
            return BlockSparseMatrix(self.indptr, self.indices, self.data + other.data)
        return BlockSparseMatrix.from_scipy(self.to_scipy() + other.to_scipy())

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.to_scipy() @ x

    def diagonal(self) -> np.ndarray:
        """Scalar diagonal, length 3M."""
        n = self.num_block_rows
        out = np.zeros(BS * n)
        for i in range(n):
            for kb in range(self.indptr[i], self.indptr[i + 1]):
                if self.indices[kb] == i:
                    out[BS * i:BS * i + BS] = np.diagonal(self.data[kb])
        return out

    def truncate_inplace(self, active: np.ndarray) -> None:
        """Zero all rows and columns of inactive scalar dofs."""
        act = active.reshape(self.num_block_rows, BS)
        block_rows = np.repeat(
            np.arange(self.num_block_rows), np.diff(self.indptr))
        row_act = act[block_rows]          # (nnzb, 3)
        col_act = act[self.indices]        # (nnzb, 3)
        self.data *= row_act[:, :, None] & col_act[:, None, :]

    def set_diagonal_ones(self, which: np.ndarray) -> None:
        """Place unit entries on the scalar diagonal where ``which`` is set."""
        w = which.reshape(self.num_block_rows, BS)
        for i in range(self.num_block_rows):
            if not w[i].any():
                continue
            for kb in range(self.indptr[i], self.indptr[i + 1]):
                if self.indices[kb] == i:
                    for t in range(BS):
                        if w[i, t]:
                            self.data[kb, t, t] = 1.0

    def norm_of(self, x: np.ndarray) -> float:
        """Induced (semi)norm sqrt(x^T A x), for SPD operators a norm."""
        return float(np.sqrt(max(x @ self.matvec(x), 0.0)))


@dataclass
class TruncationMask:
    """Per scalar dof truncation state: True = kept in the correction space."""

    active: np.ndarray

    def __post_init__(self):
        self.active = np.asarray(self.active, dtype=bool)

    @property
    def truncated_count(self) -> int:
        return int(np.size(self.active) - np.count_nonzero(self.active))

    def inject_coarse(self, coincident: np.ndarray) -> "TruncationMask":
        """Restrict to a coarse level by injection at coincident vertices."""
        fine = self.active.reshape(-1, BS)
        return TruncationMask(fine[coincident].ravel())


def apply_truncation(A: BlockSparseMatrix, r: np.ndarray, mask: TruncationMask):
    """Zero rows/columns of ``A`` and entries of ``r`` for inactive dofs."""
    At = A.copy()
    At.truncate_inplace(mask.active)
    rt = np.where(mask.active, r, 0.0)
    return At, rt


def block_gauss_seidel(A: BlockSparseMatrix, r: np.ndarray, x: np.ndarray,
                       sweeps: int = 1, reverse: bool = False) -> np.ndarray:
    """Forward (or backward) blocked Gauss-Seidel sweeps, in place on ``x``.

    Each vertex block solves its local system restricted to the scalar dofs
    with nonzero diagonal; blocks with a singular active sub-block are
    skipped, which covers truncated and Dirichlet rows.
    """
    for _ in range(sweeps):
        bgs_sweep(A.indptr, A.indices, A.data, r, x, reverse)
    return x


def galerkin_product(A: BlockSparseMatrix, P_block: sp.csr_matrix) -> BlockSparseMatrix:
    """Coarse operator P^T A P on vertex-blocked vectors."""
    Af = A.to_scipy().tocsr()
    coarse = (P_block.T @ (Af @ P_block)).tocsr()
    coarse.sort_indices()
    return BlockSparseMatrix.from_scipy(coarse)


def build_mg_hierarchy(hierarchy, A_fine: BlockSparseMatrix, mask: TruncationMask):
    """Truncated operators on every level for one V-cycle.

    The fine operator is assumed already truncated by ``mask``.  Masks are
    restricted by injection at coincident vertices (the vertex sets nest),
    and each Galerkin product is re-truncated so inactive rows stay exactly
    zero on every level.
    """
    ops = [A_fine]
    masks = [mask]
    for lev in range(hierarchy.level_count - 1, 0, -1):
        P = hierarchy.prolongations_block[lev - 1]
        coarse_mask = masks[-1].inject_coarse(
            hierarchy.coincident_coarse_vertices(lev - 1))
        Ac = galerkin_product(ops[-1], P)
        Ac.truncate_inplace(coarse_mask.active)
        ops.append(Ac)
        masks.append(coarse_mask)
    ops.reverse()
    masks.reverse()
    return ops, masks


def _coarse_solve(A: BlockSparseMatrix, r: np.ndarray) -> np.ndarray:
    """Exact solve on the coarsest level, restricted to active dofs.

    Sparse LU on the active submatrix; if the factorization fails (the
    truncated operator can be semidefinite), fall back to a dense
    pivot-skipping LDL^T which returns zero corrections for skipped dofs.
    """
    diag = A.diagonal()
    act = np.flatnonzero(diag != 0.0)
    x = np.zeros_like(r)
    if act.size == 0:
        return x
    Aa = A.to_scipy().tocsr()[act][:, act].tocsc()
    ra = r[act]
    try:
        lu = splu(Aa)
        xa = lu.solve(ra)
        if not np.all(np.isfinite(xa)):
            raise RuntimeError("non-finite coarse solution")
    except Exception:
        xa = ldl_skip_solve(Aa.toarray(), ra, 1.0e-14)
    x[act] = xa
    return x


def v_cycle(ops, prolongations, r: np.ndarray, presmooth: int = 3,
            postsmooth: int = 3, symmetric: bool = False,
            masks=None) -> np.ndarray:
    """One V(presmooth, postsmooth) cycle for A x = r with x0 = 0.

    ``ops[k]`` is the (truncated) operator of level k, coarse to fine;
    ``prolongations[k]`` interpolates level k -> k + 1.  With ``symmetric``
    the postsmoothing runs in reverse vertex order, making the cycle a
    symmetric operator usable as a CG preconditioner.

    ``masks`` (per level, as produced by :func:`build_mg_hierarchy`) keeps
    the correction supported on the active subspace: interpolation from
    active coarse neighbors would otherwise leak into truncated fine rows,
    which the zero-diagonal-skipping smoother never cleans up.
    """
    r = np.asarray(r, dtype=float)
    level = len(ops) - 1
    if level == 0:
        return _coarse_solve(ops[0], r)
    A = ops[level]
    x = np.zeros_like(r)
    block_gauss_seidel(A, r, x, sweeps=presmooth)
    resid = r - A.matvec(x)
    P = prolongations[level - 1]
    rc = P.T @ resid
    xc = v_cycle(ops[:-1], prolongations[:-1], rc, presmooth, postsmooth,
                 symmetric, masks[:-1] if masks is not None else None)
    x += P @ xc
    if masks is not None:
        x[~masks[-1].active] = 0.0
    block_gauss_seidel(A, r, x, sweeps=postsmooth, reverse=symmetric)
    return x
