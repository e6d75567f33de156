"""Structured 2D quadrilateral grids with a uniform-refinement hierarchy.

Q1 Lagrange elements on axis-aligned rectangles, 2x2 Gauss quadrature
(exact for |eps(u)|^2 and the quadratic crack-density terms), per-component
Dirichlet data, and nested prolongation operators for geometric multigrid.

Vertices are numbered lexicographically, x fastest; degrees of freedom are
vertex-blocked as (u_x, u_y, d) per vertex.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

GAUSS = 1.0 / np.sqrt(3.0)
#: reference quadrature points on [-1, 1]^2, fixed deterministic order
QP_REF = np.array([[-GAUSS, -GAUSS], [GAUSS, -GAUSS], [GAUSS, GAUSS], [-GAUSS, GAUSS]])
#: reference corner coordinates, counterclockwise
CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])

MAX_DOFS = 10_000_000


@dataclass
class QuadratureData:
    """Per-cell quadrature rule with cached shape data.

    All cells of a level share the rule (axis-aligned uniform grid), so the
    shape values and physical gradients are stored once per level.
    """

    points: np.ndarray        # (nqp, 2) reference coordinates
    weights: np.ndarray       # (nqp,) physical weights, mm^2
    shape_values: np.ndarray  # (nqp, 4)
    shape_gradients: np.ndarray  # (nqp, 4, 2) physical gradients, 1/mm


def shape_values_at(ref_points: np.ndarray) -> np.ndarray:
    """Q1 shape functions at reference points (n, 2) -> (n, 4)."""
    xi, eta = ref_points[:, 0:1], ref_points[:, 1:2]
    return 0.25 * (1.0 + xi * CORNERS[:, 0]) * (1.0 + eta * CORNERS[:, 1])


def shape_gradients_at(ref_points: np.ndarray, hx: float, hy: float) -> np.ndarray:
    """Physical Q1 shape gradients at reference points -> (n, 4, 2)."""
    xi, eta = ref_points[:, 0:1], ref_points[:, 1:2]
    g = np.empty((ref_points.shape[0], 4, 2))
    g[:, :, 0] = 0.25 * CORNERS[:, 0] * (1.0 + eta * CORNERS[:, 1]) * (2.0 / hx)
    g[:, :, 1] = 0.25 * CORNERS[:, 1] * (1.0 + xi * CORNERS[:, 0]) * (2.0 / hy)
    return g


class GridLevel:
    """One structured level: nx x ny axis-aligned cells on [0,Lx] x [0,Ly]."""

    def __init__(self, nx: int, ny: int, lx: float, ly: float):
        self.nx = nx
        self.ny = ny
        self.hx = lx / nx
        self.hy = ly / ny
        self.num_vertices = (nx + 1) * (ny + 1)
        self.num_cells = nx * ny
        xs = np.linspace(0.0, lx, nx + 1)
        ys = np.linspace(0.0, ly, ny + 1)
        X, Y = np.meshgrid(xs, ys)
        self.coords = np.column_stack([X.ravel(), Y.ravel()])
        ci, cj = np.meshgrid(np.arange(nx), np.arange(ny))
        v00 = cj.ravel() * (nx + 1) + ci.ravel()
        self.cells = np.column_stack([v00, v00 + 1, v00 + nx + 2, v00 + nx + 1])
        w = self.hx * self.hy / 4.0
        self.quadrature = QuadratureData(
            points=QP_REF.copy(),
            weights=np.full(4, w),
            shape_values=shape_values_at(QP_REF),
            shape_gradients=shape_gradients_at(QP_REF, self.hx, self.hy),
        )
        self.num_qp = 4 * self.num_cells
        self._block_pattern = None
        self._scatter_index = None
        self._patch_csr = None

    def vertex_index(self, i: int, j: int) -> int:
        return j * (self.nx + 1) + i

    # -- vertex-block sparsity (Q1 stencil) --------------------------------
    def block_pattern(self):
        """CSR block sparsity over vertices: (indptr, indices), sorted rows."""
        if self._block_pattern is None:
            nxp, nyp = self.nx + 1, self.ny + 1
            rows = []
            cols = []
            for dj in (-1, 0, 1):
                for di in (-1, 0, 1):
                    i, j = np.meshgrid(np.arange(nxp), np.arange(nyp))
                    ii, jj = i + di, j + dj
                    ok = (ii >= 0) & (ii < nxp) & (jj >= 0) & (jj < nyp)
                    rows.append((j * nxp + i)[ok])
                    cols.append((jj * nxp + ii)[ok])
            rows = np.concatenate(rows)
            cols = np.concatenate(cols)
            A = sp.csr_matrix(
                (np.ones(rows.size), (rows, cols)),
                shape=(self.num_vertices, self.num_vertices),
            )
            A.sort_indices()
            self._block_pattern = (A.indptr.copy(), A.indices.astype(np.int64))
        return self._block_pattern

    def scatter_index(self) -> np.ndarray:
        """Flat scalar positions of cell contributions in the BSR data array.

        Shape (num_cells, 4, 4, 3, 3): entry position of local block (a, b),
        scalar (i, j), inside data.ravel() of the level's block pattern.
        """
        if self._scatter_index is None:
            indptr, indices = self.block_pattern()
            nv = self.num_vertices
            # map (row, col) -> block slot via a dense-ish lookup per row
            pos = {}
            for r in range(nv):
                for kk in range(indptr[r], indptr[r + 1]):
                    pos[(r, int(indices[kk]))] = kk
            out = np.empty((self.num_cells, 4, 4, 3, 3), dtype=np.int64)
            for e in range(self.num_cells):
                vs = self.cells[e]
                for a in range(4):
                    for b in range(4):
                        kb = pos[(int(vs[a]), int(vs[b]))]
                        base = 9 * kb
                        for i in range(3):
                            for j in range(3):
                                out[e, a, b, i, j] = base + 3 * i + j
            self._scatter_index = out
        return self._scatter_index

    def patch_csr(self):
        """Vertex -> quadrature-point adjacency for the smoother kernel.

        Returns (pptr, pqp, pcorner): for vertex v, the flat quadrature
        point indices (cell * 4 + alpha) it supports and its local corner
        index within the owning cell.
        """
        if self._patch_csr is None:
            nv = self.num_vertices
            counts = np.zeros(nv, dtype=np.int64)
            for a in range(4):
                np.add.at(counts, self.cells[:, a], 4)
            pptr = np.zeros(nv + 1, dtype=np.int64)
            np.cumsum(counts, out=pptr[1:])
            pqp = np.empty(pptr[-1], dtype=np.int64)
            pcorner = np.empty(pptr[-1], dtype=np.int64)
            fill = pptr[:-1].copy()
            for e in range(self.num_cells):
                for a in range(4):
                    v = self.cells[e, a]
                    k = fill[v]
                    for alpha in range(4):
                        pqp[k + alpha] = 4 * e + alpha
                        pcorner[k + alpha] = a
                    fill[v] += 4
            self._patch_csr = (pptr, pqp, pcorner)
        return self._patch_csr


def prolongation_matrix(coarse: GridLevel, fine: GridLevel) -> sp.csr_matrix:
    """Scalar Q1 interpolation from a coarse level to its fine refinement."""
    assert fine.nx == 2 * coarse.nx and fine.ny == 2 * coarse.ny
    nxc, nyc = coarse.nx, coarse.ny
    rows, cols, vals = [], [], []
    for jf in range(fine.ny + 1):
        for if_ in range(fine.nx + 1):
            vf = jf * (fine.nx + 1) + if_
            ic, ri = divmod(if_, 2)
            jc, rj = divmod(jf, 2)
            if ri == 0 and rj == 0:
                rows.append(vf)
                cols.append(coarse.vertex_index(ic, jc))
                vals.append(1.0)
            elif rj == 0:
                for di in (0, 1):
                    rows.append(vf)
                    cols.append(coarse.vertex_index(ic + di, jc))
                    vals.append(0.5)
            elif ri == 0:
                for dj in (0, 1):
                    rows.append(vf)
                    cols.append(coarse.vertex_index(ic, jc + dj))
                    vals.append(0.5)
            else:
                for dj in (0, 1):
                    for di in (0, 1):
                        rows.append(vf)
                        cols.append(coarse.vertex_index(ic + di, jc + dj))
                        vals.append(0.25)
    P = sp.csr_matrix(
        (vals, (rows, cols)), shape=(fine.num_vertices, coarse.num_vertices)
    )
    P.sort_indices()
    return P


class GridHierarchy:
    """Nested uniform refinements of a coarse structured grid.

    ``levels[0]`` is the coarse template; ``levels[-1]`` the finest grid the
    problem lives on.  ``prolongations[i]`` interpolates from level i to
    level i+1 (scalar); ``prolongations_block[i]`` is the same operator on
    vertex-blocked (u_x, u_y, d) vectors.
    """

    def __init__(self, nx: int, ny: int, lx: float, ly: float, refine_steps: int):
        if refine_steps < 0:
            raise ValueError("refine_steps must be non-negative")
        fine_dofs = 3 * (nx * 2**refine_steps + 1) * (ny * 2**refine_steps + 1)
        if fine_dofs > MAX_DOFS:
            raise ValueError(
                f"requested hierarchy has {fine_dofs} dofs (limit {MAX_DOFS})")
        self.lx = lx
        self.ly = ly
        self.levels = [GridLevel(nx * 2**r, ny * 2**r, lx, ly) for r in range(refine_steps + 1)]
        self.prolongations = [
            prolongation_matrix(self.levels[i], self.levels[i + 1])
            for i in range(refine_steps)
        ]
        self.prolongations_block = [
            sp.kron(P, sp.eye(3, format="csr"), format="csr") for P in self.prolongations
        ]
        for P in self.prolongations_block:
            P.sort_indices()
        self.cache: dict = {}

    @property
    def level_count(self) -> int:
        return len(self.levels)

    @property
    def finest(self) -> GridLevel:
        return self.levels[-1]

    def coincident_coarse_vertices(self, level: int) -> np.ndarray:
        """Fine vertex index of each coarse vertex of ``levels[level]``.

        Valid for level < finest; used for injection of truncation masks.
        """
        coarse = self.levels[level]
        fine = self.levels[level + 1]
        jc, ic = np.meshgrid(np.arange(coarse.ny + 1), np.arange(coarse.nx + 1),
                             indexing="ij")
        return (2 * jc * (fine.nx + 1) + 2 * ic).ravel()


@dataclass
class BoundaryConditions:
    """Per-vertex, per-component Dirichlet data on the finest level.

    Prescribed displacement values are ``u_const + load * u_load_scale``
    where ``load`` is the scalar load value of the current step (mm).
    ``reaction_vertices`` lists the vertices whose constrained u_y carries
    the measured reaction force.
    """

    u_mask: np.ndarray        # (M, 2) bool
    d_mask: np.ndarray        # (M,) bool
    u_const: np.ndarray       # (M, 2)
    u_load_scale: np.ndarray  # (M, 2)
    d_value: np.ndarray       # (M,)
    reaction_vertices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def apply(self, state, load: float) -> None:
        """Overwrite constrained components of ``state`` in place."""
        vals = self.u_const + load * self.u_load_scale
        state.u[self.u_mask] = vals[self.u_mask]
        state.d[self.d_mask] = self.d_value[self.d_mask]

    def satisfied(self, state, load: float) -> bool:
        vals = self.u_const + load * self.u_load_scale
        return bool(
            np.array_equal(state.u[self.u_mask], vals[self.u_mask])
            and np.array_equal(state.d[self.d_mask], self.d_value[self.d_mask])
        )

    def scalar_mask(self) -> np.ndarray:
        """Constrained scalar dofs in the blocked (u_x, u_y, d) layout."""
        m = np.zeros((self.u_mask.shape[0], 3), dtype=bool)
        m[:, :2] = self.u_mask
        m[:, 2] = self.d_mask
        return m.ravel()


def build_single_notch_mesh(L: float = 1.0, refine_steps: int = 3,
                            coarse_nx: int = 32, coarse_ny: int = 16):
    """Half of the notched square tension specimen on [0, L] x [0, L/2].

    The pre-crack along {y = 0, x < L/2} is a traction-free boundary
    segment of the half domain, so no geometric cut is meshed.  Boundary
    conditions: the top edge carries the prescribed vertical displacement
    (u_x free), the bottom edge is clamped vertically for x > L/2, and the
    vertex at (L/2, 0) -- the initial crack tip -- is fixed in both
    components.  The damage field is unconstrained.
    """
    hier = GridHierarchy(coarse_nx, coarse_ny, L, L / 2.0, refine_steps)
    lvl = hier.finest
    M = lvl.num_vertices
    u_mask = np.zeros((M, 2), dtype=bool)
    u_const = np.zeros((M, 2))
    u_load_scale = np.zeros((M, 2))

    top = np.arange(lvl.ny * (lvl.nx + 1), (lvl.ny + 1) * (lvl.nx + 1))
    u_mask[top, 1] = True
    u_load_scale[top, 1] = 1.0

    bottom = np.arange(lvl.nx + 1)
    xs = hier.lx * np.arange(lvl.nx + 1) / lvl.nx
    ligament = bottom[xs >= L / 2.0]
    u_mask[ligament, 1] = True

    tip = bottom[np.argmin(np.abs(xs - L / 2.0))]
    u_mask[tip, :] = True

    bc = BoundaryConditions(
        u_mask=u_mask,
        d_mask=np.zeros(M, dtype=bool),
        u_const=u_const,
        u_load_scale=u_load_scale,
        d_value=np.zeros(M),
        reaction_vertices=top,
    )
    return hier, bc


# ---------------------------------------------------------------------------
# evaluation of strain / damage at quadrature points (the state-to-qp map)
# ---------------------------------------------------------------------------

def qp_fields(level: GridLevel, state):
    """Strain, damage and damage gradient at all quadrature points.

    Returns (eps, d, grad_d) with shapes (NQ, 3) raw packed, (NQ,), (NQ, 2)
    where NQ = 4 * num_cells and the flat index is cell * 4 + alpha.
    The map is linear in the state coefficients.
    """
    th = level.quadrature.shape_values
    dn = level.quadrature.shape_gradients
    uc = state.u[level.cells]           # (ncell, 4, 2)
    dc = state.d[level.cells]           # (ncell, 4)
    e11 = np.einsum("qa,ea->eq", dn[:, :, 0], uc[:, :, 0])
    e22 = np.einsum("qa,ea->eq", dn[:, :, 1], uc[:, :, 1])
    e12 = 0.5 * (np.einsum("qa,ea->eq", dn[:, :, 1], uc[:, :, 0])
                 + np.einsum("qa,ea->eq", dn[:, :, 0], uc[:, :, 1]))
    eps = np.stack([e11, e22, e12], axis=-1).reshape(-1, 3)
    d = np.einsum("qa,ea->eq", th, dc).reshape(-1)
    gd = np.einsum("qad,ea->eqd", dn, dc).reshape(-1, 2)
    return eps, d, gd


def strain_at_qp(level: GridLevel, state, cell: int, alpha: int):
    """Strain tensor, damage value and damage gradient at one point.

    Single-point counterpart of :func:`qp_fields`, returning the strain as
    a :class:`~fracmg.materials.SymTensor`.
    """
    from .materials import SymTensor

    th = level.quadrature.shape_values[alpha]
    dn = level.quadrature.shape_gradients[alpha]
    vs = level.cells[cell]
    uloc = state.u[vs]
    dloc = state.d[vs]
    e11 = float(dn[:, 0] @ uloc[:, 0])
    e22 = float(dn[:, 1] @ uloc[:, 1])
    e12 = 0.5 * float(dn[:, 1] @ uloc[:, 0] + dn[:, 0] @ uloc[:, 1])
    d = float(th @ dloc)
    gd = dn.T @ dloc
    return SymTensor(2, np.array([e11, e22, e12])), d, gd
