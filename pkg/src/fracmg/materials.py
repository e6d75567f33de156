"""Pointwise material laws for small-strain phase-field fracture.

The damaged energy density has the form

    psi(eps, d) = (g(d) + k) * psi0_plus(eps) + psi0_minus(eps)

with a degradation function ``g``, residual stiffness ``k`` and one of four
strain splittings of the undamaged St. Venant-Kirchhoff density

    psi0(eps) = lam/2 * tr(eps)^2 + mu * tr(eps^2):

* ``isotropic``  -- psi0_plus = psi0 (everything drives damage),
* ``voldev``     -- the full volumetric part drives damage, the deviatoric
                    part is inert,
* ``volpm``      -- only the tensile volumetric strain drives damage,
* ``spectral``   -- eigenvalue-based tension/compression separation.

The module provides values, stresses (first strain derivatives) and
generalized (semismooth) second derivatives for every split, the degradation
function family, the crack surface density, and symmetric eigensolves for
m in {2, 3}.  Packed fourth-order tensors use the orthonormal Mandel basis
so that Frobenius norms, eigenvalues and positive definiteness carry over to
the packed matrices unchanged.

All functions are pure; there is no shared mutable state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._kernels import eig3_jacobi, eig3_jacobi_batch

SPLITS = ("isotropic", "voldev", "volpm", "spectral")
DEGRADATIONS = ("ga", "gb", "gc", "gd")
AT_VARIANTS = ("at1", "at2")

SPLIT_IDS = {name: i for i, name in enumerate(SPLITS)}
DEGRADATION_IDS = {name: i for i, name in enumerate(DEGRADATIONS)}

#: degradation functions that are convex on [0, 1] (gb/gc are not; solvers
#: relying on convexity emit a warning when given one of the others)
CONVEX_DEGRADATIONS = frozenset({"ga", "gd"})

#: degradation functions that are quadratic polynomials, for which the local
#: nodal damage problems are exactly quadratic
QUADRATIC_DEGRADATIONS = frozenset({"ga"})

_SQRT2 = math.sqrt(2.0)

# raw packed component order: (11, 22, 12) for m=2, (11, 22, 33, 23, 13, 12)
# for m=3; off-diagonal index pairs in that order
_OFF_PAIRS = {2: ((0, 1),), 3: ((1, 2), (0, 2), (0, 1))}


# ---------------------------------------------------------------------------
# symmetric tensors
# ---------------------------------------------------------------------------

@dataclass
class SymTensor:
    """Symmetric m x m tensor in packed upper-triangle storage.

    ``entries`` holds the m*(m+1)/2 raw components, diagonal first:
    (e11, e22, e12) for m = 2 and (e11, e22, e33, e23, e13, e12) for m = 3.
    """

    dim: int
    entries: np.ndarray

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        self.entries = np.asarray(self.entries, dtype=float)
        k = self.dim * (self.dim + 1) // 2
        if self.entries.shape != (k,):
            raise ValueError(f"expected {k} packed entries, got {self.entries.shape}")

    @classmethod
    def from_matrix(cls, A) -> "SymTensor":
        A = np.asarray(A, dtype=float)
        m = A.shape[0]
        if not np.allclose(A, A.T, atol=1e-14 * (1.0 + np.abs(A).max())):
            raise ValueError("matrix is not symmetric")
        return cls(m, mat_to_raw(0.5 * (A + A.T)))

    @classmethod
    def zero(cls, dim: int) -> "SymTensor":
        return cls(dim, np.zeros(dim * (dim + 1) // 2))

    @classmethod
    def identity(cls, dim: int) -> "SymTensor":
        e = np.zeros(dim * (dim + 1) // 2)
        e[:dim] = 1.0
        return cls(dim, e)

    def to_matrix(self) -> np.ndarray:
        return raw_to_mat(self.entries[None, :], self.dim)[0]

    def mandel(self) -> np.ndarray:
        return raw_to_mandel(self.entries[None, :], self.dim)[0]

    def norm(self) -> float:
        """Frobenius norm."""
        v = self.mandel()
        return float(np.sqrt(v @ v))

    def inner(self, other: "SymTensor") -> float:
        """Frobenius inner product."""
        return float(self.mandel() @ other.mandel())

    def __add__(self, other: "SymTensor") -> "SymTensor":
        return SymTensor(self.dim, self.entries + other.entries)

    def __sub__(self, other: "SymTensor") -> "SymTensor":
        return SymTensor(self.dim, self.entries - other.entries)

    def __mul__(self, s: float) -> "SymTensor":
        return SymTensor(self.dim, self.entries * s)

    __rmul__ = __mul__


def raw_to_mat(raw: np.ndarray, m: int) -> np.ndarray:
    """Packed raw components (N, k) -> full matrices (N, m, m)."""
    raw = np.atleast_2d(raw)
    n = raw.shape[0]
    A = np.zeros((n, m, m))
    for i in range(m):
        A[:, i, i] = raw[:, i]
    for p, (i, j) in enumerate(_OFF_PAIRS[m]):
        A[:, i, j] = raw[:, m + p]
        A[:, j, i] = raw[:, m + p]
    return A


def mat_to_raw(A: np.ndarray) -> np.ndarray:
    """Full symmetric matrix (m, m) or batch (N, m, m) -> packed raw."""
    A = np.asarray(A, dtype=float)
    single = A.ndim == 2
    if single:
        A = A[None, :, :]
    m = A.shape[-1]
    k = m * (m + 1) // 2
    raw = np.zeros(A.shape[:-2] + (k,))
    for i in range(m):
        raw[..., i] = A[..., i, i]
    for p, (i, j) in enumerate(_OFF_PAIRS[m]):
        raw[..., m + p] = A[..., i, j]
    return raw[0] if single else raw


def raw_to_mandel(raw: np.ndarray, m: int) -> np.ndarray:
    v = np.array(raw, dtype=float, copy=True)
    v[..., m:] *= _SQRT2
    return v


def mandel_to_raw(v: np.ndarray, m: int) -> np.ndarray:
    raw = np.array(v, dtype=float, copy=True)
    raw[..., m:] /= _SQRT2
    return raw


def mandel_identity(m: int) -> np.ndarray:
    v = np.zeros(m * (m + 1) // 2)
    v[:m] = 1.0
    return v


# ---------------------------------------------------------------------------
# material parameters
# ---------------------------------------------------------------------------

@dataclass
class MaterialModel:
    """Material parameters and model choices.

    Units are kN and mm: ``lam``/``mu`` in kN/mm^2, ``g_c`` in kN/mm, ``l``
    in mm; ``k`` and ``beta`` are dimensionless.

    The crack density family w(d) = (1 + beta (1 - d)) d covers both
    Ambrosio-Tortorelli variants: ``at1`` fixes (w(d) = d, c_l = 1/2,
    c_gamma = 3 / (4 sqrt(2) l)) and ``at2`` (w(d) = d^2, c_l = 1,
    c_gamma = 1 / (2 l)).  ``beta`` defaults accordingly (0 resp. -1) and
    must stay in [-1, 0] so w is convex.
    """

    lam: float
    mu: float
    k: float
    g_c: float
    l: float
    degradation: str = "ga"
    split: str = "isotropic"
    at_variant: str = "at2"
    beta: float | None = None
    gd_b: float = 4.0
    _allow_nonconvex_spectral: bool = field(default=False, repr=False)

    def __post_init__(self):
        self.degradation = self.degradation.lower()
        self.split = self.split.lower()
        self.at_variant = self.at_variant.lower()
        if self.degradation not in DEGRADATIONS:
            raise ValueError(f"unknown degradation {self.degradation!r}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.at_variant not in AT_VARIANTS:
            raise ValueError(f"unknown AT variant {self.at_variant!r}")
        if self.mu <= 0.0:
            raise ValueError("mu must be positive")
        if self.lam <= -2.0 / 3.0 * self.mu:
            raise ValueError("lam must exceed -2/3 mu")
        if self.split == "spectral" and self.lam < 0.0 and not self._allow_nonconvex_spectral:
            raise ValueError("the spectral split requires lam >= 0 (convexity)")
        if self.k <= 0.0:
            raise ValueError("residual stiffness k must be positive")
        if self.g_c <= 0.0 or self.l <= 0.0:
            raise ValueError("g_c and l must be positive")
        if self.degradation == "gd" and self.gd_b <= 0.0:
            raise ValueError("gd requires b > 0")
        if self.beta is None:
            self.beta = 0.0 if self.at_variant == "at1" else -1.0
        if not -1.0 <= self.beta <= 0.0:
            raise ValueError("beta must lie in [-1, 0]")

    # -- crack density normalization --------------------------------------
    @property
    def c_gamma(self) -> float:
        if self.at_variant == "at1":
            return 3.0 / (4.0 * _SQRT2 * self.l)
        return 1.0 / (2.0 * self.l)

    @property
    def c_l(self) -> float:
        return 0.5 if self.at_variant == "at1" else 1.0

    @property
    def w1(self) -> float:
        """w(1), equal to one for the whole family."""
        return 1.0

    @property
    def gamma_grad_coeff(self) -> float:
        """Coefficient of |grad d|^2 inside gamma: c_gamma * (w(1)/c_l) * l^2."""
        return self.c_gamma * (self.w1 / self.c_l) * self.l * self.l

    def w(self, d):
        return (1.0 + self.beta * (1.0 - d)) * d

    def w_prime(self, d):
        return 1.0 + self.beta - 2.0 * self.beta * np.asarray(d)

    def w_second(self, d):
        return -2.0 * self.beta * np.ones_like(np.asarray(d, dtype=float))

    @property
    def degradation_is_convex(self) -> bool:
        return self.degradation in CONVEX_DEGRADATIONS

    @property
    def degradation_is_quadratic(self) -> bool:
        return self.degradation in QUADRATIC_DEGRADATIONS

    @property
    def split_id(self) -> int:
        return SPLIT_IDS[self.split]

    @property
    def cache_key(self) -> tuple:
        """Value-based key for caching operators derived from this model."""
        return (self.lam, self.mu, self.k, self.g_c, self.l,
                self.degradation, self.split, self.at_variant, self.beta,
                self.gd_b)

    @property
    def degradation_id(self) -> int:
        return DEGRADATION_IDS[self.degradation]


@dataclass
class DensityEval:
    """Value and derivatives of psi(eps, d) at one point.

    ``eps_hessian`` is a generalized-Hessian selection packed as a
    k x k matrix in the Mandel basis (k = m(m+1)/2), so its eigenvalues
    equal those of the underlying fourth-order tensor.
    """

    value: float
    stress: SymTensor
    d_deriv: float
    d_second: float
    eps_hessian: np.ndarray
    mixed: SymTensor


# ---------------------------------------------------------------------------
# degradation functions
# ---------------------------------------------------------------------------

def degradation(which: str, d, b: float = 4.0):
    """Evaluate g(d) with first and second derivatives.

    ``d`` may be a scalar or an array in [0, 1]; values outside the unit
    interval raise a ValueError.  For ``gd`` the shape parameter ``b`` must
    be positive.
    """
    which = which.lower()
    if which not in DEGRADATIONS:
        raise ValueError(f"unknown degradation {which!r}")
    d = np.asarray(d, dtype=float)
    if np.any(d < 0.0) or np.any(d > 1.0):
        raise ValueError("damage value outside [0, 1]")
    if which == "ga":
        om = 1.0 - d
        g, g1, g2 = om * om, -2.0 * om, np.full_like(d, 2.0)
    elif which == "gb":
        g = 1.0 + d * d * (2.0 * d - 3.0)
        g1 = 6.0 * d * (d - 1.0)
        g2 = 12.0 * d - 6.0
    elif which == "gc":
        g = 1.0 + d * d * (-6.0 + d * (8.0 - 3.0 * d))
        g1 = -12.0 * d * (1.0 - d) ** 2
        g2 = -12.0 + 48.0 * d - 36.0 * d * d
    else:
        if b <= 0.0:
            raise ValueError("gd requires b > 0")
        eb = math.exp(b)
        den = (b - 1.0) * eb + 1.0
        ebd = np.exp(b * d)
        g = (ebd - (b * (d - 1.0) + 1.0) * eb) / den
        g1 = b * (ebd - eb) / den
        g2 = b * b * ebd / den
    if d.ndim == 0:
        return float(g), float(g1), float(g2)
    return g, g1, g2


def degradation_of(model: MaterialModel, d):
    return degradation(model.degradation, d, model.gd_b)


# ---------------------------------------------------------------------------
# crack surface density
# ---------------------------------------------------------------------------

def crack_density(model: MaterialModel, d, grad_d):
    """Crack surface density gamma(d, grad d) and its derivatives.

    Returns (gamma, dgamma/dd, d2gamma/dd2, dgamma/dgrad_d) with

        gamma = c_gamma * (w(d) + (w(1)/c_l) * l^2 * |grad d|^2).
    """
    d = np.asarray(d, dtype=float)
    if np.any(d < 0.0) or np.any(d > 1.0):
        raise ValueError("damage value outside [0, 1]")
    grad_d = np.asarray(grad_d, dtype=float)
    gnorm2 = np.sum(grad_d * grad_d, axis=-1)
    cg = model.c_gamma
    gamma = cg * model.w(d) + model.gamma_grad_coeff * gnorm2
    d1 = cg * model.w_prime(d)
    d2 = cg * model.w_second(d)
    dgrad = 2.0 * model.gamma_grad_coeff * grad_d
    if d.ndim == 0:
        return float(gamma), float(d1), float(d2), dgrad
    return gamma, d1, d2, dgrad


# ---------------------------------------------------------------------------
# eigensolves
# ---------------------------------------------------------------------------

def eig2_batch(raw: np.ndarray):
    """Closed-form eigendecomposition of packed 2x2 tensors (N, 3).

    Returns eigenvalues (N, 2) ascending and eigenvector matrices (N, 2, 2)
    whose columns match the eigenvalue order.
    """
    e11, e22, e12 = raw[:, 0], raw[:, 1], raw[:, 2]
    mid = 0.5 * (e11 + e22)
    disc = np.hypot(0.5 * (e11 - e22), e12)
    w = np.stack([mid - disc, mid + disc], axis=-1)
    phi = 0.5 * np.arctan2(2.0 * e12, e11 - e22)
    degen = (e12 == 0.0) & (e11 == e22)
    phi = np.where(degen, 0.0, phi)
    c = np.cos(phi)
    s = np.sin(phi)
    Q = np.empty((raw.shape[0], 2, 2))
    # column 0: eigenvector of the smaller eigenvalue, column 1: the larger
    Q[:, 0, 0] = -s
    Q[:, 1, 0] = c
    Q[:, 0, 1] = c
    Q[:, 1, 1] = s
    return w, Q


def eig3_batch(raw: np.ndarray):
    """Cyclic-Jacobi eigendecomposition of packed 3x3 tensors (N, 6)."""
    A = raw_to_mat(raw, 3)
    n = A.shape[0]
    w = np.empty((n, 3))
    V = np.empty((n, 3, 3))
    eig3_jacobi_batch(np.ascontiguousarray(A), w, V)
    return w, V


def eig_sym(A: SymTensor):
    """Eigenvalues (ascending) and orthonormal eigenvectors of a SymTensor.

    m = 2 uses the closed form; m = 3 a deterministic cyclic Jacobi
    iteration (fixed sweep order, off-diagonal tolerance 1e-14 |A|_F,
    at most 30 sweeps).
    """
    if A.dim == 2:
        w, Q = eig2_batch(A.entries[None, :])
        return w[0], Q[0]
    w = np.empty(3)
    V = np.empty((3, 3))
    eig3_jacobi(np.ascontiguousarray(A.to_matrix()), w, V)
    return w, V


# ---------------------------------------------------------------------------
# batch split evaluation
# ---------------------------------------------------------------------------

def _dim_from_packed(k: int) -> int:
    if k == 3:
        return 2
    if k == 6:
        return 3
    raise ValueError(f"packed length {k} is neither 2D nor 3D")


def undamaged_density_batch(model: MaterialModel, raw: np.ndarray) -> np.ndarray:
    """psi0 evaluated directly (no splitting), for identity checks."""
    raw = np.atleast_2d(raw)
    m = _dim_from_packed(raw.shape[1])
    tr = raw[:, :m].sum(axis=1)
    frob2 = (raw[:, :m] ** 2).sum(axis=1) + 2.0 * (raw[:, m:] ** 2).sum(axis=1)
    return 0.5 * model.lam * tr * tr + model.mu * frob2


def split_energy_batch(model: MaterialModel, raw: np.ndarray, want_hessian: bool = True):
    """Evaluate the configured strain split on packed tensors (N, k).

    Returns (psi_p, psi_m, sig_p, sig_m, hess_p, hess_m); stresses are packed
    raw, Hessians k x k matrices in the Mandel basis (None when
    ``want_hessian`` is false).
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    n, k = raw.shape
    m = _dim_from_packed(k)
    lam, mu = model.lam, model.mu
    split = model.split
    if split == "spectral" and lam < 0.0 and not model._allow_nonconvex_spectral:
        raise ValueError("the spectral split requires lam >= 0 (convexity)")

    tr = raw[:, :m].sum(axis=1)
    eye_raw = np.zeros(k)
    eye_raw[:m] = 1.0
    vI = mandel_identity(m)

    hess_p = hess_m = None

    if split == "isotropic":
        psi_p = undamaged_density_batch(model, raw)
        psi_m = np.zeros(n)
        sig_p = lam * tr[:, None] * eye_raw[None, :] + 2.0 * mu * raw
        sig_m = np.zeros_like(raw)
        if want_hessian:
            C0 = lam * np.outer(vI, vI) + 2.0 * mu * np.eye(k)
            hess_p = np.broadcast_to(C0, (n, k, k)).copy()
            hess_m = np.zeros((n, k, k))
        return psi_p, psi_m, sig_p, sig_m, hess_p, hess_m

    if split in ("voldev", "volpm"):
        a = mu / m + 0.5 * lam
        c = 2.0 * mu / m + lam
        dev = raw - (tr / m)[:, None] * eye_raw[None, :]
        dev_mandel = raw_to_mandel(dev, m)
        dev2 = np.sum(dev_mandel * dev_mandel, axis=1)
        if split == "voldev":
            psi_p = a * tr * tr
            psi_m = mu * dev2
            sig_p = c * tr[:, None] * eye_raw[None, :]
            sig_m = 2.0 * mu * dev
            if want_hessian:
                hp = c * np.outer(vI, vI)
                hm = 2.0 * mu * (np.eye(k) - np.outer(vI, vI) / m)
                hess_p = np.broadcast_to(hp, (n, k, k)).copy()
                hess_m = np.broadcast_to(hm, (n, k, k)).copy()
        else:
            trp = np.maximum(tr, 0.0)
            trm = tr - trp
            psi_p = a * trp * trp
            psi_m = a * trm * trm + mu * dev2
            sig_p = c * trp[:, None] * eye_raw[None, :]
            sig_m = c * trm[:, None] * eye_raw[None, :] + 2.0 * mu * dev
            if want_hessian:
                chi = (tr >= 0.0).astype(float)
                outer_I = np.outer(vI, vI)
                hess_p = c * chi[:, None, None] * outer_I[None, :, :]
                hess_m = (c * (1.0 - chi)[:, None, None] * outer_I[None, :, :]
                          + (2.0 * mu * (np.eye(k) - outer_I / m))[None, :, :]
                          * np.ones((n, 1, 1)))
        return psi_p, psi_m, sig_p, sig_m, hess_p, hess_m

    # spectral split
    w, Q = eig2_batch(raw) if m == 2 else eig3_batch(raw)
    trp = np.maximum(tr, 0.0)
    trm = tr - trp
    wp = np.maximum(w, 0.0)
    wm = w - wp
    psi_p = 0.5 * lam * trp * trp + mu * np.sum(wp * wp, axis=1)
    psi_m = 0.5 * lam * trm * trm + mu * np.sum(wm * wm, axis=1)
    ap = lam * trp[:, None] + 2.0 * mu * wp
    am = lam * trm[:, None] + 2.0 * mu * wm
    sig_p = mat_to_raw(np.einsum("nij,nj,nkj->nik", Q, ap, Q))
    sig_m = mat_to_raw(np.einsum("nij,nj,nkj->nik", Q, am, Q))
    if want_hessian:
        hess_p, hess_m = _spectral_hessians(lam, mu, m, tr, w, Q)
    return psi_p, psi_m, sig_p, sig_m, hess_p, hess_m


def _congruence_mandel(Q: np.ndarray, m: int) -> np.ndarray:
    """Mandel-basis matrix of V -> Q^T V Q for a batch of orthogonal Q."""
    k = m * (m + 1) // 2
    basis = np.zeros((k, m, m))
    for i in range(m):
        basis[i, i, i] = 1.0
    for p, (i, j) in enumerate(_OFF_PAIRS[m]):
        basis[m + p, i, j] = 1.0 / _SQRT2
        basis[m + p, j, i] = 1.0 / _SQRT2
    T = np.einsum("nji,pjk,nkl->npil", Q, basis, Q)
    R = raw_to_mandel(mat_to_raw(T.reshape(-1, m, m)), m).reshape(Q.shape[0], k, k)
    return R


def _spectral_hessians(lam, mu, m, tr, w, Q):
    """Generalized spectral Hessians via the divided-difference formula.

    Off-diagonal entries are divided differences of the ramp derivative;
    coalescing eigenvalues (gap below 1e-12 relative) fall back to the
    curvature branch of the first eigenvalue.  The tensile selection takes
    the closed branch at zero, the compressive one its complement, so the
    two selections sum to the classical Hessian of psi0 everywhere.
    """
    n, k = w.shape[0], m * (m + 1) // 2
    vI = mandel_identity(m)
    R = _congruence_mandel(Q, m)
    scale = 1.0 + np.abs(w).max(axis=1)
    gamma_p = np.empty((n, k))
    gamma_p[:, :m] = (w >= 0.0).astype(float)
    for p, (i, j) in enumerate(_OFF_PAIRS[m]):
        gap = w[:, j] - w[:, i]
        tied = np.abs(gap) <= 1.0e-12 * scale
        safe = np.where(tied, 1.0, gap)
        dd = (np.maximum(w[:, j], 0.0) - np.maximum(w[:, i], 0.0)) / safe
        gamma_p[:, m + p] = np.where(tied, gamma_p[:, i], dd)
    chi_p = (tr >= 0.0).astype(float)
    outer_I = np.outer(vI, vI)
    # R rows hold mandel(Q^T M_p Q), i.e. the transpose of the coordinate
    # map into the eigenbasis, hence the sandwich R^T diag -> R diag R^T here
    hess_p = (lam * chi_p[:, None, None] * outer_I[None, :, :]
              + 2.0 * mu * np.einsum("nqp,np,nrp->nqr", R, gamma_p, R))
    hess_m = (lam * (1.0 - chi_p)[:, None, None] * outer_I[None, :, :]
              + 2.0 * mu * np.einsum("nqp,np,nrp->nqr", R, 1.0 - gamma_p, R))
    return hess_p, hess_m


# ---------------------------------------------------------------------------
# object-level API
# ---------------------------------------------------------------------------

def split_energy(model: MaterialModel, eps: SymTensor):
    """Split energies, stresses and generalized Hessians at one tensor.

    Returns (psi_plus, psi_minus, stress_plus, stress_minus, hess_plus,
    hess_minus); the Hessians are packed Mandel-basis matrices.
    """
    pp, pm, sp, sm, hp, hm = split_energy_batch(model, eps.entries[None, :])
    return (
        float(pp[0]),
        float(pm[0]),
        SymTensor(eps.dim, sp[0]),
        SymTensor(eps.dim, sm[0]),
        hp[0],
        hm[0],
    )


def psi_eval(model: MaterialModel, eps: SymTensor, d: float) -> DensityEval:
    """Damaged density psi(eps, d) with all first and second derivatives."""
    if not 0.0 <= d <= 1.0:
        raise ValueError("damage value outside [0, 1]")
    pp, pm, sp, sm, hp, hm = split_energy(model, eps)
    g, g1, g2 = degradation_of(model, d)
    gk = g + model.k
    return DensityEval(
        value=gk * pp + pm,
        stress=SymTensor(eps.dim, gk * sp.entries + sm.entries),
        d_deriv=g1 * pp,
        d_second=g2 * pp,
        eps_hessian=gk * hp + hm,
        mixed=SymTensor(eps.dim, g1 * sp.entries),
    )
