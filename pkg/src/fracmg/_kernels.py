"""Numba kernels for the sequential hot loops.

Everything here is a scalar/per-vertex re-implementation of the vectorized
material and linear-algebra layers, compiled with numba:

* closed-form 2x2 and cyclic-Jacobi 3x3 symmetric eigensolves,
* pointwise 2D energy density (all four strain splits) with stresses and
  generalized Hessians in the Mandel basis,
* the nonlinear vertex-by-vertex smoother sweep (exact and preconditioned
  local displacement solves, exact clamped damage solves),
* the blocked Gauss-Seidel sweep on BSR arrays with zero-diagonal skipping,
* a pivot-skipping dense LDL^T solve used as a singular-safe fallback.

The numpy implementations in ``materials``/``assembly`` remain the readable
reference; the test suite pins both paths against each other.
"""

import math

import numpy as np
from numba import njit

# split / degradation ids shared with the materials module
ISO, VOLDEV, VOLPM, SPECTRAL = 0, 1, 2, 3
GA, GB, GC, GD = 0, 1, 2, 3

# relative gap below which eigenvalues are treated as coalesced in the
# divided-difference (Loewner) formula
EIG_TIE_RTOL = 1.0e-12


# ---------------------------------------------------------------------------
# symmetric eigensolves
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def eig2_values(a11, a22, a12):
    """Ascending eigenvalues of a symmetric 2x2 matrix."""
    mid = 0.5 * (a11 + a22)
    disc = math.hypot(0.5 * (a11 - a22), a12)
    return mid - disc, mid + disc


@njit(cache=True, inline="always")
def eig2_full(a11, a22, a12):
    """Eigenvalues (ascending) and rotation (c, s) with v_max = (c, s).

    The eigenvector for the smaller eigenvalue is (-s, c); the pair is
    orthonormal by construction.
    """
    l1, l2 = eig2_values(a11, a22, a12)
    if a12 == 0.0 and a11 == a22:
        return l1, l2, 1.0, 0.0
    phi = 0.5 * math.atan2(2.0 * a12, a11 - a22)
    return l1, l2, math.cos(phi), math.sin(phi)


@njit(cache=True)
def eig3_jacobi(A, w, V):
    """Cyclic Jacobi iteration for a symmetric 3x3 matrix.

    Fixed sweep order (0,1), (0,2), (1,2); stops when the off-diagonal
    Frobenius norm drops below 1e-14 * |A|_F or after 30 sweeps.  Fills
    ``w`` (ascending) and ``V`` (columns are eigenvectors).
    """
    B = A.copy()
    for i in range(3):
        for j in range(3):
            V[i, j] = 1.0 if i == j else 0.0
    norm_a = 0.0
    for i in range(3):
        for j in range(3):
            norm_a += B[i, j] * B[i, j]
    norm_a = math.sqrt(norm_a)
    tol = 1.0e-14 * norm_a
    for _ in range(30):
        off = math.sqrt(2.0 * (B[0, 1] ** 2 + B[0, 2] ** 2 + B[1, 2] ** 2))
        if off <= tol:
            break
        for idx in range(3):
            if idx == 0:
                p, q = 0, 1
            elif idx == 1:
                p, q = 0, 2
            else:
                p, q = 1, 2
            apq = B[p, q]
            if apq == 0.0:
                continue
            tau = (B[q, q] - B[p, p]) / (2.0 * apq)
            if tau >= 0.0:
                t = 1.0 / (tau + math.sqrt(1.0 + tau * tau))
            else:
                t = -1.0 / (-tau + math.sqrt(1.0 + tau * tau))
            c = 1.0 / math.sqrt(1.0 + t * t)
            s = t * c
            app = B[p, p]
            aqq = B[q, q]
            B[p, p] = app - t * apq
            B[q, q] = aqq + t * apq
            B[p, q] = 0.0
            B[q, p] = 0.0
            for r in range(3):
                if r != p and r != q:
                    arp = B[r, p]
                    arq = B[r, q]
                    B[r, p] = c * arp - s * arq
                    B[p, r] = B[r, p]
                    B[r, q] = c * arq + s * arp
                    B[q, r] = B[r, q]
            for r in range(3):
                vrp = V[r, p]
                vrq = V[r, q]
                V[r, p] = c * vrp - s * vrq
                V[r, q] = c * vrq + s * vrp
    for i in range(3):
        w[i] = B[i, i]
    # insertion sort ascending, permuting columns along
    for i in range(1, 3):
        key = w[i]
        c0, c1, c2 = V[0, i], V[1, i], V[2, i]
        j = i - 1
        while j >= 0 and w[j] > key:
            w[j + 1] = w[j]
            V[0, j + 1] = V[0, j]
            V[1, j + 1] = V[1, j]
            V[2, j + 1] = V[2, j]
            j -= 1
        w[j + 1] = key
        V[0, j + 1] = c0
        V[1, j + 1] = c1
        V[2, j + 1] = c2


@njit(cache=True)
def eig3_jacobi_batch(A, w, V):
    """Batched 3x3 Jacobi: A (N,3,3) -> w (N,3) ascending, V (N,3,3)."""
    for n in range(A.shape[0]):
        eig3_jacobi(A[n], w[n], V[n])


# ---------------------------------------------------------------------------
# pointwise 2D material laws (raw strain components e11, e22, e12)
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def degr_point(deg, b, d):
    """Degradation g(d) and its first two derivatives."""
    if deg == GA:
        om = 1.0 - d
        return om * om, -2.0 * om, 2.0
    elif deg == GB:
        return 1.0 + d * d * (2.0 * d - 3.0), 6.0 * d * (d - 1.0), 12.0 * d - 6.0
    elif deg == GC:
        return (
            1.0 + d * d * (-6.0 + d * (8.0 - 3.0 * d)),
            -12.0 * d * (1.0 - d) ** 2,
            -12.0 + 48.0 * d - 36.0 * d * d,
        )
    else:
        eb = math.exp(b)
        den = (b - 1.0) * eb + 1.0
        ebd = math.exp(b * d)
        return (
            (ebd - (b * (d - 1.0) + 1.0) * eb) / den,
            b * (ebd - eb) / den,
            b * b * ebd / den,
        )


@njit(cache=True, inline="always")
def psi_point2(split, lam, mu, e11, e22, e12):
    """Undegraded split energies (psi0_plus, psi0_minus) for m = 2."""
    tr = e11 + e22
    if split == ISO:
        return 0.5 * lam * tr * tr + mu * (e11 * e11 + e22 * e22 + 2.0 * e12 * e12), 0.0
    if split == VOLDEV:
        a = 0.5 * mu + 0.5 * lam
        d11 = e11 - 0.5 * tr
        d22 = e22 - 0.5 * tr
        return a * tr * tr, mu * (d11 * d11 + d22 * d22 + 2.0 * e12 * e12)
    if split == VOLPM:
        a = 0.5 * mu + 0.5 * lam
        trp = tr if tr > 0.0 else 0.0
        trm = tr - trp
        d11 = e11 - 0.5 * tr
        d22 = e22 - 0.5 * tr
        dev2 = d11 * d11 + d22 * d22 + 2.0 * e12 * e12
        return a * trp * trp, a * trm * trm + mu * dev2
    l1, l2 = eig2_values(e11, e22, e12)
    trp = tr if tr > 0.0 else 0.0
    trm = tr - trp
    p1 = l1 if l1 > 0.0 else 0.0
    p2 = l2 if l2 > 0.0 else 0.0
    m1 = l1 - p1
    m2 = l2 - p2
    return (
        0.5 * lam * trp * trp + mu * (p1 * p1 + p2 * p2),
        0.5 * lam * trm * trm + mu * (m1 * m1 + m2 * m2),
    )


@njit(cache=True, inline="always")
def sig_point2(split, lam, mu, e11, e22, e12):
    """Split stresses (sp11, sp22, sp12, sm11, sm22, sm12) for m = 2."""
    tr = e11 + e22
    if split == ISO:
        return lam * tr + 2.0 * mu * e11, lam * tr + 2.0 * mu * e22, 2.0 * mu * e12, 0.0, 0.0, 0.0
    if split == VOLDEV:
        c = mu + lam
        d11 = e11 - 0.5 * tr
        d22 = e22 - 0.5 * tr
        return c * tr, c * tr, 0.0, 2.0 * mu * d11, 2.0 * mu * d22, 2.0 * mu * e12
    if split == VOLPM:
        c = mu + lam
        trp = tr if tr > 0.0 else 0.0
        trm = tr - trp
        d11 = e11 - 0.5 * tr
        d22 = e22 - 0.5 * tr
        return (
            c * trp,
            c * trp,
            0.0,
            c * trm + 2.0 * mu * d11,
            c * trm + 2.0 * mu * d22,
            2.0 * mu * e12,
        )
    l1, l2, c, s = eig2_full(e11, e22, e12)
    trp = tr if tr > 0.0 else 0.0
    trm = tr - trp
    p1 = l1 if l1 > 0.0 else 0.0
    p2 = l2 if l2 > 0.0 else 0.0
    a1p = lam * trp + 2.0 * mu * p1
    a2p = lam * trp + 2.0 * mu * p2
    a1m = lam * trm + 2.0 * mu * (l1 - p1)
    a2m = lam * trm + 2.0 * mu * (l2 - p2)
    cc = c * c
    ss = s * s
    sc = s * c
    # q1 = (-s, c) for l1, q2 = (c, s) for l2
    sp11 = a1p * ss + a2p * cc
    sp22 = a1p * cc + a2p * ss
    sp12 = (a2p - a1p) * sc
    sm11 = a1m * ss + a2m * cc
    sm22 = a1m * cc + a2m * ss
    sm12 = (a2m - a1m) * sc
    return sp11, sp22, sp12, sm11, sm22, sm12


@njit(cache=True)
def hess_point2(split, lam, mu, e11, e22, e12, Cp, Cm):
    """Generalized split Hessians for m = 2, Mandel basis (e11, e22, sqrt2 e12).

    Kink branches: the squared positive ramp takes curvature on x >= 0, the
    negative one on x < 0, so the two selections always sum to the full
    quadratic Hessian.
    """
    for i in range(3):
        for j in range(3):
            Cp[i, j] = 0.0
            Cm[i, j] = 0.0
    tr = e11 + e22
    if split == ISO:
        Cp[0, 0] = lam + 2.0 * mu
        Cp[0, 1] = lam
        Cp[1, 0] = lam
        Cp[1, 1] = lam + 2.0 * mu
        Cp[2, 2] = 2.0 * mu
        return
    if split == VOLDEV or split == VOLPM:
        c = mu + lam  # 2 mu / m + lam for m = 2
        if split == VOLDEV:
            chi = 1.0
        else:
            chi = 1.0 if tr >= 0.0 else 0.0
        Cp[0, 0] = c * chi
        Cp[0, 1] = c * chi
        Cp[1, 0] = c * chi
        Cp[1, 1] = c * chi
        Cm[0, 0] = c * (1.0 - chi) + mu
        Cm[0, 1] = c * (1.0 - chi) - mu
        Cm[1, 0] = c * (1.0 - chi) - mu
        Cm[1, 1] = c * (1.0 - chi) + mu
        Cm[2, 2] = 2.0 * mu
        return
    # spectral
    l1, l2, c, s = eig2_full(e11, e22, e12)
    b1p = 1.0 if l1 >= 0.0 else 0.0
    b2p = 1.0 if l2 >= 0.0 else 0.0
    scale = 1.0 + max(abs(l1), abs(l2))
    if abs(l2 - l1) > EIG_TIE_RTOL * scale:
        p1 = l1 if l1 > 0.0 else 0.0
        p2 = l2 if l2 > 0.0 else 0.0
        g12p = (p2 - p1) / (l2 - l1)
    else:
        g12p = b1p
    # congruence matrix R of V -> Q^T V Q in the Mandel basis,
    # rows ordered (l1 direction, l2 direction, cross)
    x1, y1 = -s, c
    x2, y2 = c, s
    r2 = math.sqrt(2.0)
    R00, R01, R02 = x1 * x1, y1 * y1, r2 * x1 * y1
    R10, R11, R12 = x2 * x2, y2 * y2, r2 * x2 * y2
    R20, R21, R22 = r2 * x1 * x2, r2 * y1 * y2, x1 * y2 + x2 * y1
    chi_p = 1.0 if tr >= 0.0 else 0.0
    two_mu = 2.0 * mu
    # Cp = lam * chi_p * vI vI^T + 2 mu R^T diag(b1p, b2p, g12p) R
    Cp[0, 0] = lam * chi_p + two_mu * (b1p * R00 * R00 + b2p * R10 * R10 + g12p * R20 * R20)
    Cp[0, 1] = lam * chi_p + two_mu * (b1p * R00 * R01 + b2p * R10 * R11 + g12p * R20 * R21)
    Cp[0, 2] = two_mu * (b1p * R00 * R02 + b2p * R10 * R12 + g12p * R20 * R22)
    Cp[1, 1] = lam * chi_p + two_mu * (b1p * R01 * R01 + b2p * R11 * R11 + g12p * R21 * R21)
    Cp[1, 2] = two_mu * (b1p * R01 * R02 + b2p * R11 * R12 + g12p * R21 * R22)
    Cp[2, 2] = two_mu * (b1p * R02 * R02 + b2p * R12 * R12 + g12p * R22 * R22)
    Cp[1, 0] = Cp[0, 1]
    Cp[2, 0] = Cp[0, 2]
    Cp[2, 1] = Cp[1, 2]
    # the complementary selection: branches 1-b, cross 1-g12p, trace 1-chi
    b1m = 1.0 - b1p
    b2m = 1.0 - b2p
    g12m = 1.0 - g12p
    chi_m = 1.0 - chi_p
    Cm[0, 0] = lam * chi_m + two_mu * (b1m * R00 * R00 + b2m * R10 * R10 + g12m * R20 * R20)
    Cm[0, 1] = lam * chi_m + two_mu * (b1m * R00 * R01 + b2m * R10 * R11 + g12m * R20 * R21)
    Cm[0, 2] = two_mu * (b1m * R00 * R02 + b2m * R10 * R12 + g12m * R20 * R22)
    Cm[1, 1] = lam * chi_m + two_mu * (b1m * R01 * R01 + b2m * R11 * R11 + g12m * R21 * R21)
    Cm[1, 2] = two_mu * (b1m * R01 * R02 + b2m * R11 * R12 + g12m * R21 * R22)
    Cm[2, 2] = two_mu * (b1m * R02 * R02 + b2m * R12 * R12 + g12m * R22 * R22)
    Cm[1, 0] = Cm[0, 1]
    Cm[2, 0] = Cm[0, 2]
    Cm[2, 1] = Cm[1, 2]


# ---------------------------------------------------------------------------
# nonlinear vertex smoother
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _local_disp_energy(
    split, lam, mu, kres, deg, gdb,
    k0, k1, pqp, pcorner, dthx, dthy, wq,
    eps, dq, w0, w1,
):
    """Patch energy sum of psi at trial local offset (w0, w1), P_ext excluded."""
    acc = 0.0
    for kk in range(k0, k1):
        q = pqp[kk]
        a = pcorner[kk]
        alpha = q & 3
        gx = dthx[alpha, a]
        gy = dthy[alpha, a]
        t11 = eps[q, 0] + gx * w0
        t22 = eps[q, 1] + gy * w1
        t12 = eps[q, 2] + 0.5 * (gy * w0 + gx * w1)
        pp, pm = psi_point2(split, lam, mu, t11, t22, t12)
        g, _, _ = degr_point(deg, gdb, dq[q])
        acc += wq * ((g + kres) * pp + pm)
    return acc


@njit(cache=True)
def smoother_sweep(
    ud, ufree, dfree, lower,
    pptr, pqp, pcorner, theta, dthx, dthy, wq,
    eps, dq, gdq, psip,
    split, lam, mu, kres, deg, gdb,
    gc1, gc2, beta,
    pext,
    smoother, preC,
    newton_tol, newton_max, ls_max,
    g_quadratic,
    vstart, vend, do_disp, do_damage,
):
    """One forward nonlinear Gauss-Seidel pass over vertices [vstart, vend).

    Per vertex: the local displacement problem on the free components
    (exact damped Newton for ``smoother == 0``, one preconditioned step with
    the precomputed upper-bound matrix for ``smoother == 1``), then the exact
    clamped solve of the local damage quadratic.  Quadrature-point state
    (strains, damage, damage gradients, tensile reference energy) is updated
    incrementally so later vertices see earlier corrections.

    gc1 = g_c * c_gamma, gc2 = g_c * c_gamma * (w(1)/c_l) * l^2.

    Returns 0 on success, 1 if a local damage curvature was non-positive,
    2 if a local displacement Hessian was numerically singular.
    """
    Cp = np.empty((3, 3))
    Cm = np.empty((3, 3))
    for v in range(vstart, vend):
        k0 = pptr[v]
        k1 = pptr[v + 1]
        if k1 == k0:
            continue
        # ------------------------------------------------ displacement solve
        f0 = ufree[v, 0] if do_disp else False
        f1 = ufree[v, 1] if do_disp else False
        if f0 or f1:
            v0 = 0.0
            v1 = 0.0
            if smoother == 0:
                # exact: damped local (semismooth) Newton; e_cur tracks the
                # local energy (patch psi + P_ext) at the current offset
                e_cur = _local_disp_energy(
                    split, lam, mu, kres, deg, gdb,
                    k0, k1, pqp, pcorner, dthx, dthy, wq, eps, dq, 0.0, 0.0,
                )
                g0norm = -1.0
                for _ in range(newton_max):
                    g0 = pext[v, 0]
                    g1 = pext[v, 1]
                    h00 = 0.0
                    h01 = 0.0
                    h11 = 0.0
                    for kk in range(k0, k1):
                        q = pqp[kk]
                        a = pcorner[kk]
                        alpha = q & 3
                        gx = dthx[alpha, a]
                        gy = dthy[alpha, a]
                        t11 = eps[q, 0] + gx * v0
                        t22 = eps[q, 1] + gy * v1
                        t12 = eps[q, 2] + 0.5 * (gy * v0 + gx * v1)
                        g, _, _ = degr_point(deg, gdb, dq[q])
                        gk = g + kres
                        sp11, sp22, sp12, sm11, sm22, sm12 = sig_point2(
                            split, lam, mu, t11, t22, t12)
                        s11 = gk * sp11 + sm11
                        s22 = gk * sp22 + sm22
                        s12 = gk * sp12 + sm12
                        g0 += wq * (s11 * gx + s12 * gy)
                        g1 += wq * (s22 * gy + s12 * gx)
                        hess_point2(split, lam, mu, t11, t22, t12, Cp, Cm)
                        c00 = gk * Cp[0, 0] + Cm[0, 0]
                        c01 = gk * Cp[0, 1] + Cm[0, 1]
                        c02 = gk * Cp[0, 2] + Cm[0, 2]
                        c11 = gk * Cp[1, 1] + Cm[1, 1]
                        c12 = gk * Cp[1, 2] + Cm[1, 2]
                        c22 = gk * Cp[2, 2] + Cm[2, 2]
                        # Mandel columns b_x = (gx, 0, gy/sqrt2), b_y = (0, gy, gx/sqrt2)
                        r2i = 0.7071067811865476
                        bx0, bx2 = gx, gy * r2i
                        by1, by2 = gy, gx * r2i
                        h00 += wq * (bx0 * (c00 * bx0 + c02 * bx2) + bx2 * (c02 * bx0 + c22 * bx2))
                        h01 += wq * (bx0 * (c01 * by1 + c02 * by2) + bx2 * (c12 * by1 + c22 * by2))
                        h11 += wq * (by1 * (c11 * by1 + c12 * by2) + by2 * (c12 * by1 + c22 * by2))
                    if not f0:
                        g0 = 0.0
                    if not f1:
                        g1 = 0.0
                    gn = math.sqrt(g0 * g0 + g1 * g1)
                    if g0norm < 0.0:
                        g0norm = gn
                    if gn <= newton_tol * (1.0 + g0norm):
                        break
                    # solve restricted system
                    d0 = 0.0
                    d1 = 0.0
                    if f0 and f1:
                        det = h00 * h11 - h01 * h01
                        if abs(det) <= 1.0e-300:
                            return 2
                        d0 = -(h11 * g0 - h01 * g1) / det
                        d1 = -(h00 * g1 - h01 * g0) / det
                    elif f0:
                        if abs(h00) <= 1.0e-300:
                            return 2
                        d0 = -g0 / h00
                    else:
                        if abs(h11) <= 1.0e-300:
                            return 2
                        d1 = -g1 / h11
                    # halve until the local energy does not increase
                    alpha_ls = 1.0
                    accepted = False
                    for _h in range(ls_max + 1):
                        w0 = v0 + alpha_ls * d0
                        w1 = v1 + alpha_ls * d1
                        e_t = _local_disp_energy(
                            split, lam, mu, kres, deg, gdb,
                            k0, k1, pqp, pcorner, dthx, dthy, wq, eps, dq, w0, w1,
                        ) + pext[v, 0] * w0 + pext[v, 1] * w1
                        if e_t <= e_cur:
                            v0 = w0
                            v1 = w1
                            e_cur = e_t
                            accepted = True
                            break
                        alpha_ls *= 0.5
                    if not accepted:
                        break
            else:
                # preconditioned: one step with the fixed local upper bound
                g0 = pext[v, 0]
                g1 = pext[v, 1]
                for kk in range(k0, k1):
                    q = pqp[kk]
                    a = pcorner[kk]
                    alpha = q & 3
                    gx = dthx[alpha, a]
                    gy = dthy[alpha, a]
                    g, _, _ = degr_point(deg, gdb, dq[q])
                    gk = g + kres
                    sp11, sp22, sp12, sm11, sm22, sm12 = sig_point2(
                        split, lam, mu, eps[q, 0], eps[q, 1], eps[q, 2])
                    s11 = gk * sp11 + sm11
                    s22 = gk * sp22 + sm22
                    s12 = gk * sp12 + sm12
                    g0 += wq * (s11 * gx + s12 * gy)
                    g1 += wq * (s22 * gy + s12 * gx)
                if not f0:
                    g0 = 0.0
                if not f1:
                    g1 = 0.0
                h00 = preC[v, 0, 0]
                h01 = preC[v, 0, 1]
                h11 = preC[v, 1, 1]
                if f0 and f1:
                    det = h00 * h11 - h01 * h01
                    if abs(det) <= 1.0e-300:
                        return 2
                    v0 = -(h11 * g0 - h01 * g1) / det
                    v1 = -(h00 * g1 - h01 * g0) / det
                elif f0:
                    if abs(h00) <= 1.0e-300:
                        return 2
                    v0 = -g0 / h00
                else:
                    if abs(h11) <= 1.0e-300:
                        return 2
                    v1 = -g1 / h11
            if v0 != 0.0 or v1 != 0.0:
                ud[v, 0] += v0
                ud[v, 1] += v1
                for kk in range(k0, k1):
                    q = pqp[kk]
                    a = pcorner[kk]
                    alpha = q & 3
                    gx = dthx[alpha, a]
                    gy = dthy[alpha, a]
                    eps[q, 0] += gx * v0
                    eps[q, 1] += gy * v1
                    eps[q, 2] += 0.5 * (gy * v0 + gx * v1)
                    pp, _ = psi_point2(split, lam, mu, eps[q, 0], eps[q, 1], eps[q, 2])
                    psip[q] = pp
        # ----------------------------------------------------- damage solve
        if do_damage and dfree[v]:
            b = 0.0
            acurv = 0.0
            for kk in range(k0, k1):
                q = pqp[kk]
                a = pcorner[kk]
                alpha = q & 3
                th = theta[alpha, a]
                gx = dthx[alpha, a]
                gy = dthy[alpha, a]
                _, g1d, g2d = degr_point(deg, gdb, dq[q])
                wprime = 1.0 + beta - 2.0 * beta * dq[q]
                b += wq * (th * (g1d * psip[q] + gc1 * wprime)
                           + 2.0 * gc2 * (gdq[q, 0] * gx + gdq[q, 1] * gy))
                acurv += wq * (th * th * (g2d * psip[q] + gc1 * (-2.0 * beta))
                               + 2.0 * gc2 * (gx * gx + gy * gy))
            if acurv <= 0.0:
                return 1
            dv = ud[v, 2]
            dnew = dv - b / acurv
            if dnew < lower[v]:
                dnew = lower[v]
            if dnew > 1.0:
                dnew = 1.0
            delta = dnew - dv
            if not g_quadratic and delta != 0.0:
                # the quadratic model is inexact for non-quadratic g:
                # halve toward zero until the local energy does not increase
                e0 = 0.0
                for kk in range(k0, k1):
                    q = pqp[kk]
                    g, _, _ = degr_point(deg, gdb, dq[q])
                    wloc = (1.0 + beta * (1.0 - dq[q])) * dq[q]
                    e0 += wq * ((g + kres) * psip[q] + gc1 * wloc
                                + gc2 * (gdq[q, 0] ** 2 + gdq[q, 1] ** 2))
                for _h in range(ls_max + 1):
                    et = 0.0
                    for kk in range(k0, k1):
                        q = pqp[kk]
                        a = pcorner[kk]
                        alpha = q & 3
                        th = theta[alpha, a]
                        gx = dthx[alpha, a]
                        gy = dthy[alpha, a]
                        dt = dq[q] + th * delta
                        g, _, _ = degr_point(deg, gdb, dt)
                        wloc = (1.0 + beta * (1.0 - dt)) * dt
                        et += wq * ((g + kres) * psip[q] + gc1 * wloc
                                    + gc2 * ((gdq[q, 0] + gx * delta) ** 2
                                             + (gdq[q, 1] + gy * delta) ** 2))
                    if et <= e0:
                        break
                    delta *= 0.5
                else:
                    delta = 0.0
            if delta != 0.0:
                ud[v, 2] += delta
                for kk in range(k0, k1):
                    q = pqp[kk]
                    a = pcorner[kk]
                    alpha = q & 3
                    dq[q] += theta[alpha, a] * delta
                    gdq[q, 0] += dthx[alpha, a] * delta
                    gdq[q, 1] += dthy[alpha, a] * delta
    return 0


# ---------------------------------------------------------------------------
# blocked Gauss-Seidel on BSR arrays
# ---------------------------------------------------------------------------

@njit(cache=True)
def bgs_sweep(indptr, indices, data, b, x, reverse):
    """One blocked Gauss-Seidel sweep, 3x3 vertex blocks.

    Rows whose diagonal entry is exactly zero (truncated or Dirichlet) are
    excluded from the local solve; blocks whose active diagonal sub-block is
    singular (pivot below 1e-14 * scale) are skipped entirely.
    """
    nb = indptr.shape[0] - 1
    start = nb - 1 if reverse else 0
    stop = -1 if reverse else nb
    step = -1 if reverse else 1
    D = np.empty((3, 3))
    r = np.empty(3)
    i = start
    while i != stop:
        r[0] = b[3 * i]
        r[1] = b[3 * i + 1]
        r[2] = b[3 * i + 2]
        has_diag = False
        for kb in range(indptr[i], indptr[i + 1]):
            j = indices[kb]
            x0 = x[3 * j]
            x1 = x[3 * j + 1]
            x2 = x[3 * j + 2]
            blk = data[kb]
            r[0] -= blk[0, 0] * x0 + blk[0, 1] * x1 + blk[0, 2] * x2
            r[1] -= blk[1, 0] * x0 + blk[1, 1] * x1 + blk[1, 2] * x2
            r[2] -= blk[2, 0] * x0 + blk[2, 1] * x1 + blk[2, 2] * x2
            if j == i:
                for ii in range(3):
                    for jj in range(3):
                        D[ii, jj] = blk[ii, jj]
                has_diag = True
        if not has_diag:
            i += step
            continue
        # active local dofs: nonzero diagonal entry
        na = 0
        act0 = -1
        act1 = -1
        act2 = -1
        if D[0, 0] != 0.0:
            act0 = 0
            na += 1
        if D[1, 1] != 0.0:
            if na == 0:
                act0 = 1
            else:
                act1 = 1
            na += 1
        if D[2, 2] != 0.0:
            if na == 0:
                act0 = 2
            elif na == 1:
                act1 = 2
            else:
                act2 = 2
            na += 1
        if na == 0:
            i += step
            continue
        scale = 0.0
        if na >= 1:
            scale = max(scale, abs(D[act0, act0]))
        if na >= 2:
            scale = max(scale, abs(D[act1, act1]))
        if na >= 3:
            scale = max(scale, abs(D[act2, act2]))
        tol = 1.0e-14 * scale
        if na == 1:
            piv = D[act0, act0]
            if abs(piv) > tol:
                x[3 * i + act0] += r[act0] / piv
        elif na == 2:
            a00 = D[act0, act0]
            a01 = D[act0, act1]
            a10 = D[act1, act0]
            a11 = D[act1, act1]
            # partial pivoting on the 2x2
            if abs(a00) >= abs(a10):
                if abs(a00) <= tol:
                    i += step
                    continue
                m = a10 / a00
                s11 = a11 - m * a01
                if abs(s11) <= tol:
                    i += step
                    continue
                y1 = (r[act1] - m * r[act0]) / s11
                y0 = (r[act0] - a01 * y1) / a00
            else:
                if abs(a10) <= tol:
                    i += step
                    continue
                m = a00 / a10
                s01 = a01 - m * a11
                if abs(s01) <= tol:
                    i += step
                    continue
                y1 = (r[act0] - m * r[act1]) / s01
                y0 = (r[act1] - a11 * y1) / a10
            x[3 * i + act0] += y0
            x[3 * i + act1] += y1
        else:
            # full 3x3 Gaussian elimination with partial pivoting
            A = np.empty((3, 4))
            for ii in range(3):
                A[ii, 0] = D[ii, 0]
                A[ii, 1] = D[ii, 1]
                A[ii, 2] = D[ii, 2]
                A[ii, 3] = r[ii]
            ok = True
            for col in range(3):
                p = col
                for ii in range(col + 1, 3):
                    if abs(A[ii, col]) > abs(A[p, col]):
                        p = ii
                if abs(A[p, col]) <= tol:
                    ok = False
                    break
                if p != col:
                    for jj in range(4):
                        tmp = A[col, jj]
                        A[col, jj] = A[p, jj]
                        A[p, jj] = tmp
                for ii in range(col + 1, 3):
                    m = A[ii, col] / A[col, col]
                    for jj in range(col, 4):
                        A[ii, jj] -= m * A[col, jj]
            if ok:
                y2 = A[2, 3] / A[2, 2]
                y1 = (A[1, 3] - A[1, 2] * y2) / A[1, 1]
                y0 = (A[0, 3] - A[0, 1] * y1 - A[0, 2] * y2) / A[0, 0]
                x[3 * i] += y0
                x[3 * i + 1] += y1
                x[3 * i + 2] += y2
        i += step


# ---------------------------------------------------------------------------
# pivot-skipping dense LDL^T (singular-safe coarse solve fallback)
# ---------------------------------------------------------------------------

@njit(cache=True)
def ldl_skip_solve(A, b, rtol):
    """Solve A x = b by unpivoted LDL^T, skipping pivots below rtol * scale.

    Skipped columns receive a zero correction; meant for truncated,
    possibly semidefinite operators whose inactive rows are exactly zero.
    """
    n = A.shape[0]
    L = A.copy()
    d = np.zeros(n)
    scale = 0.0
    for i in range(n):
        if abs(A[i, i]) > scale:
            scale = abs(A[i, i])
    if scale == 0.0:
        return np.zeros(n)
    tol = rtol * scale
    for j in range(n):
        dj = L[j, j]
        for k in range(j):
            if d[k] != 0.0:
                dj -= L[j, k] * L[j, k] * d[k]
        if abs(dj) <= tol:
            d[j] = 0.0
            for i in range(j + 1, n):
                L[i, j] = 0.0
            continue
        d[j] = dj
        for i in range(j + 1, n):
            lij = L[i, j]
            for k in range(j):
                if d[k] != 0.0:
                    lij -= L[i, k] * L[j, k] * d[k]
            L[i, j] = lij / dj
    # forward solve L z = b (unit diagonal)
    z = b.copy()
    for i in range(n):
        for k in range(i):
            z[i] -= L[i, k] * z[k]
    # diagonal
    for i in range(n):
        z[i] = z[i] / d[i] if d[i] != 0.0 else 0.0
    # backward solve L^T x = z
    for i in range(n - 1, -1, -1):
        for k in range(i + 1, n):
            z[i] -= L[k, i] * z[k]
    return z
