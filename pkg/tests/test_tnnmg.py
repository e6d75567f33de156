"""The nonsmooth multigrid iteration: smoothers, correction, line search."""

import numpy as np
import pytest
from scipy.optimize import minimize

from fracmg import assembly as asm
from fracmg import tnnmg
from fracmg.increment import energy, project_feasible, stationarity_measure
from fracmg.linalg import TruncationMask, apply_truncation

from conftest import make_problem
from oracles import golden_section, projected_gradient_descent

CFG_EX = tnnmg.TnnmgConfig(smoother="ex")
CFG_PRE = tnnmg.TnnmgConfig(smoother="pre")


def random_feasible_state(prob, rng, u_scale=0.02):
    s = prob.zero_state()
    prob.apply_dirichlet(s)
    s.u[~prob.bc.u_mask] += u_scale * rng.normal(size=int((~prob.bc.u_mask).sum()))
    s.d[:] = rng.uniform(0, 1, s.d.shape)
    return project_feasible(prob, s)


def local_energy_u(prob, state, vertex):
    """J restricted to the displacement components of one vertex."""

    def f(v):
        s = state.copy()
        s.u[vertex] = state.u[vertex] + v
        return energy(prob, s)

    return f


# ===================================================================
# local displacement smoother
# ===================================================================


class TestDisplacementSmoother:
    def test_quadratic_problem_solved_in_one_pass(self, rng):
        """Isotropic split: the local problem is quadratic, EX lands on the
        exact minimizer (checked by a dense solve of the local system)."""
        prob = make_problem(split="isotropic", l=0.2)
        s = random_feasible_state(prob, rng)
        vertex = 6
        assert not prob.bc.u_mask[vertex].any()
        out = tnnmg.smooth_vertex_displacement(prob, s, vertex, "ex")
        f = local_energy_u(prob, s, vertex)
        # dense oracle: Newton on the quadratic via FD matrices
        h = 1e-6
        g = np.array([(f(np.array([h, 0])) - f(np.array([-h, 0]))) / (2 * h),
                      (f(np.array([0, h])) - f(np.array([0, -h]))) / (2 * h)])
        H = np.empty((2, 2))
        for i in range(2):
            for j in range(2):
                e_i = np.eye(2)[i] * h
                e_j = np.eye(2)[j] * h
                H[i, j] = (f(e_i + e_j) - f(e_i - e_j)
                           - f(-e_i + e_j) + f(-e_i - e_j)) / (4 * h * h)
        v_star = np.linalg.solve(H, -g)
        np.testing.assert_allclose(out.u[vertex] - s.u[vertex], v_star,
                                   atol=1e-7)
        assert energy(prob, out) <= energy(prob, s)

    def test_zero_gradient_leaves_state_unchanged(self):
        prob = make_problem(load=0.0, at_variant="at2")
        s = prob.zero_state()
        out = tnnmg.smooth_vertex_displacement(prob, s, 3, "ex")
        np.testing.assert_array_equal(out.array, s.array)

    def test_pre_equals_ex_on_pristine_isotropic(self, rng):
        """At d = 0 the upper-bound matrix (1+k) psi0'' equals the exact
        local isotropic Hessian, so one PRE step is the EX minimizer."""
        prob = make_problem(split="isotropic", l=0.2, load=3e-3)
        s = prob.zero_state()
        prob.apply_dirichlet(s)
        s.u[~prob.bc.u_mask] += 0.01 * rng.normal(
            size=int((~prob.bc.u_mask).sum()))
        for vertex in (4, 6, 9):
            out_ex = tnnmg.smooth_vertex_displacement(prob, s, vertex, "ex")
            out_pre = tnnmg.smooth_vertex_displacement(prob, s, vertex, "pre")
            np.testing.assert_allclose(out_pre.u[vertex], out_ex.u[vertex],
                                       rtol=1e-12, atol=1e-15)

    @pytest.mark.parametrize("variant", ["ex", "pre"])
    def test_never_increases_energy(self, variant, rng):
        prob = make_problem(split="spectral", l=0.2)
        s = random_feasible_state(prob, rng)
        j = energy(prob, s)
        for vertex in range(prob.num_vertices):
            out = tnnmg.smooth_vertex_displacement(prob, s, vertex, variant)
            assert energy(prob, out) <= j

    def test_spectral_matches_dense_minimization_oracle(self, rng):
        """EX on the nonsmooth local problem vs a Nelder-Mead polish."""
        prob = make_problem(split="spectral", l=0.2, load=5e-3)
        s = random_feasible_state(prob, rng, u_scale=0.01)
        for vertex in (5, 7):
            if prob.bc.u_mask[vertex].any():
                continue
            out = tnnmg.smooth_vertex_displacement(prob, s, vertex, "ex")
            f = local_energy_u(prob, s, vertex)
            ref = minimize(f, out.u[vertex] - s.u[vertex] + 1e-4,
                           method="Nelder-Mead",
                           options={"xatol": 1e-12, "fatol": 1e-16,
                                    "maxiter": 4000})
            got = out.u[vertex] - s.u[vertex]
            assert np.abs(got - ref.x).max() <= 1e-8 * (1 + np.abs(ref.x).max())

    def test_dirichlet_component_respected(self, rng):
        prob = make_problem()
        s = random_feasible_state(prob, rng)
        # a top-edge vertex: u_y prescribed, u_x free
        top = np.flatnonzero(prob.bc.u_mask[:, 1] & ~prob.bc.u_mask[:, 0])
        vertex = int(top[1])
        out = tnnmg.smooth_vertex_displacement(prob, s, vertex, "ex")
        assert out.u[vertex, 1] == s.u[vertex, 1]


# ===================================================================
# local damage smoother
# ===================================================================


class TestDamageSmoother:
    def _solve_and_oracle(self, prob, s, vertex):
        out = tnnmg.smooth_vertex_damage(prob, s, vertex)

        def f(v):
            c = s.copy()
            c.d[vertex] = v
            return energy(prob, c)

        lo = prob.obstacle[vertex]
        v_star = golden_section(f, lo, 1.0)
        clamped = min(max(v_star, lo), 1.0)
        return out.d[vertex], clamped, f

    def test_interior_minimizer(self, rng):
        prob = make_problem(l=0.3, load=2e-3, at_variant="at2")
        s = prob.zero_state()
        prob.apply_dirichlet(s)
        s.u[:, 1] = prob.level.coords[:, 1] / 0.5 * prob.load
        got, oracle, f = self._solve_and_oracle(prob, s, 6)
        assert 0.0 < got < 1.0
        # golden section localizes to ~sqrt(eps) only; the closed-form
        # clamped solve is the more accurate of the two
        assert abs(got - oracle) <= 1e-7
        assert f(got) <= f(oracle) + 1e-18

    def test_clamped_at_upper_bound(self, rng):
        prob = make_problem(l=0.3, load=0.5, at_variant="at2")
        s = prob.zero_state()
        prob.apply_dirichlet(s)
        s.u[:, 1] = prob.level.coords[:, 1] / 0.5 * prob.load
        got, oracle, f = self._solve_and_oracle(prob, s, 6)
        assert got == 1.0
        assert oracle >= 1.0 - 1e-9  # golden section stops just inside

    def test_clamped_at_obstacle(self, rng):
        prob = make_problem(l=0.3, load=2e-3, at_variant="at2")
        prob.obstacle[:] = 0.8
        s = prob.zero_state()
        prob.apply_dirichlet(s)
        s.u[:, 1] = prob.level.coords[:, 1] / 0.5 * prob.load
        s.d[:] = 0.8
        got, oracle, f = self._solve_and_oracle(prob, s, 6)
        assert got == 0.8
        assert f(0.8) <= f(0.81)

    def test_at1_threshold_keeps_pristine(self):
        # below the AT-1 load threshold the local minimizer is the bound
        prob = make_problem(load=1e-4, at_variant="at1")
        s = prob.zero_state()
        prob.apply_dirichlet(s)
        s.u[:, 1] = prob.level.coords[:, 1] / 0.5 * prob.load
        for vertex in range(prob.num_vertices):
            out = tnnmg.smooth_vertex_damage(prob, s, vertex)
            assert out.d[vertex] == 0.0

    def test_gd_degradation_safeguard(self, rng):
        """Non-quadratic g: one guarded model step still descends."""
        prob = make_problem(l=0.3, load=3e-2, degradation="gd", gd_b=6.0,
                            at_variant="at2")
        s = random_feasible_state(prob, rng, u_scale=0.01)
        j = energy(prob, s)
        for vertex in range(prob.num_vertices):
            out = tnnmg.smooth_vertex_damage(prob, s, vertex)
            assert energy(prob, out) <= j


# ===================================================================
# presmoothing sweep
# ===================================================================


class TestPresmooth:
    @pytest.mark.parametrize("smoother", ["ex", "pre"])
    def test_energy_never_increases(self, smoother, rng):
        prob = make_problem(split="spectral", l=0.2, load=8e-3)
        s = random_feasible_state(prob, rng)
        cfg = tnnmg.TnnmgConfig(smoother=smoother)
        j = energy(prob, s)
        for _ in range(4):
            s, j_new = tnnmg.presmooth(prob, s, cfg)
            assert j_new <= j
            assert j_new == energy(prob, s)
            j = j_new

    def test_keeps_feasibility(self, rng):
        prob = make_problem(l=0.2, load=8e-3)
        prob.obstacle[:] = 0.1
        s = random_feasible_state(prob, rng)
        s.d[:] = np.clip(s.d, prob.obstacle, 1.0)
        out, _ = tnnmg.presmooth(prob, s, CFG_EX)
        assert np.all(out.d >= prob.obstacle)
        assert np.all(out.d <= 1.0)

    def test_pre_majorization_inequality(self, rng):
        """The fixed local matrix majorizes the gradient increments."""
        for split in ("isotropic", "voldev", "volpm", "spectral"):
            prob = make_problem(split=split, l=0.2)
            Ci = tnnmg._local_upper_bound_matrices(prob)
            for _ in range(50):
                s = random_feasible_state(prob, rng, u_scale=0.05)
                vertex = int(rng.integers(prob.num_vertices))
                v = rng.normal(size=2)
                sv = s.copy()
                sv.u[vertex] += v
                dg = (asm.assemble_gradient(prob, sv)
                      - asm.assemble_gradient(prob, s)).reshape(-1, 3)
                lhs = float(dg[vertex, :2] @ v)
                rhs = float(v @ Ci[vertex] @ v)
                assert lhs <= rhs * (1 + 1e-12) + 1e-14


# ===================================================================
# linear correction and truncation
# ===================================================================


class TestLinearCorrection:
    def test_truncated_dofs_get_zero_correction(self, rng):
        prob = make_problem(l=0.2, load=8e-3)
        s = random_feasible_state(prob, rng)
        s.d[::3] = prob.obstacle[::3]          # exactly at the lower bound
        s.d[1::5] = 1.0                        # and at the upper bound
        c, mask, _ = tnnmg.linear_correction(prob, s, CFG_EX)
        assert np.all(c[~mask.active] == 0.0)
        cd = c.reshape(-1, 3)[:, 2]
        assert np.all(cd[::3] == 0.0)
        assert np.all(cd[1::5] == 0.0)
        assert mask.truncated_count >= prob.bc.u_mask.sum()

    def test_truncated_dofs_zero_on_multilevel_hierarchy(self, rng):
        """Interpolation from active coarse neighbors must not leak into
        truncated fine rows."""
        prob = make_problem(refine_steps=2, coarse_nx=4, coarse_ny=2,
                            l=0.1, load=4e-3)
        s = random_feasible_state(prob, rng, u_scale=0.005)
        s.d[rng.random(prob.num_vertices) < 0.4] = 0.0  # at the obstacle
        c, mask, _ = tnnmg.linear_correction(prob, s, CFG_EX)
        assert np.all(c[~mask.active] == 0.0)
        # Dirichlet displacement components in particular
        cu = c.reshape(-1, 3)[:, :2]
        assert np.all(cu[prob.bc.u_mask] == 0.0)

    def test_mask_respects_tolerance_band(self):
        prob = make_problem()
        cfg = tnnmg.TnnmgConfig(truncation_tol=1e-10)
        s = prob.zero_state()
        prob.apply_dirichlet(s)
        s.d[:] = 0.5
        s.d[0] = 5e-11       # within tol of the lower obstacle 0
        s.d[1] = 1.0 - 5e-11  # within tol of the upper bound
        s.d[2] = 2e-10       # outside the band
        mask = tnnmg.truncation_mask(prob, s, cfg)
        act = mask.active.reshape(-1, 3)[:, 2]
        assert not act[0] and not act[1] and act[2]


# ===================================================================
# damped update
# ===================================================================


class TestDampedUpdate:
    def test_zero_correction_accepts_full_step(self, rng):
        prob = make_problem(l=0.2)
        s = random_feasible_state(prob, rng)
        out, rho, j = tnnmg.damped_update(prob, s, np.zeros(3 * prob.num_vertices))
        assert rho == 1.0
        np.testing.assert_array_equal(out.array, s.array)

    def test_newton_step_on_quadratic_accepted_fully(self, rng):
        # pure displacement problem at frozen damage: the Newton step of a
        # strongly convex quadratic always decreases the energy
        prob = make_problem(split="isotropic", l=0.2, load=5e-3)
        s = prob.zero_state()
        prob.apply_dirichlet(s)
        g = asm.assemble_gradient(prob, s)
        M = prob.num_vertices
        active = np.zeros((M, 3), dtype=bool)
        active[:, :2] = ~prob.bc.u_mask
        mask = TruncationMask(active.ravel())
        A = asm.assemble_gen_hessian(prob, s)
        At, rt = apply_truncation(A, -g, mask)
        act = np.flatnonzero(mask.active)
        dense = At.to_scipy().toarray()[np.ix_(act, act)]
        c = np.zeros(3 * M)
        c[act] = np.linalg.solve(dense, rt[act])
        out, rho, _ = tnnmg.damped_update(prob, s, c)
        assert rho == 1.0
        assert energy(prob, out) < energy(prob, s)

    def test_overshooting_direction_is_backtracked(self):
        """A direction scaled so only rho = 1/4 decreases the energy."""
        prob = make_problem(split="isotropic", l=0.2, load=5e-3)
        s = prob.zero_state()
        prob.apply_dirichlet(s)
        g = asm.assemble_gradient(prob, s)
        M = prob.num_vertices
        active = np.zeros((M, 3), dtype=bool)
        active[:, :2] = ~prob.bc.u_mask
        act = np.flatnonzero(active.ravel())
        A = asm.assemble_gen_hessian(prob, s).to_scipy().toarray()
        delta = np.zeros(3 * M)
        delta[act] = np.linalg.solve(A[np.ix_(act, act)], -g[act])
        # along c = tau * delta the quadratic decreases iff rho < 2 / tau;
        # tau in (4, 8) admits rho = 1/4 but rejects 1/2 and 1
        c = 6.6 * delta
        out, rho, _ = tnnmg.damped_update(prob, s, c)
        assert rho == 0.25
        assert energy(prob, out) <= energy(prob, s)

    def test_falls_back_to_zero(self, rng):
        # at the global minimizer any nonzero direction increases J, and a
        # huge one cannot be rescued within 30 halvings
        prob = make_problem(split="isotropic", l=0.3, load=0.04,
                            lam=1.21, mu=0.8, g_c=0.27)
        s, _, info = projected_gradient_descent(prob, prob.zero_state(),
                                                tol=1e-12, max_it=50000)
        c = rng.normal(size=3 * prob.num_vertices) * 1e8
        c.reshape(-1, 3)[:, 2] = 0.0
        c.reshape(-1, 3)[:, :2][prob.bc.u_mask] = 0.0
        out, rho, _ = tnnmg.damped_update(prob, s, c)
        assert rho == 0.0
        np.testing.assert_array_equal(out.array, s.array)

    def test_projection_enters_before_line_search(self, rng):
        prob = make_problem(l=0.2)
        s = random_feasible_state(prob, rng)
        c = np.zeros(3 * prob.num_vertices)
        c.reshape(-1, 3)[:, 2] = 10.0  # pushes every damage dof beyond 1
        out, rho, _ = tnnmg.damped_update(prob, s, c)
        assert np.all(out.d <= 1.0)


# ===================================================================
# full solves
# ===================================================================


class TestSolveIncrement:
    def test_stationary_initial_state_converges_immediately(self):
        prob = make_problem(split="isotropic", l=0.3, load=0.04,
                            lam=1.21, mu=0.8, g_c=0.27)
        s0, _, info = projected_gradient_descent(prob, prob.zero_state(),
                                                 tol=1e-12, max_it=50000)
        assert info["converged"] or info["stalled"]
        st, rep = tnnmg.solve_increment(prob, s0, CFG_EX)
        assert rep.converged
        assert rep.iterations == 1

    def test_tiny_problem_matches_pgd_oracle(self):
        prob = make_problem(coarse_nx=2, coarse_ny=1, load=0.05, l=0.3,
                            lam=1.21, mu=0.8, g_c=0.27, at_variant="at2")
        s_o, j_o, info = projected_gradient_descent(prob, prob.zero_state())
        assert info["converged"] or info["stalled"]
        st, rep = tnnmg.solve_increment(prob, prob.zero_state(), CFG_EX)
        assert rep.converged
        assert abs(rep.energies[-1] - j_o) <= 1e-8

    @pytest.mark.parametrize("smoother", ["ex", "pre"])
    def test_monotone_feasible_run(self, smoother, rng):
        prob = make_problem(coarse_nx=8, coarse_ny=4, refine_steps=1,
                            load=1e-3, split="spectral")
        cfg = tnnmg.TnnmgConfig(smoother=smoother)
        st, rep = tnnmg.solve_increment(prob, prob.zero_state(), cfg)
        assert rep.converged
        chain = rep.energy_chain
        assert all(a >= b for a, b in zip(chain, chain[1:]))
        assert rep.feasibility_violations == 0
        assert np.all(st.d >= prob.obstacle) and np.all(st.d <= 1.0)
        assert prob.bc.satisfied(st, prob.load)

    def test_stationarity_at_convergence(self):
        prob = make_problem(coarse_nx=4, coarse_ny=2, load=2e-3, l=0.2)
        s0 = prob.zero_state()
        prob.apply_dirichlet(s0)
        g0 = stationarity_measure(prob, s0)
        st, rep = tnnmg.solve_increment(prob, s0, CFG_EX)
        assert rep.converged
        assert rep.stationarity[-1] <= 1e-5 * (1.0 + g0)

    def test_max_iterations_is_reported_not_raised(self):
        prob = make_problem(load=1e-3)
        cfg = tnnmg.TnnmgConfig(max_iterations=1)
        st, rep = tnnmg.solve_increment(prob, prob.zero_state(), cfg)
        assert not rep.converged
        assert rep.termination == "max_iterations"
        assert rep.iterations == 1

    def test_warm_start_variant_converges(self):
        prob = make_problem(load=1e-3, l=0.2)
        cfg = tnnmg.TnnmgConfig(smoother="ex", warm_start_displacement=True)
        st, rep = tnnmg.solve_increment(prob, prob.zero_state(), cfg)
        assert rep.converged
        chain = rep.energy_chain
        assert all(a >= b for a, b in zip(chain, chain[1:]))

    def test_nonconvex_degradation_warns(self):
        prob = make_problem(degradation="gb", load=1e-3)
        with pytest.warns(RuntimeWarning, match="not convex"):
            tnnmg.solve_increment(prob, prob.zero_state(),
                                  tnnmg.TnnmgConfig(max_iterations=2))

    def test_report_contents(self):
        prob = make_problem(load=1e-3)
        st, rep = tnnmg.solve_increment(prob, prob.zero_state(), CFG_EX)
        n = rep.iterations
        assert len(rep.energies) == len(rep.energies_half) == n
        assert len(rep.rhos) == len(rep.truncated_dofs) == len(rep.stationarity) == n
        assert rep.walltime_s > 0.0
        assert all(0.0 <= r <= 1.0 for r in rep.rhos)

    def test_obstacle_from_previous_step_is_respected(self, rng):
        prob = make_problem(load=8e-3, l=0.25, at_variant="at2")
        st1, _ = tnnmg.solve_increment(prob, prob.zero_state(), CFG_EX)
        # second, lower load step: irreversibility keeps d at or above st1.d
        prob2 = make_problem(load=4e-3, l=0.25, at_variant="at2")
        prob2.obstacle[:] = st1.d
        st2, rep2 = tnnmg.solve_increment(prob2, st1, CFG_EX)
        assert rep2.converged
        assert np.all(st2.d >= st1.d)
