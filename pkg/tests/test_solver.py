import numpy as np
import pytest

from hjbfem.mesh import crisscross_mesh
from hjbfem.problem import (ControlProblem, CoefficientSet, ExactSolution,
                            manufactured_problem)
from hjbfem.assembly import assemble
from hjbfem.solver import (SolverError, bellman_residual,
                           howard_step, howard_solve_timestep,
                           solve_parabolic, solve_fixed_policy,
                           write_solution_csv)

from helpers import random_hexagon, random_sign_problem


def one_node_mesh():
    """Criss-cross unit square: a single interior node plus 4 Dirichlet corners."""
    return crisscross_mesh(1, 1, bounds=(0, 1, 0, 1))


class TestBellmanResidual:
    def test_one_node_example(self):
        # single unknown, h = 1, unit reaction, zero diffusion; data 1 and 2
        # per control; at v = 1 the residual is max(0, -1) = 0 with the
        # first control as maximiser
        m = one_node_mesh()
        prob = ControlProblem(
            controls=(0, 1), T=1.0,
            c=lambda al, p: np.ones(len(p)),
            f=lambda al, p, t: np.full(len(p), 1.0 + al),
            g_dir=lambda p: np.ones(len(p)),
            v_T=lambda p: np.ones(len(p)))
        ops = assemble(m, prob)
        v = np.ones(m.n_nodes)
        res, pol = bellman_residual(ops, 1.0, v, v)
        assert res[0] == pytest.approx(0.0, abs=1e-14)
        assert pol[0] == 0

    def test_singleton_is_linear_defect(self, rng):
        mesh = random_hexagon(rng, n_robin=2)
        prob = random_sign_problem(mesh, rng, n_controls=1)
        ops = assemble(mesh, prob)
        h = 0.25
        v_now = rng.normal(size=mesh.n_nodes)
        v_next = rng.normal(size=mesh.n_nodes)
        res, pol = bellman_residual(ops, h, v_now, v_next)
        mask = (np.arange(mesh.n_nodes) < mesh.n_time).astype(float)
        Ihat = h * ops.I[0].toarray() + np.diag(mask)
        Ehat = h * ops.E[0].toarray() - np.diag(mask)
        ref = Ihat @ v_now + Ehat @ v_next - h * ops.rhs(0)
        assert np.allclose(res, ref, atol=1e-12)
        assert np.all(pol == 0)

    def test_identical_controls_tie_break(self, rng):
        mesh = random_hexagon(rng, n_robin=0)
        prob = random_sign_problem(mesh, rng, n_controls=1)
        two = ControlProblem(
            controls=(0, 1), T=1.0, a=lambda al, p: prob.a(0, p),
            b=lambda al, p: prob.b(0, p), c=lambda al, p: prob.c(0, p),
            f=lambda al, p, t: prob.f(0, p, t),
            v_T=prob.v_T, g_dir=prob.g_dir)
        ops = assemble(mesh, two)
        v = rng.normal(size=mesh.n_nodes)
        _, pol = bellman_residual(ops, 0.5, v, v)
        assert np.all(pol == 0)

    def test_dimension_mismatch(self, exp2):
        ops = assemble(exp2.mesh(0), exp2.problem, exp2.splitting)
        with pytest.raises(ValueError):
            bellman_residual(ops, 1e-3, np.zeros(3), np.zeros(3))


class TestHowardStep:
    def test_copy_step_with_zero_operators(self):
        # all coefficients zero: Ihat = Id, Ehat = -Id on the time block, so
        # the solve copies the previous values there
        m = one_node_mesh()
        prob = ControlProblem(controls=(0.0,), T=1.0)
        ops = assemble(m, prob)
        v_next = np.array([0.7, 0.0, 0.0, 0.0, 0.0])
        v = howard_step(ops, 0.5, v_next, np.zeros(m.n_nodes, dtype=np.int32))
        assert v[0] == pytest.approx(0.7, abs=1e-14)

    def test_dirichlet_only_problem(self):
        m = crisscross_mesh(1, 1)
        prob = ControlProblem(controls=(0.0,), T=1.0,
                              g_dir=lambda p: np.full(len(p), 4.0),
                              v_T=lambda p: np.full(len(p), 4.0))
        ops = assemble(m, prob)
        v = howard_step(ops, 0.5, np.full(m.n_nodes, 4.0),
                        np.zeros(m.n_nodes, dtype=np.int32))
        assert np.allclose(v[m.n_free:], 4.0)

    def test_matches_dense_solve(self, rng):
        mesh = random_hexagon(rng, n_robin=2)
        prob = random_sign_problem(mesh, rng, n_controls=2)
        ops = assemble(mesh, prob)
        h = 0.2
        policy = rng.integers(0, 2, mesh.n_nodes).astype(np.int32)
        v_next = rng.normal(size=mesh.n_nodes)
        v = howard_step(ops, h, v_next, policy, t=0.0)
        n = mesh.n_nodes
        mask = (np.arange(n) < mesh.n_time).astype(float)
        rows = []
        rhs = []
        for i in range(n):
            k = policy[i]
            Ihat = h * ops.I[k].toarray() + np.diag(mask)
            Ehat = h * ops.E[k].toarray() - np.diag(mask)
            rows.append(Ihat[i])
            rhs.append(h * ops.rhs(k)[i] - Ehat[i] @ v_next)
        ref = np.linalg.solve(np.array(rows), np.array(rhs))
        assert np.allclose(v, ref, atol=1e-12)


class TestHowardTimestep:
    def test_singleton_converges_in_one(self, rng):
        mesh = random_hexagon(rng, n_robin=1)
        prob = random_sign_problem(mesh, rng, n_controls=1)
        ops = assemble(mesh, prob)
        v, diag = howard_solve_timestep(ops, 0.25, np.zeros(mesh.n_nodes))
        assert diag.converged
        assert diag.iterations == 1

    def test_residual_below_tol(self, rng):
        mesh = random_hexagon(rng, n_robin=2)
        prob = random_sign_problem(mesh, rng, n_controls=3)
        ops = assemble(mesh, prob)
        v_next = rng.uniform(0, 1, mesh.n_nodes)
        v, diag = howard_solve_timestep(ops, 0.1, v_next, tol=1e-12)
        assert diag.converged
        res, _ = bellman_residual(ops, 0.1, v, v_next)
        assert np.abs(res).max() <= 1e-10

    def test_iterates_monotone_nonincreasing(self, rng):
        # classical policy-iteration property for M-matrix systems: after the
        # first solve the iterates decrease componentwise
        mesh = random_hexagon(rng, n_robin=2)
        prob = random_sign_problem(mesh, rng, n_controls=3)
        ops = assemble(mesh, prob)
        h = 0.2
        v_next = rng.uniform(0, 2, mesh.n_nodes)
        policy = np.zeros(mesh.n_nodes, dtype=np.int32)
        prev = None
        for _ in range(8):
            w = howard_step(ops, h, v_next, policy)
            if prev is not None:
                assert np.all(w <= prev + 1e-11)
            prev = w
            _, policy = bellman_residual(ops, h, w, v_next)

    def test_residual_certificate_every_step(self, exp2):
        mesh = exp2.mesh(0)
        ops = assemble(mesh, exp2.problem, exp2.splitting)
        h = 1.0 / np.ceil(1.0 / ops.h_max)
        sol = solve_parabolic(mesh, exp2.problem, exp2.splitting, h,
                              tol=1e-12, ops=ops)
        for k in range(sol.n_steps):
            res, _ = bellman_residual(ops, h, sol.values[k], sol.values[k + 1],
                                      t=k * h)
            assert np.abs(res).max() <= 1e-10

    def test_max_iter_flag(self, rng):
        mesh = random_hexagon(rng, n_robin=0)
        prob = random_sign_problem(mesh, rng, n_controls=3)
        ops = assemble(mesh, prob)
        v, diag = howard_solve_timestep(ops, 0.1, np.zeros(mesh.n_nodes),
                                        tol=0.0, max_iter=1)
        assert not diag.converged
        assert diag.iterations == 1
        assert v is not None


class TestParabolic:
    def test_zero_data_zero_solution(self):
        m = one_node_mesh()
        prob = ControlProblem(controls=(0.0, 1.0), T=1.0)
        sol = solve_parabolic(m, prob, h=0.5)
        assert np.all(sol.values == 0)

    def test_backward_euler_closed_form(self):
        # single unknown with unit load and reaction coupling derived from
        # the assembled row: v_{k} = (v_{k+1} + h F) / (1 + h I_00) with the
        # Dirichlet neighbours pinned at zero
        m = one_node_mesh()
        prob = ControlProblem(controls=(0.0,), T=1.0,
                              c=lambda al, p: np.full(len(p), 0.8),
                              f=lambda al, p, t: np.ones(len(p)))
        ops = assemble(m, prob)
        h = 0.25
        sol = solve_parabolic(m, prob, h=h, ops=ops)
        I00 = ops.I[0].toarray()[0, 0]
        F0 = ops.rhs(0)[0]
        v = 0.0
        for _ in range(4):
            v = (v + h * F0) / (1 + h * I00)
        assert sol.values[0, 0] == pytest.approx(v, rel=1e-12)

    def test_unit_load_integrates_time(self):
        # f = 1, c = 0: since <1, hat> = 1 the interior value grows by h per
        # step; at t = 0 it equals T exactly
        m = one_node_mesh()
        prob = ControlProblem(controls=(0.0,), T=1.0,
                              f=lambda al, p, t: np.ones(len(p)))
        sol = solve_parabolic(m, prob, h=0.2)
        assert sol.values[0, 0] == pytest.approx(1.0, rel=1e-12)

    def test_steady_affine_solution_constant_in_time(self, exp1):
        mesh = exp1.mesh(1)
        exact = ExactSolution(
            value=lambda p, t: 1.0 + p[:, 0] / 4 + p[:, 1] / 8,
            dt=lambda p, t: np.zeros(len(p)),
            grad=lambda p, t: np.tile([0.25, 0.125], (len(p), 1)),
            lap=lambda p, t: np.zeros(len(p)))
        coeffs = CoefficientSet(
            controls=(0.0, 1.0), T=1.0,
            a=lambda al, p: 1.0 + al + 0 * p[:, 0],
            b=lambda al, p: np.tile([al, 1.0], (len(p), 1)),
            c=lambda al, p: np.full(len(p), 0.5))
        prob = manufactured_problem(exact, coeffs)
        sol = solve_parabolic(mesh, prob, h=0.25, tol=1e-13)
        spread = np.abs(sol.values - sol.values[-1]).max()
        assert spread <= 1e-10

    def test_dirichlet_values_exact_every_step(self, exp2):
        mesh = exp2.mesh(0)
        ops = assemble(mesh, exp2.problem, exp2.splitting)
        h = 1.0 / np.ceil(1.0 / ops.h_max)
        sol = solve_parabolic(mesh, exp2.problem, exp2.splitting, h, ops=ops)
        g = ops.g_dirichlet[mesh.n_free:]
        for k in range(sol.n_steps):
            assert np.array_equal(sol.values[k, mesh.n_free:], g)

    def test_nonnegativity_with_sign_conditions(self, rng):
        mesh = random_hexagon(rng, n_robin=2)
        prob = random_sign_problem(mesh, rng, n_controls=2)
        sol = solve_parabolic(mesh, prob, h=0.125)
        assert sol.values.min() >= -1e-12

    def test_comparison_with_fixed_policies(self, rng):
        mesh = random_hexagon(rng, n_robin=2)
        prob = random_sign_problem(mesh, rng, n_controls=3)
        ops = assemble(mesh, prob)
        sol = solve_parabolic(mesh, prob, h=0.125, ops=ops)
        for al in prob.controls:
            fixed = solve_fixed_policy(mesh, prob, h=0.125, alpha=al, ops=ops)
            assert np.all(sol.values <= fixed.values + 1e-10)

    def test_single_control_fixed_equals_parabolic(self, rng):
        mesh = random_hexagon(rng, n_robin=1)
        prob = random_sign_problem(mesh, rng, n_controls=1)
        ops = assemble(mesh, prob)
        a = solve_parabolic(mesh, prob, h=0.25, ops=ops)
        b = solve_fixed_policy(mesh, prob, h=0.25, alpha=prob.controls[0], ops=ops)
        assert np.allclose(a.values, b.values, atol=1e-12)

    def test_warm_and_cold_start_agree(self, exp2):
        mesh = exp2.mesh(0)
        ops = assemble(mesh, exp2.problem, exp2.splitting)
        h = 1.0 / np.ceil(1.0 / ops.h_max)
        a = solve_parabolic(mesh, exp2.problem, exp2.splitting, h, ops=ops,
                            warm_start=True)
        b = solve_parabolic(mesh, exp2.problem, exp2.splitting, h, ops=ops,
                            warm_start=False)
        assert np.abs(a.values - b.values).max() <= 1e-9

    def test_imex_boundary_solve_matches_implicit(self):
        # treating the time-Robin rows explicitly changes the step bound but
        # not the accuracy class: both schemes approximate the same field
        from hjbfem.experiments import build_experiment
        from hjbfem.verify import error_norms
        imex = build_experiment(1, n_controls=2, splitting="imex")
        impl = build_experiment(1, n_controls=2)
        mesh = imex.mesh(1)
        ops = assemble(mesh, imex.problem, imex.splitting)
        h = 1.0 / np.ceil(1.0 / ops.h_max)
        sol_ix = solve_parabolic(mesh, imex.problem, imex.splitting, h, ops=ops)
        sol_im = solve_parabolic(mesh, impl.problem, impl.splitting, h=0.125)
        e_ix = error_norms(mesh, sol_ix.values[0], imex.exact)
        e_im = error_norms(mesh, sol_im.values[0], impl.exact)
        assert e_ix.l2 <= 1.5 * e_im.l2

    def test_time_grid_validation(self, exp2):
        mesh = exp2.mesh(0)
        with pytest.raises(SolverError, match="integer"):
            solve_parabolic(mesh, exp2.problem, exp2.splitting, h=0.3)

    def test_h_max_enforced(self, exp2):
        mesh = exp2.mesh(0)
        ops = assemble(mesh, exp2.problem, exp2.splitting)
        with pytest.raises(SolverError, match="exceeds"):
            solve_parabolic(mesh, exp2.problem, exp2.splitting, h=0.5, ops=ops)

    def test_unknown_fixed_control(self, exp2):
        mesh = exp2.mesh(0)
        ops = assemble(mesh, exp2.problem, exp2.splitting)
        with pytest.raises(SolverError, match="not in the sample"):
            solve_fixed_policy(mesh, exp2.problem, exp2.splitting,
                               h=ops.h_max / 2, alpha=7.0, ops=ops)


class TestWDMP:
    def test_nonnegative_residual_controls_minimum(self, rng):
        # if the hatted implicit operator maps v to something non-negative on
        # the non-Dirichlet rows, the minimum of v over those rows is bounded
        # by the Dirichlet minimum and zero
        from scipy.sparse import diags
        from scipy.sparse.linalg import spsolve
        for trial in range(20):
            mesh = random_hexagon(rng, n_robin=2, with_time=True)
            prob = random_sign_problem(mesh, rng, n_controls=2)
            ops = assemble(mesh, prob)
            h = 0.2
            n = mesh.n_nodes
            mask = (np.arange(n) < mesh.n_time).astype(float)
            policy = rng.integers(0, 2, n)
            Ihat = None
            for k in range(2):
                part = diags((policy == k).astype(float)) @ (
                    h * ops.I[k] + diags(mask))
                Ihat = part if Ihat is None else Ihat + part
            q = np.empty(n)
            q[:mesh.n_free] = rng.uniform(0, 1, mesh.n_free)
            q[mesh.n_free:] = rng.uniform(-2, 2, n - mesh.n_free) * h
            v = spsolve(Ihat.tocsc(), q)
            bound = min(v[mesh.n_free:].min() if n > mesh.n_free else 0.0, 0.0)
            assert v[:mesh.n_free].min() >= bound - 1e-10


class TestSolutionOutput:
    def test_csv_columns_and_determinism(self, tmp_path, exp2):
        mesh = exp2.mesh(0)
        ops = assemble(mesh, exp2.problem, exp2.splitting)
        h = 1.0 / np.ceil(1.0 / ops.h_max)
        sol = solve_parabolic(mesh, exp2.problem, exp2.splitting, h, ops=ops)
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_solution_csv(sol, p1, 0)
        write_solution_csv(sol, p2, 0)
        assert p1.read_text() == p2.read_text()
        header = p1.read_text().splitlines()[0]
        assert header == "node,x,y,v,alpha_hat"

    def test_final_step_policy_marker(self, tmp_path, exp2):
        mesh = exp2.mesh(0)
        ops = assemble(mesh, exp2.problem, exp2.splitting)
        h = 1.0 / np.ceil(1.0 / ops.h_max)
        sol = solve_parabolic(mesh, exp2.problem, exp2.splitting, h, ops=ops)
        assert np.all(sol.policy_at(sol.n_steps) == -1)
        assert sol.policy_at(0).min() >= 0
