import numpy as np
import pytest

from hjbfem.mesh import TIME_ROBIN, ROBIN
from hjbfem.problem import (ControlProblem, SplittingSpec, CoefficientSet,
                            ExactSolution, manufactured_problem,
                            continuous_residual, validate_problem)

from helpers import hexagon_fan, random_sign_problem


def constant_exact(value=1.0):
    return ExactSolution(
        value=lambda p, t: np.full(len(p), value),
        dt=lambda p, t: np.zeros(len(p)),
        grad=lambda p, t: np.zeros((len(p), 2)),
        lap=lambda p, t: np.zeros(len(p)))


class TestManufactured:
    def test_exact_residual_vanishes_exp1(self, exp1, square_mesh, rng):
        pts = square_mesh.vertices[:square_mesh.n_interior]
        for t in (0.0, 0.37, 1.0):
            r = continuous_residual(exp1.problem, exp1.exact, pts, t, region=0)
            assert np.abs(r).max() <= 1e-12
        tr = square_mesh.vertices[square_mesh.n_interior:square_mesh.n_time]
        r = continuous_residual(exp1.problem, exp1.exact, tr, 0.5, region=TIME_ROBIN)
        assert np.abs(r).max() <= 1e-12

    def test_zero_solution_gives_zero_data(self):
        exact = constant_exact(0.0)
        coeffs = CoefficientSet(controls=(0.0, 1.0), T=1.0,
                                a=lambda al, p: np.ones(len(p)),
                                b=lambda al, p: np.tile([al, 1.0], (len(p), 1)))
        prob = manufactured_problem(exact, coeffs)
        pts = np.array([[0.1, 0.2], [0.5, 0.5]])
        assert np.all(prob.f(1.0, pts, 0.3) == 0)
        assert np.all(prob.g_bnd(1.0, pts, 0.3, ROBIN) == 0)
        assert np.all(prob.v_T(pts) == 0)

    def test_constant_one_with_zero_reaction(self):
        # v = 1, c = 0: all derivative terms vanish, f = 0, Dirichlet datum 1
        exact = constant_exact(1.0)
        coeffs = CoefficientSet(controls=(0.0,), T=1.0,
                                a=lambda al, p: np.ones(len(p)),
                                b=lambda al, p: np.tile([1.0, -2.0], (len(p), 1)))
        prob = manufactured_problem(exact, coeffs)
        pts = np.array([[0.3, -0.4]])
        assert prob.f(0.0, pts, 0.2) == pytest.approx(0.0)
        assert prob.g_dir(pts) == pytest.approx(1.0)
        assert prob.v_T(pts) == pytest.approx(1.0)

    def test_time_robin_gets_time_derivative(self):
        exact = ExactSolution(
            value=lambda p, t: t * np.ones(len(p)),
            dt=lambda p, t: np.ones(len(p)),
            grad=lambda p, t: np.zeros((len(p), 2)),
            lap=lambda p, t: np.zeros(len(p)))
        coeffs = CoefficientSet(controls=(0.0,), T=1.0)
        prob = manufactured_problem(exact, coeffs)
        pts = np.array([[0.0, 0.0]])
        assert prob.g_bnd(0.0, pts, 0.5, TIME_ROBIN) == pytest.approx(-1.0)
        assert prob.g_bnd(0.0, pts, 0.5, ROBIN) == pytest.approx(0.0)


class TestValidation:
    def test_experiment1_passes(self, exp1, square_mesh):
        rep = validate_problem(exp1.problem, exp1.splitting, square_mesh)
        assert rep.passed
        # the manufactured time-Robin datum is sign-indefinite: reported, not fatal
        assert not rep.sign_ok

    def test_negative_boundary_reaction_fails(self, rng):
        mesh = hexagon_fan(rim_tags=[ROBIN] + [3] * 5,
                           perturb=0.0)
        prob = random_sign_problem(mesh, rng)
        bad = ControlProblem(
            controls=prob.controls, T=1.0, a=prob.a, b=prob.b, c=prob.c,
            b_bnd=prob.b_bnd, c_bnd=lambda al, p: np.full(len(p), -1.0),
            v_T=prob.v_T, g_dir=prob.g_dir)
        rep = validate_problem(bad, SplittingSpec.fully_implicit(), mesh)
        assert not rep.passed
        assert any(code == "reaction-sign" for code, _ in rep.errors)

    def test_outward_boundary_drift_fails(self, rng):
        mesh = hexagon_fan(rim_tags=[ROBIN] + [3] * 5)
        node = int(np.flatnonzero(mesh.node_region == ROBIN)[0])
        outward = mesh.vertices[node] - np.array([0.0, 0.0])  # away from centre
        prob = random_sign_problem(mesh, rng)
        bad = ControlProblem(
            controls=(0,), T=1.0, a=prob.a,
            b_bnd=lambda al, p: np.tile(outward, (len(p), 1)),
            c_bnd=lambda al, p: np.ones(len(p)),
            v_T=prob.v_T, g_dir=prob.g_dir)
        rep = validate_problem(bad, SplittingSpec.fully_implicit(), mesh)
        assert not rep.passed
        assert any(code == "cone" for code, _ in rep.errors)

    def test_negative_diffusion_fails(self, square_mesh):
        bad = ControlProblem(controls=(0.0,), T=1.0,
                             a=lambda al, p: -np.ones(len(p)))
        rep = validate_problem(bad, SplittingSpec.fully_implicit(), square_mesh)
        assert any(code == "ellipticity" for code, _ in rep.errors)

    def test_final_datum_mismatch_fails(self, square_mesh):
        bad = ControlProblem(controls=(0.0,), T=1.0,
                             v_T=lambda p: np.ones(len(p)))
        rep = validate_problem(bad, SplittingSpec.fully_implicit(), square_mesh)
        assert any(code == "final-datum" for code, _ in rep.errors)

    def test_missing_robin_reaction_fails(self, rng):
        mesh = hexagon_fan(rim_tags=[ROBIN] + [3] * 5)
        prob = random_sign_problem(mesh, rng)
        loose = ControlProblem(
            controls=prob.controls, T=1.0, a=prob.a, b_bnd=prob.b_bnd,
            c_bnd=lambda al, p: np.zeros(len(p)),
            v_T=prob.v_T, g_dir=prob.g_dir)
        rep = validate_problem(loose, SplittingSpec(robin_floor=0.0), mesh)
        assert any(code == "robin-reaction" for code, _ in rep.errors)
        rep2 = validate_problem(loose, SplittingSpec(robin_floor=1.0), mesh)
        assert not any(code == "robin-reaction" for code, _ in rep2.errors)

    def test_deterministic(self, exp1, square_mesh):
        r1 = validate_problem(exp1.problem, exp1.splitting, square_mesh)
        r2 = validate_problem(exp1.problem, exp1.splitting, square_mesh)
        assert r1.errors == r2.errors and r1.warnings == r2.warnings


class TestSplittingSpec:
    def test_flags_validated(self):
        with pytest.raises(ValueError):
            SplittingSpec(diffusion="sometimes")
        with pytest.raises(ValueError):
            SplittingSpec(advection="offload")
        with pytest.raises(ValueError):
            SplittingSpec(robin_floor=-1.0)

    def test_fully_implicit(self):
        s = SplittingSpec.fully_implicit()
        assert s.is_fully_implicit
        assert not SplittingSpec(advection="explicit").is_fully_implicit

    def test_describe_round(self):
        s = SplittingSpec(diffusion="offload", advection="explicit")
        assert "offload" in s.describe() and "explicit" in s.describe()


class TestControlProblem:
    def test_empty_controls_rejected(self):
        with pytest.raises(ValueError):
            ControlProblem(controls=(), T=1.0)

    def test_bad_horizon_rejected(self):
        with pytest.raises(ValueError):
            ControlProblem(controls=(0.0,), T=0.0)
