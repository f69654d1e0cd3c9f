"""Built-in problems: the rate benchmark on the square, the boundary-control
problems on the notched domain, and a textbook heat-equation benchmark.

The notched domain is a unit square with a wedge removed on the left; its
boundary splits into the outer faces (bottom, right, top), a lower 45-degree
face carrying the reflection condition in the Skorokhod experiments, the
vertical exit segment, and an upper 45-degree face.  The polygon is a
documented reconstruction from the corner points (1/4,0), (1/2,1/4),
(1/2,3/4), (1/4,1); runs on it are flagged "reconstructed" in their
metadata.  At the two outer junction vertices of the 45-degree faces the
prescribed transport direction leaves the tangent cone, so those single
vertices are assigned to the adjacent Dirichlet face.
"""
from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field

import numpy as np

from .mesh import (Mesh, TIME_ROBIN, ROBIN, DIRICHLET, load_mesh, refine,
                   retag_mesh)
from .problem import (ControlProblem, SplittingSpec, CoefficientSet,
                      ExactSolution, manufactured_problem, EXPLICIT, OFFLOAD)

_GEOM_TOL = 1e-9

# notched domain features
EXIT_X = 0.5                       # vertical exit segment x = 1/2
EXIT_Y = (0.25, 0.75)
LOWER_DIAG = 0.25                  # x - y = 1/4
UPPER_DIAG = 1.25                  # x + y = 5/4
PENALTY_VALUE = 10.0
BARRIER_CENTRE = 3.0 / 8.0
BARRIER_HALFWIDTH = 1.0 / 20.0


def _template(name: str) -> Mesh:
    path = importlib.resources.files("hjbfem").joinpath(f"data/{name}")
    return load_mesh(str(path))


@dataclass
class Experiment:
    """A built-in problem bound to a mesh hierarchy."""

    name: str
    problem: ControlProblem
    splitting: SplittingSpec
    base_mesh: Mesh
    exact: ExactSolution | None = None
    notes: dict = field(default_factory=dict)
    _meshes: dict = field(default_factory=dict)

    def mesh(self, level: int = 0) -> Mesh:
        if level < 0:
            raise ValueError("refinement level must be non-negative")
        if level not in self._meshes:
            if level == 0:
                self._meshes[0] = self.base_mesh
            else:
                self._meshes[level] = refine(self.mesh(level - 1))
        return self._meshes[level]

    def mesh_for_dx(self, dx: float, max_level: int = 8):
        """Mesh of the hierarchy whose size is closest to ``dx`` (log scale)."""
        best, best_err = 0, np.inf
        for level in range(max_level + 1):
            err = abs(np.log(self.mesh(level).dx / dx))
            if err < best_err:
                best, best_err = level, err
            if self.mesh(level).dx < dx:
                break
        return self.mesh(best), best


# -- Experiment 1: smooth solution on the square -------------------------------

def _exp1_exact() -> ExactSolution:
    def parts(pts):
        x, y = pts[:, 0], pts[:, 1]
        P = (1 - x ** 2) * (1 - y ** 2)
        S = np.sin(np.pi * x) * np.cos(np.pi * y / 2)
        return x, y, P, S

    def value(pts, t):
        _, _, P, S = parts(pts)
        return t * P + (1 - t) * S

    def dt(pts, t):
        _, _, P, S = parts(pts)
        return P - S

    def grad(pts, t):
        x, y, P, S = parts(pts)
        gP = np.stack([-2 * x * (1 - y ** 2), -2 * y * (1 - x ** 2)], axis=1)
        gS = np.stack([np.pi * np.cos(np.pi * x) * np.cos(np.pi * y / 2),
                       -(np.pi / 2) * np.sin(np.pi * x) * np.sin(np.pi * y / 2)],
                      axis=1)
        return t * gP + (1 - t) * gS

    def lap(pts, t):
        x, y, _, S = parts(pts)
        lP = -2 * (1 - y ** 2) - 2 * (1 - x ** 2)
        lS = -(5 * np.pi ** 2 / 4) * S
        return t * lP + (1 - t) * lS

    return ExactSolution(value=value, dt=dt, grad=grad, lap=lap)


def _square_mesh_exp1() -> Mesh:
    base = _template("square_acute.mesh")

    def edge_rule(pa, pb):
        if abs(pa[0] - 1) < _GEOM_TOL and abs(pb[0] - 1) < _GEOM_TOL:
            return TIME_ROBIN
        return DIRICHLET

    def point_rule(p):
        if abs(p[0] - 1) < _GEOM_TOL and min(abs(p[1] - 1), abs(p[1] + 1)) < _GEOM_TOL:
            return DIRICHLET
        return None

    return retag_mesh(base, edge_rule, point_rule)


def experiment1(n_controls: int = 9, splitting: str | None = None) -> Experiment:
    """Rate benchmark: degenerate diffusion, drift, time-Robin right face.

    The control set [0, 1] is sampled uniformly with ``n_controls`` points;
    the data terms make every control a maximiser, so the sample density
    does not change the solution.
    """
    if n_controls < 1:
        raise ValueError("need at least one control")
    controls = tuple(np.linspace(0.0, 1.0, n_controls)) if n_controls > 1 else (0.0,)
    exact = _exp1_exact()
    coeffs = CoefficientSet(
        controls=controls, T=1.0,
        a=lambda al, p: al + 0.5 * (p[:, 0] ** 2 + p[:, 1] ** 2),
        b=lambda al, p: np.stack([-p[:, 0], np.zeros(len(p))], axis=1),
        b_bnd=lambda al, p: np.tile([-al, 0.0], (len(p), 1)),
        name="experiment1")
    problem = manufactured_problem(exact, coeffs)
    if splitting == "imex":
        spl = SplittingSpec(boundary_t=EXPLICIT)
    else:
        spl = SplittingSpec.fully_implicit()
    return Experiment(name="experiment1", problem=problem, splitting=spl,
                      base_mesh=_square_mesh_exp1(), exact=exact)


# -- the notched domain ---------------------------------------------------------

def _on_lower_diag(p) -> bool:
    return abs(p[0] - p[1] - LOWER_DIAG) < _GEOM_TOL and p[1] < EXIT_Y[0] + _GEOM_TOL


def _on_upper_diag(p) -> bool:
    return abs(p[0] + p[1] - UPPER_DIAG) < _GEOM_TOL and p[1] > EXIT_Y[1] - _GEOM_TOL


def _on_exit(p, strict: bool = False) -> bool:
    pad = _GEOM_TOL if strict else -_GEOM_TOL
    return (abs(p[0] - EXIT_X) < _GEOM_TOL
            and EXIT_Y[0] + pad < p[1] < EXIT_Y[1] - pad)


def _notched_mesh(robin_face: str) -> Mesh:
    """Tag the notched template: ``robin_face`` is 'lower' or 'upper'."""
    base = _template("notched_acute.mesh")
    want_lower = robin_face == "lower"

    def edge_rule(pa, pb):
        mid = 0.5 * (np.asarray(pa) + np.asarray(pb))
        if want_lower and _on_lower_diag(mid):
            return ROBIN
        if not want_lower and _on_upper_diag(mid):
            return ROBIN
        return DIRICHLET

    def point_rule(p):
        # junction vertices between the Robin face and the Dirichlet faces:
        # the inner junction carries the penalty datum, the outer one joins
        # the outer boundary because the transport direction exits the
        # domain there.
        if want_lower:
            inner, outer = (EXIT_X, EXIT_Y[0]), (LOWER_DIAG, 0.0)
        else:
            inner, outer = (EXIT_X, EXIT_Y[1]), (LOWER_DIAG, 1.0)
        if np.hypot(p[0] - inner[0], p[1] - inner[1]) < _GEOM_TOL:
            return DIRICHLET
        if np.hypot(p[0] - outer[0], p[1] - outer[1]) < _GEOM_TOL:
            return DIRICHLET
        return None

    return retag_mesh(base, edge_rule, point_rule)


def _notched_data():
    def v_T(pts):
        out = np.full(len(pts), PENALTY_VALUE)
        on_exit = np.array([_on_exit(p, strict=True) for p in pts])
        out[on_exit] = 0.0
        return out

    return v_T


def _paper_splitting() -> SplittingSpec:
    return SplittingSpec(diffusion=OFFLOAD, advection=EXPLICIT)


def _drift(al, p, barrier: bool):
    b = np.tile([-2.0 * al, 2.0 * (al - 1.0)], (len(p), 1))
    if barrier:
        inside = np.abs(p[:, 0] - BARRIER_CENTRE) <= BARRIER_HALFWIDTH
        b[inside, 0] = 0.0
    return b


def experiment2(barrier: bool = False, boundary_controls=None,
                splitting: str | None = None, name: str = "experiment2") -> Experiment:
    """Skorokhod reflection on the lower 45-degree face, exit segment at cost 0.

    ``barrier`` switches off the horizontal drift in the strip around
    x = 3/8; ``boundary_controls`` optionally maps each control to its own
    reflection direction (the nonlinear boundary condition variant).
    """
    v_T = _notched_data()
    if boundary_controls is None:
        b_bnd = lambda al, p: np.tile([1.0, -1.0], (len(p), 1))
    else:
        b_bnd = lambda al, p: np.tile(boundary_controls[al], (len(p), 1))
    problem = ControlProblem(
        controls=(0.0, 1.0), T=1.0,
        a=lambda al, p: 0.1 * (1 - p[:, 1]) * al,
        b=lambda al, p: _drift(al, p, barrier),
        b_bnd=b_bnd,
        g_dir=v_T, v_T=v_T,
        name=name)
    spl = SplittingSpec.fully_implicit() if splitting == "implicit" else _paper_splitting()
    return Experiment(name=name, problem=problem, splitting=spl,
                      base_mesh=_notched_mesh("lower"),
                      notes={"geometry": "reconstructed"})


def experiment3a(splitting: str | None = None) -> Experiment:
    """Internal barrier strip: no rightward transport inside |x - 3/8| <= 1/20."""
    exp = experiment2(barrier=True, splitting=splitting, name="experiment3a")
    return exp


def experiment3b(splitting: str | None = None) -> Experiment:
    """Nonlinear boundary condition: choice of reflection directions on the face."""
    return experiment2(barrier=True,
                       boundary_controls={0.0: (1.0, -1.0), 1.0: (-1.0, -1.0)},
                       splitting=splitting, name="experiment3b")


def experiment4(splitting: str | None = None) -> Experiment:
    """Reflection versus termination at an oscillatory cost on the upper face."""
    v_T = _notched_data()

    def g_bnd(al, p, t, region):
        return -10.0 * np.cos(160.0 * p[:, 0] / np.pi + 4.0) * (1.0 - al)

    problem = ControlProblem(
        controls=(0.0, 1.0), T=1.0,
        a=lambda al, p: 0.2 * (1 - p[:, 1]) * (1 - al) + 0.2 * (1 - p[:, 0]) * al,
        b=lambda al, p: _drift(al, p, barrier=False),
        b_bnd=lambda al, p: np.tile([al, al], (len(p), 1)),
        c_bnd=lambda al, p: np.full(len(p), 1.0 - al),
        g_bnd=g_bnd,
        g_dir=v_T, v_T=v_T,
        name="experiment4")
    spl = SplittingSpec.fully_implicit() if splitting == "implicit" else _paper_splitting()
    return Experiment(name="experiment4", problem=problem, splitting=spl,
                      base_mesh=_notched_mesh("upper"),
                      notes={"geometry": "reconstructed"})


# -- textbook benchmark ---------------------------------------------------------

def heat_benchmark() -> Experiment:
    """Pure-Dirichlet heat equation with a separable exact solution."""

    def W(pts):
        return (np.sin(np.pi * (pts[:, 0] + 1) / 2)
                * np.sin(np.pi * (pts[:, 1] + 1) / 2))

    def value(pts, t):
        return np.exp(t - 1.0) * W(pts)

    def grad(pts, t):
        x, y = pts[:, 0], pts[:, 1]
        gx = (np.pi / 2) * np.cos(np.pi * (x + 1) / 2) * np.sin(np.pi * (y + 1) / 2)
        gy = (np.pi / 2) * np.sin(np.pi * (x + 1) / 2) * np.cos(np.pi * (y + 1) / 2)
        return np.exp(t - 1.0) * np.stack([gx, gy], axis=1)

    exact = ExactSolution(
        value=value, dt=value, grad=grad,
        lap=lambda pts, t: -(np.pi ** 2 / 2) * value(pts, t))
    coeffs = CoefficientSet(controls=(0.0,), T=1.0,
                            a=lambda al, p: np.ones(len(p)), name="heat")
    problem = manufactured_problem(exact, coeffs)
    base = retag_mesh(_template("square_acute.mesh"),
                      lambda pa, pb: DIRICHLET)
    return Experiment(name="heat", problem=problem,
                      splitting=SplittingSpec.fully_implicit(),
                      base_mesh=base, exact=exact)


_BUILDERS = {
    "1": lambda **kw: experiment1(**kw),
    "2": lambda **kw: experiment2(**_strip(kw)),
    "3a": lambda **kw: experiment3a(**_strip(kw)),
    "3b": lambda **kw: experiment3b(**_strip(kw)),
    "4": lambda **kw: experiment4(**_strip(kw)),
    "heat": lambda **kw: heat_benchmark(),
}


def _strip(kw):
    kw = dict(kw)
    kw.pop("n_controls", None)
    return kw


def build_experiment(exp_id, n_controls: int | None = None,
                     splitting: str | None = None) -> Experiment:
    """Build one of the predefined experiments.

    ``exp_id`` is 1, 2, '3a', '3b', 4 or 'heat' (a leading 'experiment'
    prefix is accepted).  ``n_controls`` sets the control sample size where
    the control set is an interval; ``splitting`` may force 'implicit' or
    'imex' (the experiment's native scheme).
    """
    key = str(exp_id).lower()
    if key.startswith("experiment"):
        key = key[len("experiment"):]
    if key == "3":
        key = "3a"
    if key not in _BUILDERS:
        raise ValueError(f"unknown experiment {exp_id!r}; "
                         f"choose from {sorted(_BUILDERS)}")
    kwargs = {"splitting": splitting}
    if key == "1":
        kwargs["n_controls"] = n_controls if n_controls else 9
    elif n_controls:
        kwargs["n_controls"] = n_controls
    return _BUILDERS[key](**kwargs)
