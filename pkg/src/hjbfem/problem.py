"""Continuous control problems: coefficient fields, data terms, splittings.

A :class:`ControlProblem` carries a finite sample of the control set and,
for every control, the interior operator coefficients and boundary operator
coefficients as vectorised callables.  Interior and boundary operators have
the convention

    L      w = -a * lap(w) - b . grad(w) + c * w          (on the domain)
    L_bnd  w = -b_bnd . grad(w) + c_bnd * w               (on the boundary)

All spatial callables take an (n, 2) array of points; data terms addition-
ally take the time.  The operator coefficients themselves are static in
time (the assembled matrices are reused across time steps); only the data
terms f, g_bnd may depend on t.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import Mesh, TIME_ROBIN, ROBIN, DIRICHLET, ConeError, find_dini_stencil

IMPLICIT = "implicit"
EXPLICIT = "explicit"
OFFLOAD = "offload"


def zero_scalar(alpha, pts, *args):
    return np.zeros(len(pts))


def zero_vector(alpha, pts, *args):
    return np.zeros((len(pts), 2))


@dataclass
class ExactSolution:
    """A space-time field with the derivatives needed to manufacture data.

    Each callable takes ``(pts, t)`` with ``pts`` of shape (n, 2).
    """

    value: callable
    dt: callable
    grad: callable
    lap: callable


@dataclass
class ControlProblem:
    """Final-time HJB problem over a finite control sample."""

    controls: tuple
    T: float
    a: callable = zero_scalar
    b: callable = zero_vector
    c: callable = zero_scalar
    f: callable = None                     # f(alpha, pts, t)
    b_bnd: callable = zero_vector
    c_bnd: callable = zero_scalar
    g_bnd: callable = None                 # g_bnd(alpha, pts, t, region)
    g_dir: callable = None                 # g_dir(pts)
    v_T: callable = None                   # v_T(pts)
    time_dependent: bool = False
    name: str = "custom"
    exact: ExactSolution | None = None

    def __post_init__(self):
        if self.f is None:
            self.f = lambda alpha, pts, t: np.zeros(len(pts))
        if self.g_bnd is None:
            self.g_bnd = lambda alpha, pts, t, region: np.zeros(len(pts))
        if self.g_dir is None:
            self.g_dir = lambda pts: np.zeros(len(pts))
        if self.v_T is None:
            self.v_T = lambda pts: np.zeros(len(pts))
        self.controls = tuple(self.controls)
        if not self.controls:
            raise ValueError("control sample must be non-empty")
        if not self.T > 0:
            raise ValueError("horizon T must be positive")


@dataclass
class SplittingSpec:
    """Explicit/implicit routing of the operator terms.

    Every coefficient is sent whole to one side, so explicit + implicit
    parts sum to the true coefficients exactly at every point.  The
    second-order term additionally supports ``offload``: the explicit side
    receives exactly the explicit artificial diffusion and the implicit
    side the remainder ``max(a - nu, 0)``; combined with explicit advection
    this reproduces the splitting used in the boundary-control experiments.

    The Robin region is always discretised implicitly.  ``robin_floor``
    scales a reaction term of size ``robin_floor * dx`` added to the
    implicit boundary reaction on Robin rows; it keeps those rows strictly
    diagonally dominant even when c_bnd vanishes and disappears under mesh
    refinement.
    """

    diffusion: str = IMPLICIT
    advection: str = IMPLICIT
    reaction: str = IMPLICIT
    boundary_t: str = IMPLICIT
    robin_floor: float = 1.0

    def __post_init__(self):
        if self.diffusion not in (IMPLICIT, EXPLICIT, OFFLOAD):
            raise ValueError(f"diffusion must be implicit/explicit/offload, got {self.diffusion!r}")
        for name in ("advection", "reaction", "boundary_t"):
            v = getattr(self, name)
            if v not in (IMPLICIT, EXPLICIT):
                raise ValueError(f"{name} must be implicit or explicit, got {v!r}")
        if self.robin_floor < 0:
            raise ValueError("robin_floor must be non-negative")

    @classmethod
    def fully_implicit(cls, robin_floor: float = 1.0) -> "SplittingSpec":
        return cls(robin_floor=robin_floor)

    @property
    def is_fully_implicit(self) -> bool:
        return (self.diffusion == IMPLICIT and self.advection == IMPLICIT
                and self.reaction == IMPLICIT and self.boundary_t == IMPLICIT)

    def describe(self) -> str:
        return (f"diffusion={self.diffusion},advection={self.advection},"
                f"reaction={self.reaction},boundary_t={self.boundary_t},"
                f"robin_floor={self.robin_floor:g}")


@dataclass
class ValidationReport:
    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.errors

    @property
    def sign_ok(self) -> bool:
        return not any(code.startswith("sign") for code, _ in self.warnings)

    def __str__(self):
        lines = [f"validation: {'PASS' if self.passed else 'FAIL'}"
                 f" ({len(self.errors)} errors, {len(self.warnings)} warnings)"]
        lines += [f"  ERROR[{c}] {m}" for c, m in self.errors]
        lines += [f"  warn [{c}] {m}" for c, m in self.warnings]
        return "\n".join(lines)


def validate_problem(problem: ControlProblem, spec: SplittingSpec, mesh: Mesh,
                     n_time_samples: int = 3) -> ValidationReport:
    """Check the structural and sign assumptions of the scheme on a mesh.

    Violations that break the monotone structure of the discrete operators
    (negative diffusion, negative reaction coefficients, boundary drift
    outside the tangent cone, missing strict Robin reaction, final datum not
    matching the Dirichlet datum) are errors.  Violations of the data sign
    conditions (v_T, g, g_bnd >= 0) only affect the non-negativity of the
    solution, not the solvability of the scheme, and are reported as
    warnings.
    """
    rep = ValidationReport()
    pts = mesh.vertices
    reg = mesh.node_region
    times = np.linspace(0.0, problem.T, n_time_samples)

    def _eval(fn, *args, what=""):
        try:
            return np.asarray(fn(*args))
        except ConeError:
            raise
        except Exception as ex:  # propagate with location per contract
            raise RuntimeError(f"evaluation of {what} failed: {ex}") from ex

    for alpha in problem.controls:
        a = _eval(problem.a, alpha, pts, what=f"a[{alpha}]")
        if np.any(a < 0):
            k = int(np.argmin(a))
            rep.errors.append(("ellipticity",
                               f"a({alpha}) = {a[k]:g} < 0 at node {k} {tuple(pts[k])}"))
        c = _eval(problem.c, alpha, pts, what=f"c[{alpha}]")
        if np.any(c < 0):
            k = int(np.argmin(c))
            rep.errors.append(("reaction-sign",
                               f"c({alpha}) = {c[k]:g} < 0 at node {k}"))
        cb = _eval(problem.c_bnd, alpha, pts, what=f"c_bnd[{alpha}]")
        bnd = reg != 0
        if np.any(cb[bnd] < 0):
            k = int(np.flatnonzero(bnd)[np.argmin(cb[bnd])])
            rep.errors.append(("reaction-sign",
                               f"c_bnd({alpha}) = {cb[k]:g} < 0 at node {k}"))

    # tangent cone and Robin reaction on the Robin-type nodes
    robin_nodes = np.flatnonzero((reg == TIME_ROBIN) | (reg == ROBIN))
    for alpha in problem.controls:
        if len(robin_nodes):
            bb = _eval(problem.b_bnd, alpha, pts[robin_nodes], what=f"b_bnd[{alpha}]")
            cb = _eval(problem.c_bnd, alpha, pts[robin_nodes], what=f"c_bnd[{alpha}]")
            for i, node in enumerate(robin_nodes):
                direction = bb[i]
                if np.linalg.norm(direction) > 0:
                    try:
                        find_dini_stencil(mesh, int(node), direction)
                    except ConeError:
                        rep.errors.append((
                            "cone", f"b_bnd({alpha}) = {tuple(direction)} leaves the domain "
                            f"at node {node} {tuple(pts[node])}"))
                if reg[node] == ROBIN:
                    if cb[i] + spec.robin_floor * mesh.dx <= 0:
                        rep.errors.append((
                            "robin-reaction",
                            f"implicit boundary reaction not positive at Robin node {node} "
                            f"(c_bnd({alpha})={cb[i]:g}, floor={spec.robin_floor * mesh.dx:g})"))

    # final datum must satisfy the Dirichlet condition
    vT = _eval(problem.v_T, pts, what="v_T")
    gD = _eval(problem.g_dir, pts, what="g")
    dir_nodes = reg == DIRICHLET
    if np.any(np.abs(vT[dir_nodes] - gD[dir_nodes]) > 1e-10 * max(1.0, np.abs(vT).max())):
        k = int(np.flatnonzero(dir_nodes)[np.argmax(np.abs(vT[dir_nodes] - gD[dir_nodes]))])
        rep.errors.append(("final-datum",
                           f"v_T != g on the Dirichlet boundary (node {k}: "
                           f"{vT[k]:g} vs {gD[k]:g})"))

    # sign conditions on the data (warnings: they gate non-negativity only)
    if np.any(vT < 0):
        rep.warnings.append(("sign-vT", f"v_T < 0 somewhere (min {vT.min():g})"))
    if np.any(gD[dir_nodes] < 0):
        rep.warnings.append(("sign-g", f"g < 0 on the Dirichlet boundary (min {gD[dir_nodes].min():g})"))
    if len(robin_nodes):
        for alpha in problem.controls:
            for t in times:
                for region in (TIME_ROBIN, ROBIN):
                    sel = robin_nodes[reg[robin_nodes] == region]
                    if not len(sel):
                        continue
                    gb = _eval(problem.g_bnd, alpha, pts[sel], t, region,
                               what=f"g_bnd[{alpha}]")
                    if np.any(gb < -1e-14):
                        rep.warnings.append((
                            "sign-gbnd",
                            f"g_bnd({alpha}, t={t:g}) < 0 on region {region} "
                            f"(min {gb.min():g})"))
                        break
    return rep


@dataclass
class CoefficientSet:
    """Operator coefficients used to manufacture data for a known solution."""

    controls: tuple
    T: float
    a: callable = zero_scalar
    b: callable = zero_vector
    c: callable = zero_scalar
    b_bnd: callable = zero_vector
    c_bnd: callable = zero_scalar
    name: str = "manufactured"


def manufactured_problem(exact: ExactSolution, coeffs: CoefficientSet) -> ControlProblem:
    """Build data terms so that ``exact`` solves the problem for every control.

    The source is f = -dt(v) + L v and the boundary datum
    g_bnd = -dt(v) + L_bnd v on the time-Robin region (without the time
    derivative on the Robin region), evaluated along the exact solution, so
    each control attains the pointwise supremum and the residual vanishes
    identically.
    """

    def f(alpha, pts, t):
        return (-exact.dt(pts, t)
                - coeffs.a(alpha, pts) * exact.lap(pts, t)
                - np.einsum("nd,nd->n", coeffs.b(alpha, pts), exact.grad(pts, t))
                + coeffs.c(alpha, pts) * exact.value(pts, t))

    def g_bnd(alpha, pts, t, region):
        out = (-np.einsum("nd,nd->n", coeffs.b_bnd(alpha, pts), exact.grad(pts, t))
               + coeffs.c_bnd(alpha, pts) * exact.value(pts, t))
        if region == TIME_ROBIN:
            out = out - exact.dt(pts, t)
        return out

    return ControlProblem(
        controls=coeffs.controls, T=coeffs.T,
        a=coeffs.a, b=coeffs.b, c=coeffs.c, f=f,
        b_bnd=coeffs.b_bnd, c_bnd=coeffs.c_bnd, g_bnd=g_bnd,
        g_dir=lambda pts: exact.value(pts, 0.0),
        v_T=lambda pts: exact.value(pts, coeffs.T),
        time_dependent=True, name=coeffs.name, exact=exact)


def continuous_residual(problem: ControlProblem, exact: ExactSolution,
                        pts, t: float, region: int = 0) -> np.ndarray:
    """Pointwise residual of the continuous equations at the exact solution.

    ``region`` selects which equation: interior (0), time-Robin or Robin.
    """
    pts = np.asarray(pts, dtype=float)
    vals = []
    for alpha in problem.controls:
        if region == 0:
            lv = (-problem.a(alpha, pts) * exact.lap(pts, t)
                  - np.einsum("nd,nd->n", problem.b(alpha, pts), exact.grad(pts, t))
                  + problem.c(alpha, pts) * exact.value(pts, t))
            vals.append(lv - problem.f(alpha, pts, t))
        else:
            lv = (-np.einsum("nd,nd->n", problem.b_bnd(alpha, pts), exact.grad(pts, t))
                  + problem.c_bnd(alpha, pts) * exact.value(pts, t))
            vals.append(lv - problem.g_bnd(alpha, pts, t, region))
    sup = np.max(vals, axis=0)
    if region in (0, TIME_ROBIN):
        sup = sup - exact.dt(pts, t)
    return sup
