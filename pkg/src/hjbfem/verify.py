"""Verification tools: monotonicity certificates, error norms, convergence
studies, and an exhaustive policy-enumeration oracle for tiny instances."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .assembly import OperatorSet, QUAD_BARY, QUAD_W
from .mesh import Mesh
from .problem import ExactSolution
from .solver import solve_parabolic


class OracleError(RuntimeError):
    """Policy-enumeration oracle failed its own residual certificate."""


@dataclass
class MonotonicityReport:
    """Sign-structure certificate of the hatted operators at a given h.

    Row-switched matrices inherit each row from one control, so checking
    every control's rows covers every admissible policy selection.
    """

    ok: bool
    h: float
    violations: list
    min_slack_E: float          # min of -entries of hE - Id over live rows
    min_offdiag_slack_I: float  # min of -offdiag of hI + Id
    min_rowsum_I: float         # min row sum of hatted I over all rows
    min_strict_rowsum: float    # min row sum over Robin+Dirichlet rows

    def __str__(self):
        s = "PASS" if self.ok else f"FAIL ({len(self.violations)} violations)"
        return (f"monotonicity at h={self.h:g}: {s}; slacks: "
                f"E<=0: {self.min_slack_E:.3e}, I offdiag<=0: "
                f"{self.min_offdiag_slack_I:.3e}, I rowsum>=0: {self.min_rowsum_I:.3e}, "
                f"strict rows: {self.min_strict_rowsum:.3e}")


def check_monotone_structure(ops: OperatorSet, h: float,
                             tol: float = 1e-11) -> MonotonicityReport:
    """Verify the monotone sign pattern of the hatted operators.

    Checks, for every control: all entries of hE - Id non-positive on the
    time-dependent block (E vanishes beyond it); all off-diagonal entries
    of hI + Id non-positive; row sums of the hatted implicit operator
    non-negative, strictly positive on the Robin and Dirichlet rows.
    """
    mesh = ops.mesh
    n, n_t, n_free = mesh.n_nodes, mesh.n_time, mesh.n_free
    violations = []
    slack_E = np.inf
    slack_I_off = np.inf
    min_rowsum = np.inf
    min_strict = np.inf
    mask = np.zeros(n)
    mask[:n_t] = 1.0
    for k, alpha in enumerate(ops.controls):
        Ehat = (h * ops.E[k]).tolil()
        Ehat.setdiag(Ehat.diagonal() - mask)
        coo = Ehat.tocoo()
        scale = max(1.0, np.abs(coo.data).max(initial=0.0))
        if len(coo.data):
            worst = float(coo.data.max())
            slack_E = min(slack_E, -worst)
            if worst > tol * scale:
                i = int(np.argmax(coo.data))
                violations.append(("E-positive", alpha, int(coo.row[i]),
                                   int(coo.col[i]), worst))
        Ihat = (h * ops.I[k]).tolil()
        Ihat.setdiag(Ihat.diagonal() + mask)
        coo = Ihat.tocoo()
        scale = max(1.0, np.abs(coo.data).max(initial=0.0))
        off = coo.row != coo.col
        if off.any():
            worst = float(coo.data[off].max())
            slack_I_off = min(slack_I_off, -worst)
            if worst > tol * scale:
                j = np.flatnonzero(off)[int(np.argmax(coo.data[off]))]
                violations.append(("I-offdiag-positive", alpha,
                                   int(coo.row[j]), int(coo.col[j]), worst))
        rowsum = np.asarray(Ihat.tocsr().sum(axis=1)).ravel()
        min_rowsum = min(min_rowsum, float(rowsum.min()))
        if rowsum.min() < -tol * scale:
            i = int(np.argmin(rowsum))
            violations.append(("I-rowsum-negative", alpha, i, None, float(rowsum[i])))
        strict_rows = rowsum[n_t:]
        if len(strict_rows):
            min_strict = min(min_strict, float(strict_rows.min()))
            if strict_rows.min() <= tol * scale:
                i = n_t + int(np.argmin(strict_rows))
                violations.append(("I-not-strictly-dominant", alpha, i, None,
                                   float(rowsum[i])))
    return MonotonicityReport(ok=not violations, h=h, violations=violations,
                              min_slack_E=slack_E, min_offdiag_slack_I=slack_I_off,
                              min_rowsum_I=min_rowsum, min_strict_rowsum=min_strict)


@dataclass
class ErrorNorms:
    linf: float
    l2: float
    h1: float
    h1_semi: float


def error_norms(mesh: Mesh, values: np.ndarray, exact: ExactSolution,
                t: float = 0.0) -> ErrorNorms:
    """Discrete errors of a nodal P1 field against an exact field.

    Nodal max for the sup norm; element-wise degree-4 quadrature for the L2
    and H1 norms (the H1 value is the full norm; the seminorm is reported
    separately).
    """
    values = np.asarray(values, dtype=float)
    nodes = mesh.vertices
    linf = float(np.abs(values - exact.value(nodes, t)).max())
    tri = nodes[mesh.elements]
    qpts = np.einsum("qi,eid->eqd", QUAD_BARY, tri)
    flat = qpts.reshape(-1, 2)
    v_at_q = np.einsum("qi,ei->eq", QUAD_BARY, values[mesh.elements])
    ex_at_q = np.asarray(exact.value(flat, t)).reshape(v_at_q.shape)
    diff2 = (v_at_q - ex_at_q) ** 2
    l2sq = float(np.einsum("q,eq,e->", QUAD_W, diff2, mesh.area))
    grad_h = np.einsum("ei,eid->ed", values[mesh.elements], mesh.grads)
    ex_grad = np.asarray(exact.grad(flat, t)).reshape(len(mesh.elements), 6, 2)
    gdiff2 = ((grad_h[:, None, :] - ex_grad) ** 2).sum(axis=2)
    semisq = float(np.einsum("q,eq,e->", QUAD_W, gdiff2, mesh.area))
    return ErrorNorms(linf=linf, l2=np.sqrt(l2sq),
                      h1=np.sqrt(l2sq + semisq), h1_semi=np.sqrt(semisq))


@dataclass
class LevelResult:
    level: int
    dx: float
    h: float
    errors: ErrorNorms
    max_howard_iterations: int


@dataclass
class ErrorReport:
    """Per-level errors at t = 0 and pairwise rates for mesh halving."""

    problem: str
    rows: list = field(default_factory=list)

    def rates(self, norm: str) -> list:
        es = [getattr(r.errors, norm) for r in self.rows]
        out = []
        for i in range(len(es) - 1):
            out.append(float(np.log2(es[i] / es[i + 1])))
        return out

    def write_csv(self, path) -> None:
        rl, r2, rh = (self.rates(k) for k in ("linf", "l2", "h1"))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("dx,h,Linf,L2,H1,rate_Linf,rate_L2,rate_H1,H1semi\n")
            for i, row in enumerate(self.rows):
                rates = (f"{rl[i]!r},{r2[i]!r},{rh[i]!r}" if i < len(rl) else ",,")
                fh.write(f"{row.dx!r},{row.h!r},{row.errors.linf!r},"
                         f"{row.errors.l2!r},{row.errors.h1!r},{rates},"
                         f"{row.errors.h1_semi!r}\n")

    def __str__(self):
        lines = [f"convergence of {self.problem}:",
                 f"{'dx':>10} {'h':>10} {'Linf':>11} {'L2':>11} {'H1':>11}"
                 f" {'rLinf':>6} {'rL2':>6} {'rH1':>6}"]
        rl, r2, rh = (self.rates(k) for k in ("linf", "l2", "h1"))
        for i, row in enumerate(self.rows):
            r = (f" {rl[i]:6.2f} {r2[i]:6.2f} {rh[i]:6.2f}" if i < len(rl) else "")
            lines.append(f"{row.dx:10.4f} {row.h:10.4f} {row.errors.linf:11.4e} "
                         f"{row.errors.l2:11.4e} {row.errors.h1:11.4e}{r}")
        return "\n".join(lines)


def convergence_study(experiment, levels: int, h0: float = None,
                      tol: float = 1e-12, csv_path=None) -> ErrorReport:
    """Solve an experiment on a hierarchy of halved meshes and report rates.

    The time step is coupled to the coarsest mesh size as h0 =
    T / ceil(T / dx0) (so T/h is an integer) and halves with the mesh.
    """
    if experiment.exact is None:
        raise ValueError(f"experiment {experiment.name!r} has no exact solution")
    report = ErrorReport(problem=experiment.name)
    T = experiment.problem.T
    for level in range(levels):
        mesh = experiment.mesh(level)
        if h0 is None:
            h0 = T / np.ceil(T / mesh.dx)
        h = h0 / 2 ** level
        if h > T:
            h = T
        sol = solve_parabolic(mesh, experiment.problem, experiment.splitting,
                              h, tol=tol)
        errs = error_norms(mesh, sol.values[0], experiment.exact, t=0.0)
        report.rows.append(LevelResult(
            level=level, dx=mesh.dx, h=h, errors=errs,
            max_howard_iterations=sol.max_howard_iterations()))
    if csv_path is not None:
        report.write_csv(csv_path)
    return report


def oracle_policy_enumeration(ops: OperatorSet, h: float, v_next,
                              t: float = 0.0, tol: float = 1e-10) -> np.ndarray:
    """Solve one Bellman time step by exhaustive policy enumeration.

    Solves the hatted linear system densely for every stationary policy
    over the non-Dirichlet nodes and returns the componentwise minimum,
    which solves the maximised system: the solution is a policy solution,
    and inverse positivity makes it a lower bound for all of them.  The
    result's Bellman residual is certified to be at most ``tol``; a larger
    residual indicates a monotonicity violation in the inputs.
    """
    mesh = ops.mesh
    n, n_free = mesh.n_nodes, mesh.n_free
    m = len(ops.controls)
    if n_free > 6 or m > 3:
        raise OracleError(f"instance too large for enumeration "
                          f"({n_free} non-Dirichlet nodes, {m} controls)")
    v_next = np.asarray(v_next, dtype=float)
    mask = np.zeros(n)
    mask[:mesh.n_time] = 1.0
    I_hat = [h * ops.I[k].toarray() + np.diag(mask) for k in range(m)]
    E_hat = [h * ops.E[k].toarray() - np.diag(mask) for k in range(m)]
    F_hat = [h * ops.rhs(k, t) for k in range(m)]
    best = None
    for pol in itertools.product(range(m), repeat=n_free):
        M = np.vstack([I_hat[pol[i]][i] for i in range(n_free)]
                      + [I_hat[0][n_free:]])
        q = np.concatenate([
            np.array([F_hat[pol[i]][i] - E_hat[pol[i]][i] @ v_next
                      for i in range(n_free)]),
            F_hat[0][n_free:] - E_hat[0][n_free:] @ v_next])
        w = np.linalg.solve(M, q)
        best = w if best is None else np.minimum(best, w)
    residual = np.max(
        [I_hat[k] @ best + E_hat[k] @ v_next - F_hat[k] for k in range(m)], axis=0)
    if np.abs(residual).max() > tol:
        raise OracleError(
            f"policy minimum violates the Bellman equation "
            f"(residual {np.abs(residual).max():.3e} > {tol:g}); "
            "inputs are likely not monotone")
    return best
