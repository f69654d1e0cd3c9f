"""Backward-in-time solve of the discrete Bellman system.

Each time step solves the row-wise maximised system

    max_k ( Ihat[k] v_now + Ehat[k] v_next - Fhat[k] ) = 0   componentwise,

where the hatted operators combine the spatial operators with the time
difference: rows up to the time-dependent block are h*I + Id and h*E - Id,
the remaining (Robin/Dirichlet) rows are h*I, 0 and h*F.  The maximised
system is solved by Howard's algorithm: alternate the row-wise maximising
control selection with a sparse direct solve of the selected linear system.
Ties in the argmax go to the lowest control index.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import diags
from scipy.sparse.linalg import splu

from .assembly import OperatorSet, assemble
from .problem import ControlProblem, SplittingSpec


class SolverError(RuntimeError):
    """Time stepping failed (bad step size, divergence, non-finite values)."""


@dataclass
class StepDiagnostics:
    step: int
    iterations: int
    residuals: list
    converged: bool
    policy: np.ndarray            # per-node argmax control (ties: lowest index)
    warm_policy: np.ndarray = None  # policy of the last linear solve (for warm starts)


@dataclass
class Solution:
    """Time-indexed nodal vectors in scheme node order.

    ``values[k]`` approximates the solution at time ``k*h``;
    ``values[-1]`` is the nodal interpolant of the final datum.
    """

    mesh: object
    h: float
    times: np.ndarray
    values: np.ndarray
    diagnostics: list
    controls: tuple
    metadata: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    def policy_at(self, k: int) -> np.ndarray:
        """Per-node maximising control index at step k (-1 for the datum row)."""
        if k < len(self.diagnostics):
            return self.diagnostics[k].policy
        return np.full(self.mesh.n_nodes, -1, dtype=np.int32)

    def max_howard_iterations(self) -> int:
        return max((d.iterations for d in self.diagnostics), default=0)


class _Stepper:
    """Hatted operators for a fixed h, with a policy-keyed LU cache."""

    def __init__(self, ops: OperatorSet, h: float, lu_cache_size: int = 16):
        if h <= 0:
            raise SolverError(f"time step must be positive, got {h:g}")
        if h > ops.h_max * (1 + 1e-12):
            raise SolverError(
                f"time step {h:g} exceeds the monotone bound h_max = {ops.h_max:g}")
        self.ops = ops
        self.h = h
        mesh = ops.mesh
        self.n = mesh.n_nodes
        self.n_free = mesh.n_free
        mask = np.zeros(self.n)
        mask[:mesh.n_time] = 1.0
        D = diags(mask)
        self.I_hat = [(h * I + D).tocsr() for I in ops.I]
        self.E_hat = [(h * E - D).tocsr() for E in ops.E]
        self._lu = OrderedDict()
        self._lu_size = lu_cache_size

    def f_hat(self, k: int, t: float) -> np.ndarray:
        return self.h * self.ops.rhs(k, t)

    def residual_matrix(self, v_now, v_next, t: float) -> np.ndarray:
        R = np.empty((len(self.I_hat), self.n))
        for k in range(len(self.I_hat)):
            R[k] = self.I_hat[k] @ v_now + self.E_hat[k] @ v_next - self.f_hat(k, t)
        return R

    def residual(self, v_now, v_next, t: float):
        """Componentwise Bellman residual and its per-node argmax control."""
        R = self.residual_matrix(v_now, v_next, t)
        return R.max(axis=0), R.argmax(axis=0).astype(np.int32)

    def _factorise(self, policy: np.ndarray):
        key = policy.tobytes()
        lu = self._lu.get(key)
        if lu is not None:
            self._lu.move_to_end(key)
            return lu
        if len(self.I_hat) == 1:
            M = self.I_hat[0]
        else:
            M = None
            for k in range(len(self.I_hat)):
                sel = diags((policy == k).astype(float))
                part = sel @ self.I_hat[k]
                M = part if M is None else M + part
        lu = splu(M.tocsc())
        self._lu[key] = lu
        if len(self._lu) > self._lu_size:
            self._lu.popitem(last=False)
        return lu

    def solve_policy(self, policy, v_next, t: float) -> np.ndarray:
        if len(self.I_hat) == 1:
            q = self.f_hat(0, t) - self.E_hat[0] @ v_next
        else:
            Q = np.empty((len(self.I_hat), self.n))
            for k in range(len(self.I_hat)):
                Q[k] = self.f_hat(k, t) - self.E_hat[k] @ v_next
            q = Q[policy, np.arange(self.n)]
        v = self._factorise(policy).solve(q)
        v[self.n_free:] = self.ops.g_dirichlet[self.n_free:]
        if not np.all(np.isfinite(v)):
            raise SolverError("non-finite values in the linear solve")
        return v


def bellman_residual(ops: OperatorSet, h: float, v_now, v_next, t: float = 0.0):
    """Per-node residual max_k(Ihat v_now + Ehat v_next - Fhat)_l and argmax.

    Ties break to the lowest control index.
    """
    v_now = np.asarray(v_now, dtype=float)
    v_next = np.asarray(v_next, dtype=float)
    if v_now.shape != (ops.mesh.n_nodes,) or v_next.shape != (ops.mesh.n_nodes,):
        raise ValueError("nodal vectors must have one entry per mesh node")
    return _Stepper(ops, h).residual(v_now, v_next, t)


def howard_step(ops: OperatorSet, h: float, v_next, policy, t: float = 0.0):
    """One policy-evaluation solve: Ihat[policy] v = Fhat[policy] - Ehat[policy] v_next."""
    policy = np.asarray(policy, dtype=np.int32)
    return _Stepper(ops, h).solve_policy(policy, np.asarray(v_next, dtype=float), t)


def howard_solve_timestep(ops: OperatorSet, h: float, v_next, tol: float = 1e-12,
                          max_iter: int = 100, t: float = 0.0,
                          initial_policy=None, _stepper: _Stepper | None = None,
                          _step_index: int = 0):
    """Solve one Bellman time step by Howard's algorithm.

    Starts from ``initial_policy`` (default: the first control everywhere),
    alternates linear solves with row-wise maximising control updates, and
    stops when the sup-norm of the Bellman residual is at most ``tol`` or
    the policy repeats.  Returns the iterate and per-step diagnostics; when
    ``max_iter`` is exhausted the best iterate is returned with
    ``converged=False``.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    st = _stepper if _stepper is not None else _Stepper(ops, h)
    v_next = np.asarray(v_next, dtype=float)
    n = st.n
    if initial_policy is None:
        policy = np.zeros(n, dtype=np.int32)
    else:
        policy = np.asarray(initial_policy, dtype=np.int32).copy()
        if policy.shape != (n,):
            raise ValueError("initial policy must assign a control to every node")
    residuals = []
    best = (np.inf, None, policy, policy)
    converged = False
    iterations = 0
    idx = np.arange(n)
    solved_policy = policy
    argmax = policy
    while iterations < max_iter:
        solved_policy = policy
        v = st.solve_policy(policy, v_next, t)
        iterations += 1
        R = st.residual_matrix(v, v_next, t)
        res = R.max(axis=0)
        argmax = R.argmax(axis=0).astype(np.int32)
        rnorm = float(np.abs(res).max())
        residuals.append(rnorm)
        if rnorm < best[0]:
            best = (rnorm, v, argmax, solved_policy)
        if rnorm <= tol:
            converged = True
            break
        # switch a row's control only on strict improvement; this keeps exact
        # ties (and improvements at round-off level) from thrashing the policy
        current = R[policy, idx]
        switch = res > current + 1e-11 * (1.0 + np.abs(res))
        new_policy = np.where(switch, argmax, policy).astype(np.int32)
        if np.array_equal(new_policy, policy):
            converged = True
            break
        policy = new_policy
    if not converged:
        _, v, argmax, solved_policy = best
    diag = StepDiagnostics(step=_step_index, iterations=iterations,
                           residuals=residuals, converged=converged,
                           policy=argmax, warm_policy=solved_policy)
    return v, diag


def _time_grid(T: float, h: float) -> int:
    K = round(T / h)
    if K < 1 or abs(K * h - T) > 1e-9 * max(1.0, T):
        raise SolverError(f"T/h must be a positive integer (T={T:g}, h={h:g})")
    return K


def solve_parabolic(mesh, problem: ControlProblem, spec: SplittingSpec | None = None,
                    h: float = None, tol: float = 1e-12, *, ops: OperatorSet | None = None,
                    warm_start: bool = True, max_iter: int = 100) -> Solution:
    """Run the backward scheme from the final datum down to t = 0.

    The scheme is initialised with the nodal interpolant of the final datum
    and each step solves the maximised system to ``tol`` by Howard's
    algorithm.  ``warm_start`` seeds each step's policy with the previous
    step's per-node maximiser.
    """
    if ops is None:
        ops = assemble(mesh, problem, spec)
    if h is None:
        raise SolverError("time step h is required")
    K = _time_grid(problem.T, h)
    st = _Stepper(ops, h)
    n = mesh.n_nodes
    values = np.empty((K + 1, n))
    values[K] = problem.v_T(mesh.vertices)
    diagnostics: list = [None] * K
    policy = np.zeros(n, dtype=np.int32)
    for k in range(K - 1, -1, -1):
        init = policy if warm_start else None
        v, diag = howard_solve_timestep(
            ops, h, values[k + 1], tol=tol, max_iter=max_iter, t=k * h,
            initial_policy=init, _stepper=st, _step_index=k)
        if not diag.converged:
            raise SolverError(
                f"Howard iteration did not converge at step {k} "
                f"(residual {diag.residuals[-1]:.3e} after {diag.iterations} iterations)")
        values[k] = v
        diagnostics[k] = diag
        policy = diag.warm_policy
    times = np.arange(K + 1) * h
    meta = dict(ops.metadata)
    meta.update({"h": h, "tol": tol, "warm_start": warm_start,
                 "problem": problem.name,
                 "max_howard_iterations": max(d.iterations for d in diagnostics)})
    return Solution(mesh=mesh, h=h, times=times, values=values,
                    diagnostics=diagnostics, controls=ops.controls, metadata=meta)


def solve_fixed_policy(mesh, problem: ControlProblem, spec: SplittingSpec | None = None,
                       h: float = None, alpha=None, tol: float = 1e-12, *,
                       ops: OperatorSet | None = None) -> Solution:
    """Solve the linear evolution problem for one fixed control."""
    if ops is None:
        ops = assemble(mesh, problem, spec)
    try:
        index = ops.controls.index(alpha)
    except ValueError:
        raise SolverError(f"control {alpha!r} is not in the sample {ops.controls}") from None
    sol = solve_parabolic(mesh, problem, spec, h, tol, ops=ops.restricted(index),
                          warm_start=False)
    sol.metadata["fixed_control"] = alpha
    return sol


def write_solution_csv(sol: Solution, path, k: int | None = None) -> None:
    """Write one time step as CSV with columns node,x,y,v,alpha_hat.

    ``k`` defaults to 0 (the t = 0 slice).  For the final-datum step the
    control column is -1 (no Bellman selection happens there).
    """
    k = 0 if k is None else k
    pol = sol.policy_at(k)
    xy = sol.mesh.vertices
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("node,x,y,v,alpha_hat\n")
        for i in range(sol.mesh.n_nodes):
            fh.write(f"{i},{float(xy[i, 0])!r},{float(xy[i, 1])!r},"
                     f"{float(sol.values[k, i])!r},{int(pol[i])}\n")
