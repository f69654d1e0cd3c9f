"""Assembly of the per-control discrete operators.

For every control the scheme needs an explicit matrix E, an implicit matrix
I and a data vector F.  Interior rows are weighted-residual rows against
the L1-normalised hat functions, with the second-order coefficient frozen
at the row node and raised to at least the artificial diffusion level that
makes all off-diagonal entries non-positive on a strictly acute mesh.
Robin-type boundary rows are exact lower Dini difference quotients plus a
reaction term; Dirichlet rows implement nodal interpolation of the datum.

Assembled operators are immutable; assembly is deterministic.
"""
from __future__ import annotations

import os
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix

from .mesh import Mesh, TIME_ROBIN, ROBIN, dini_stencil_weights
from .problem import (ControlProblem, SplittingSpec, validate_problem,
                      IMPLICIT, EXPLICIT)

# 6-point, degree-4 Gauss rule on the reference triangle (barycentric).
_A1, _W1 = 0.445948490915965, 0.223381589678011
_A2, _W2 = 0.091576213509771, 0.109951743655322
QUAD_BARY = np.array([
    [1 - 2 * _A1, _A1, _A1], [_A1, 1 - 2 * _A1, _A1], [_A1, _A1, 1 - 2 * _A1],
    [1 - 2 * _A2, _A2, _A2], [_A2, 1 - 2 * _A2, _A2], [_A2, _A2, 1 - 2 * _A2],
])
QUAD_W = np.array([_W1, _W1, _W1, _W2, _W2, _W2])

_SIGN_TOL = 1e-11


class AssemblyError(RuntimeError):
    """Assembly preconditions violated (validation, acuteness, sign structure)."""


def quadrature_points(mesh: Mesh) -> np.ndarray:
    """Physical coordinates of the quadrature points, shape (ne, 6, 2)."""
    tri = mesh.vertices[mesh.elements]          # (ne, 3, 2)
    return np.einsum("qi,eid->eqd", QUAD_BARY, tri)


def artificial_diffusion(mesh: Mesh, sin_theta: float, b_field, c_field,
                         controls) -> np.ndarray:
    """Quasi-optimal artificial diffusion per (control, node).

    For every interior node and adjacent element the returned value nu
    satisfies  |b|_K + dx_K*||c||_K  <=  nu * sin(theta) * |grad(hat)|_K * vol(K),
    with equality for the binding element, so nu is the smallest admissible
    choice and scales like the local mesh size.  The coefficient norms are
    evaluated at element vertices.
    """
    if sin_theta <= 0:
        raise AssemblyError("artificial diffusion requires a strictly acute mesh "
                            "(sin(theta) > 0)")
    elems = mesh.elements
    tri = mesh.vertices[elems]                   # (ne, 3, 2)
    flat = tri.reshape(-1, 2)
    n = mesh.n_nodes
    out = np.zeros((len(controls), n))
    grad_norm = np.linalg.norm(mesh.grads, axis=2)           # (ne, 3)
    l1 = mesh.hat_l1[elems]                                   # (ne, 3)
    denom = sin_theta * (grad_norm / l1) * mesh.area[:, None]  # per (elem, local node)
    for k, alpha in enumerate(controls):
        bv = np.asarray(b_field(alpha, flat)).reshape(len(elems), 3, 2)
        cv = np.abs(np.asarray(c_field(alpha, flat))).reshape(len(elems), 3)
        b_norm = np.linalg.norm(np.abs(bv).max(axis=1), axis=1)   # |b|_K
        c_norm = cv.max(axis=1)
        num = b_norm + mesh.diam * c_norm
        quo = num[:, None] / denom                                # (ne, 3)
        np.maximum.at(out[k], elems.ravel(), quo.ravel())
    out[:, mesh.n_interior:] = 0.0
    return out


@dataclass
class OperatorSet:
    """Per-control sparse operators E, I plus the data-vector evaluator."""

    mesh: Mesh
    problem: ControlProblem
    splitting: SplittingSpec
    controls: tuple
    E: list
    I: list
    nu_exp: np.ndarray
    nu_imp: np.ndarray
    a_exp: np.ndarray
    a_imp: np.ndarray
    sin_theta: float
    h_max: float
    g_dirichlet: np.ndarray
    metadata: dict = field(default_factory=dict)
    _quad_op: csr_matrix = None
    _quad_pts: np.ndarray = None
    _rhs_cache: OrderedDict = field(default_factory=OrderedDict)

    @property
    def n_controls(self) -> int:
        return len(self.controls)

    def rhs(self, k: int, t: float = 0.0) -> np.ndarray:
        """Data vector F for control index ``k`` at time ``t``."""
        key = (k, None if not self.problem.time_dependent else float(t))
        cached = self._rhs_cache.get(key)
        if cached is not None:
            self._rhs_cache.move_to_end(key)
            return cached
        mesh, problem = self.mesh, self.problem
        alpha = self.controls[k]
        F = np.zeros(mesh.n_nodes)
        F += self._quad_op @ np.asarray(
            problem.f(alpha, self._quad_pts, t))
        reg = mesh.node_region
        for region in (TIME_ROBIN, ROBIN):
            sel = np.flatnonzero(reg == region)
            if len(sel):
                F[sel] = problem.g_bnd(alpha, mesh.vertices[sel], t, region)
        F[mesh.n_free:] = self.g_dirichlet[mesh.n_free:]
        F.flags.writeable = False
        self._rhs_cache[key] = F
        if len(self._rhs_cache) > 16:
            self._rhs_cache.popitem(last=False)
        return F

    def restricted(self, k: int) -> "OperatorSet":
        """View of this operator set with the single control of index ``k``."""
        return OperatorSet(
            mesh=self.mesh, problem=self.problem, splitting=self.splitting,
            controls=(self.controls[k],), E=[self.E[k]], I=[self.I[k]],
            nu_exp=self.nu_exp[k:k + 1], nu_imp=self.nu_imp[k:k + 1],
            a_exp=self.a_exp[k:k + 1], a_imp=self.a_imp[k:k + 1],
            sin_theta=self.sin_theta, h_max=self.h_max,
            g_dirichlet=self.g_dirichlet, metadata=dict(self.metadata),
            _quad_op=self._quad_op, _quad_pts=self._quad_pts)


def assemble(mesh: Mesh, problem: ControlProblem, spec: SplittingSpec | None = None,
             validate: bool = True) -> OperatorSet:
    """Assemble the per-control operators for a problem on a mesh."""
    spec = spec or SplittingSpec.fully_implicit()
    if validate:
        report = validate_problem(problem, spec, mesh)
        if not report.passed:
            raise AssemblyError("problem validation failed:\n" + str(report))

    controls = problem.controls
    m = len(controls)
    n = mesh.n_nodes
    elems = mesh.elements
    grads = mesh.grads
    area = mesh.area
    l1 = mesh.hat_l1
    n_int, n_t, n_free = mesh.n_interior, mesh.n_time, mesh.n_free
    reg = mesh.node_region

    # route coefficients to the two sides
    zero_s = lambda alpha, pts: np.zeros(len(pts))
    zero_v = lambda alpha, pts: np.zeros((len(pts), 2))
    b_exp = problem.b if spec.advection == EXPLICIT else zero_v
    b_imp = problem.b if spec.advection == IMPLICIT else zero_v
    c_exp = problem.c if spec.reaction == EXPLICIT else zero_s
    c_imp = problem.c if spec.reaction == IMPLICIT else zero_s

    acute = mesh.acuteness()
    qpts = quadrature_points(mesh)
    flat = qpts.reshape(-1, 2)

    # decide whether artificial diffusion is needed at all
    def _active(bf, cf):
        for alpha in controls:
            if np.abs(np.asarray(bf(alpha, flat))).max(initial=0.0) > 0:
                return True
            if np.abs(np.asarray(cf(alpha, flat))).max(initial=0.0) > 0:
                return True
        return False

    needs_nu_exp = _active(b_exp, c_exp)
    needs_nu_imp = _active(b_imp, c_imp)
    sin_theta = acute.sin_theta_all if acute.sin_theta_all > 0 else acute.sin_theta
    if needs_nu_exp or needs_nu_imp:
        if not acute.ok:
            raise AssemblyError(
                "mesh is not strictly acute but first-order/reaction terms are present; "
                f"violating (element, node, node) triples: {acute.violations[:5]}")
        nu_exp = (artificial_diffusion(mesh, sin_theta, b_exp, c_exp, controls)
                  if needs_nu_exp else np.zeros((m, n)))
        nu_imp = (artificial_diffusion(mesh, sin_theta, b_imp, c_imp, controls)
                  if needs_nu_imp else np.zeros((m, n)))
    else:
        nu_exp = np.zeros((m, n))
        nu_imp = np.zeros((m, n))

    # nodal second-order coefficient per side
    a_nodal = np.array([problem.a(alpha, mesh.vertices) for alpha in controls])
    if spec.diffusion == IMPLICIT:
        a_exp = nu_exp.copy()
        a_imp = np.maximum(a_nodal, nu_imp)
    elif spec.diffusion == EXPLICIT:
        a_exp = np.maximum(a_nodal, nu_exp)
        a_imp = nu_imp.copy()
    else:  # OFFLOAD
        a_exp = nu_exp.copy()
        a_imp = np.maximum(np.maximum(a_nodal - nu_exp, nu_imp), 0.0)
    a_exp[:, n_int:] = 0.0
    a_imp[:, n_int:] = 0.0

    # element blocks: stiffness and per-side advection/reaction
    stiff_blk = np.einsum("eid,ejd->eij", grads, grads) * area[:, None, None]
    row_nodes = np.repeat(elems, 3, axis=1).ravel()            # (ne*9,) block row i
    col_nodes = np.tile(elems, (1, 3)).ravel()                 # (ne*9,) block col j
    interior_row = row_nodes < n_int
    inv_l1_row = np.where(interior_row, 1.0 / l1[row_nodes], 0.0)

    def advreac_blocks(bf, cf, alpha):
        bv = np.asarray(bf(alpha, flat)).reshape(-1, 6, 2)
        cv = np.asarray(cf(alpha, flat)).reshape(-1, 6)
        per_qj = -np.einsum("eqd,ejd->eqj", bv, grads) \
            + cv[:, :, None] * QUAD_BARY[None, :, :]
        blk = np.einsum("q,eqj,qi->eij", QUAD_W, per_qj, QUAD_BARY)
        return blk * area[:, None, None]

    robin_nodes = np.flatnonzero((reg == TIME_ROBIN) | (reg == ROBIN))
    dirichlet_nodes = np.arange(n_free, n)
    floor = spec.robin_floor * mesh.dx

    E_list, I_list = [], []
    for k, alpha in enumerate(controls):
        mats = {}
        for side, a_side, bf, cf in (("E", a_exp[k], b_exp, c_exp),
                                     ("I", a_imp[k], b_imp, c_imp)):
            blk = advreac_blocks(bf, cf, alpha)
            # block entry (i, j): a(row)*<grad_j, grad_i> + <-b.grad_j + c phi_j, phi_i>
            data = (a_side[row_nodes] * stiff_blk.reshape(len(elems), -1).ravel()
                    + blk.reshape(len(elems), -1).ravel()) * inv_l1_row
            rows = [row_nodes]
            cols = [col_nodes]
            vals = [data]
            # Robin-type rows
            for node in robin_nodes:
                region = reg[node]
                if region == ROBIN:
                    on_this_side = side == "I"
                else:
                    on_this_side = (side == "E") == (spec.boundary_t == EXPLICIT)
                if not on_this_side:
                    continue
                pt = mesh.vertices[node:node + 1]
                direction = np.asarray(problem.b_bnd(alpha, pt))[0]
                creact = float(np.asarray(problem.c_bnd(alpha, pt))[0])
                if region == ROBIN:
                    creact += floor
                if np.linalg.norm(direction) > 0:
                    sc, sw = dini_stencil_weights(mesh, int(node), direction)
                    rows.append(np.full(len(sc), node))
                    cols.append(sc)
                    vals.append(sw)
                rows.append([node])
                cols.append([node])
                vals.append([creact])
            if side == "I":
                rows.append(dirichlet_nodes)
                cols.append(dirichlet_nodes)
                vals.append(np.ones(len(dirichlet_nodes)))
            M = coo_matrix((np.concatenate([np.asarray(v, dtype=float) for v in vals]),
                            (np.concatenate([np.asarray(r, dtype=np.int64) for r in rows]),
                             np.concatenate([np.asarray(c, dtype=np.int64) for c in cols]))),
                           shape=(n, n)).tocsr()
            M.sum_duplicates()
            M.eliminate_zeros()
            mats[side] = M
        E_list.append(mats["E"])
        I_list.append(mats["I"])

    _check_sign_structure(E_list, I_list, mesh, controls)

    h_max = np.inf
    for E in E_list:
        d = E.diagonal()[:n_t]
        pos = d[d > 0]
        if len(pos):
            h_max = min(h_max, float(1.0 / pos.max()))

    # quadrature operator for interior load rows: F_l = <f, hat_l>
    q_rows = np.repeat(elems.ravel(), 6)
    q_cols = (np.repeat(np.arange(len(elems)) * 6, 18).reshape(len(elems), 3, 6)
              + np.arange(6)[None, None, :]).ravel()
    phi_i = np.broadcast_to(QUAD_BARY.T[None], (len(elems), 3, 6)).ravel()
    q_w = np.broadcast_to(QUAD_W[None, None, :], (len(elems), 3, 6)).ravel()
    q_area = np.repeat(area, 18)
    q_mask = q_rows < n_int
    q_data = np.where(q_mask, phi_i * q_w * q_area / l1[q_rows], 0.0)
    quad_op = coo_matrix((q_data, (q_rows, q_cols)),
                         shape=(n, len(elems) * 6)).tocsr()

    g_dirichlet = np.zeros(n)
    if n > n_free:
        g_dirichlet[n_free:] = problem.g_dir(mesh.vertices[n_free:])
    g_dirichlet.flags.writeable = False

    meta = {
        "mesh_hash": mesh.hash(),
        "dx": mesh.dx,
        "sin_theta": sin_theta,
        "theta": float(np.arcsin(min(1.0, sin_theta))) if sin_theta > 0 else 0.0,
        "controls": list(controls),
        "splitting": spec.describe(),
        "h_max": h_max,
    }
    return OperatorSet(
        mesh=mesh, problem=problem, splitting=spec, controls=tuple(controls),
        E=E_list, I=I_list, nu_exp=nu_exp, nu_imp=nu_imp,
        a_exp=a_exp, a_imp=a_imp, sin_theta=sin_theta, h_max=h_max,
        g_dirichlet=g_dirichlet, metadata=meta,
        _quad_op=quad_op, _quad_pts=flat)


def _check_sign_structure(E_list, I_list, mesh, controls):
    """Raise when the assembled operators lost the monotone sign pattern."""
    n_free = mesh.n_free
    for label, mats in (("E", E_list), ("I", I_list)):
        for k, M in enumerate(mats):
            coo = M.tocoo()
            scale = max(1.0, np.abs(coo.data).max(initial=0.0))
            offdiag = (coo.row != coo.col) & (coo.row < n_free)
            bad = offdiag & (coo.data > _SIGN_TOL * scale)
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise AssemblyError(
                    f"{label}[{controls[k]}] has positive off-diagonal entry "
                    f"({coo.row[i]}, {coo.col[i]}) = {coo.data[i]:g}; "
                    "monotone structure lost (mesh pair not acute?)")
            if label == "E":
                robin_rows = np.isin(coo.row, np.flatnonzero(
                    mesh.node_region >= ROBIN))
                if np.any(np.abs(coo.data[robin_rows]) > 0):
                    raise AssemblyError("explicit operator must vanish on the "
                                        "Robin and Dirichlet rows")


def max_stable_timestep(ops: OperatorSet) -> float:
    """Largest h with h*E - Id entrywise non-positive for every control.

    Fully implicit splittings have no positive explicit diagonal and the
    bound is infinite.
    """
    return ops.h_max


def dump_operators(ops: OperatorSet, outdir, t: float = 0.0) -> list:
    """Write per-control triplet dumps (row col value) plus the vector F."""
    os.makedirs(outdir, exist_ok=True)
    paths = []
    for k, alpha in enumerate(ops.controls):
        path = os.path.join(outdir, f"operators_control{k}.txt")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# control {alpha!r}\n")
            for label, M in (("E", ops.E[k]), ("I", ops.I[k])):
                coo = M.tocoo()
                order = np.lexsort((coo.col, coo.row))
                fh.write(f"# {label} triplets: row col value\n")
                for i in order:
                    if coo.data[i] != 0.0:
                        fh.write(f"{coo.row[i]} {coo.col[i]} {float(coo.data[i])!r}\n")
            fh.write(f"# F at t={t!r}: row value\n")
            F = ops.rhs(k, t)
            for row, val in enumerate(F):
                if val != 0.0:
                    fh.write(f"{row} {float(val)!r}\n")
        paths.append(path)
    return paths
