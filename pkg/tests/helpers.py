"""Shared test machinery: small meshes, random acute meshes, coefficient draws."""
from __future__ import annotations

import numpy as np

from hjbfem.mesh import (Mesh, build_mesh, certify_acuteness,
                         TIME_ROBIN, ROBIN, DIRICHLET)
from hjbfem.problem import ControlProblem


def hexagon_fan(radius=1.0, centre=(0.0, 0.0), rim_tags=None,
                perturb=0.0, seed=0) -> Mesh:
    """Regular hexagon fanned from its centre: 6 equilateral triangles.

    ``rim_tags`` assigns a region to each of the six rim vertices (default
    all Dirichlet); edges take the tag shared by their endpoints, with
    mixed edges owned by the Dirichlet side.
    """
    rng = np.random.default_rng(seed)
    angles = np.pi / 3 * np.arange(6)
    rim = np.stack([centre[0] + radius * np.cos(angles),
                    centre[1] + radius * np.sin(angles)], axis=1)
    if perturb:
        rim = rim + rng.uniform(-perturb, perturb, rim.shape) * radius
    verts = np.vstack([[centre], rim])
    elems = np.array([[0, 1 + i, 1 + (i + 1) % 6] for i in range(6)])
    rim_tags = list(rim_tags) if rim_tags is not None else [DIRICHLET] * 6
    edge_tags = {}
    point_tags = {}
    for i in range(6):
        a, b = 1 + i, 1 + (i + 1) % 6
        ta, tb = rim_tags[i], rim_tags[(i + 1) % 6]
        edge_tags[(a, b)] = max(ta, tb)  # Dirichlet wins on mixed edges
    for i in range(6):
        point_tags[1 + i] = rim_tags[i]
    return build_mesh(verts, elems, edge_tags, point_tags)


def random_hexagon(rng, n_robin=None, with_time=False) -> Mesh:
    """Perturbed hexagon fan with random region tags, certified acute."""
    for _ in range(50):
        tags = [DIRICHLET] * 6
        k = rng.integers(0, 6) if n_robin is None else n_robin
        robin_positions = rng.choice(6, size=k, replace=False)
        for p in robin_positions:
            tags[p] = TIME_ROBIN if (with_time and rng.random() < 0.5) else ROBIN
        mesh = hexagon_fan(rim_tags=tags, perturb=rng.uniform(0, 0.12),
                           seed=int(rng.integers(0, 2 ** 31)))
        if certify_acuteness(mesh).sin_theta_all > 0.1:
            return mesh
    raise RuntimeError("no acute hexagon found")


def perturbed_mesh(mesh: Mesh, rng, rel=0.10, min_margin=0.05) -> Mesh:
    """Random interior perturbation of a mesh, rejected until strictly acute."""
    v = mesh.vertices
    n = mesh.n_nodes
    scale = np.full(n, np.inf)
    for e in range(mesh.n_elements):
        idx = mesh.elements[e]
        for i in range(3):
            for j in range(i + 1, 3):
                d = float(np.linalg.norm(v[idx[i]] - v[idx[j]]))
                scale[idx[i]] = min(scale[idx[i]], d)
                scale[idx[j]] = min(scale[idx[j]], d)
    edge_tags = {(int(a), int(b)): int(t)
                 for (a, b), t in zip(mesh.boundary_edges, mesh.boundary_tags)}
    onb = np.zeros(n, bool)
    onb[mesh.boundary_edges.ravel()] = True
    point_tags = {int(k): int(mesh.node_region[k]) for k in np.flatnonzero(onb)}
    ni = mesh.n_interior
    f = 1.0
    for _ in range(30):
        cand = v.copy()
        cand[:ni] = v[:ni] + f * rng.uniform(-1, 1, (ni, 2)) * (rel * scale[:ni])[:, None]
        try:
            m2 = build_mesh(cand, mesh.elements, edge_tags, point_tags)
        except Exception:
            f *= 0.7
            continue
        if certify_acuteness(m2).sin_theta_all > min_margin:
            return m2
        f *= 0.7
    return mesh


def inward_directions(mesh: Mesh) -> np.ndarray:
    """A direction per node guaranteed to lie in the tangent cone.

    For each boundary node this points from the node into an adjacent
    element (towards its centroid); interior nodes get zeros.
    """
    out = np.zeros((mesh.n_nodes, 2))
    for node in range(mesh.n_interior, mesh.n_nodes):
        elem = int(mesh.elements_of_node(node)[0])
        centroid = mesh.vertices[mesh.elements[elem]].mean(axis=0)
        out[node] = centroid - mesh.vertices[node]
    return out


def random_sign_problem(mesh: Mesh, rng, n_controls=2,
                        robin_reaction=True) -> ControlProblem:
    """Random coefficient draw satisfying the structural sign conditions.

    Diffusion is a non-negative random quadratic, drift a random bounded
    field, reactions non-negative, boundary drift points into the domain at
    every Robin-type node, and the data terms are non-negative.
    """
    controls = tuple(range(n_controls))
    coef = {al: {
        "a0": rng.uniform(0, 1), "ax": rng.uniform(-0.5, 0.5, 2),
        "b0": rng.uniform(-1.5, 1.5, 2), "bx": rng.uniform(-1, 1, (2, 2)),
        "c0": rng.uniform(0, 1), "f0": rng.uniform(0, 1),
        "cb": rng.uniform(0.1, 1) if robin_reaction else 0.0,
        "gb": rng.uniform(0, 1), "bscale": rng.uniform(0.2, 1.5),
    } for al in controls}
    inward = inward_directions(mesh)

    def a(al, p):
        k = coef[al]
        return k["a0"] + 0.5 * ((p - k["ax"]) ** 2).sum(axis=1)

    def b(al, p):
        k = coef[al]
        return k["b0"] + p @ k["bx"].T

    def c(al, p):
        return coef[al]["c0"] * (1 + 0.5 * np.sin(p[:, 0] + p[:, 1]) ** 2)

    def f(al, p, t):
        return coef[al]["f0"] * (1 + np.cos(p[:, 0]) ** 2)

    def b_bnd(al, p):
        # per-node inward direction looked up by nearest node position
        d = np.linalg.norm(p[:, None, :] - mesh.vertices[None, :, :], axis=2)
        idx = d.argmin(axis=1)
        return coef[al]["bscale"] * inward[idx]

    def c_bnd(al, p):
        return np.full(len(p), coef[al]["cb"])

    def g_bnd(al, p, t, region):
        return np.full(len(p), coef[al]["gb"])

    vT0 = rng.uniform(0, 2)
    return ControlProblem(
        controls=controls, T=1.0, a=a, b=b, c=c, f=f,
        b_bnd=b_bnd, c_bnd=c_bnd, g_bnd=g_bnd,
        g_dir=lambda p: np.full(len(p), vT0),
        v_T=lambda p: np.full(len(p), vT0),
        name="random-sign")
