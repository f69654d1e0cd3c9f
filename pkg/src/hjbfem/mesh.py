"""Conforming triangular meshes with boundary-region tags and hat-function geometry.

A mesh knows, for every node, which of the four regions it belongs to
(interior, time-dependent Robin, Robin, Dirichlet) and stores its nodes in
block order: interior first, then time-Robin, then Robin, then Dirichlet.
All geometric quantities needed by the discrete operators are precomputed:
element areas and diameters, hat-function gradients, and the L1 norms used
to normalise the test functions.

Boundary conditions are attached edge-wise.  Every boundary edge carries
exactly one region tag, and a vertex shared by edges of different regions
must be assigned explicitly, because silently picking a side changes the
scheme.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

# Region codes. The numeric order *is* the node ordering of the scheme.
INTERIOR = 0
TIME_ROBIN = 1
ROBIN = 2
DIRICHLET = 3

TAG_TO_REGION = {"T": TIME_ROBIN, "R": ROBIN, "D": DIRICHLET}
REGION_TO_TAG = {v: k for k, v in TAG_TO_REGION.items()}

_CONTAIN_TOL = 1e-12


class MeshError(ValueError):
    """Invalid mesh data (non-conforming, degenerate, bad region spec)."""


class ConeError(MeshError):
    """A requested boundary direction leaves the domain (not in the tangent cone)."""


@dataclass(frozen=True)
class BoundaryRegionSpec:
    """Region assignment for the boundary of a mesh.

    ``edge_tags`` maps an undirected vertex pair to a region code; every
    boundary edge of the triangulation must appear.  ``point_tags`` lists
    explicit vertex assignments; these are mandatory at vertices where
    edges of two different regions meet.
    """

    edge_tags: dict = field(default_factory=dict)
    point_tags: dict = field(default_factory=dict)

    def edge_region(self, a: int, b: int) -> int:
        key = (a, b) if a < b else (b, a)
        try:
            return self.edge_tags[key]
        except KeyError:
            raise MeshError(f"boundary edge ({a},{b}) has no region tag") from None


class Mesh:
    """Immutable conforming triangulation with region-ordered nodes.

    Use :func:`build_mesh` (or the file loader / generators) rather than
    calling the constructor directly; construction expects already
    validated, already reordered arrays.
    """

    def __init__(self, vertices, elements, node_region, boundary_edges, boundary_tags):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.elements = np.ascontiguousarray(elements, dtype=np.int64)
        self.node_region = np.ascontiguousarray(node_region, dtype=np.int8)
        self.boundary_edges = np.ascontiguousarray(boundary_edges, dtype=np.int64)
        self.boundary_tags = np.ascontiguousarray(boundary_tags, dtype=np.int8)
        self._build_geometry()
        for arr in (self.vertices, self.elements, self.node_region,
                    self.boundary_edges, self.boundary_tags):
            arr.flags.writeable = False
        self._acuteness = None

    # -- construction helpers -------------------------------------------------

    def _build_geometry(self):
        v, e = self.vertices, self.elements
        p0, p1, p2 = v[e[:, 0]], v[e[:, 1]], v[e[:, 2]]
        d1, d2 = p1 - p0, p2 - p0
        signed = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        edge01 = np.linalg.norm(p1 - p0, axis=1)
        edge12 = np.linalg.norm(p2 - p1, axis=1)
        edge20 = np.linalg.norm(p0 - p2, axis=1)
        self.edge_lengths = np.stack([edge12, edge20, edge01], axis=1)  # opposite vertex i
        self.diam = self.edge_lengths.max(axis=1)
        if np.any(signed <= 1e-12 * self.diam ** 2):
            bad = int(np.argmin(signed / np.maximum(self.diam, 1e-300) ** 2))
            raise MeshError(f"degenerate element {bad} (non-positive area {signed[bad]:g})")
        self.area = signed

        # Hat gradient of local vertex i is perp(opposite edge) / (2 area).
        grads = np.empty((len(e), 3, 2))
        for i, (j, k) in enumerate(((1, 2), (2, 0), (0, 1))):
            opp = v[e[:, k]] - v[e[:, j]]
            grads[:, i, 0] = -opp[:, 1]
            grads[:, i, 1] = opp[:, 0]
        grads /= (2.0 * self.area)[:, None, None]
        self.grads = grads

        n = len(v)
        counts = np.zeros(n)
        np.add.at(counts, e.ravel(), np.repeat(self.area / 3.0, 3))
        if np.any(counts <= 0):
            raise MeshError("isolated vertex (zero hat-function support)")
        self.hat_l1 = counts

        # vertex -> elements adjacency in CSR-like form
        order = np.argsort(e.ravel(), kind="stable")
        self._adj_elems = order // 3
        self._adj_ptr = np.searchsorted(e.ravel()[order], np.arange(n + 1))

        self.n_nodes = n
        self.n_elements = len(e)
        reg = self.node_region
        self.n_interior = int(np.sum(reg == INTERIOR))
        self.n_time = self.n_interior + int(np.sum(reg == TIME_ROBIN))
        self.n_free = self.n_time + int(np.sum(reg == ROBIN))

    # -- basic queries ---------------------------------------------------------

    @property
    def dx(self) -> float:
        """Mesh size: the largest element diameter."""
        return float(self.diam.max())

    def elements_of_node(self, node: int):
        return self._adj_elems[self._adj_ptr[node]:self._adj_ptr[node + 1]]

    def local_index(self, elem: int, node: int) -> int:
        row = self.elements[elem]
        for i in range(3):
            if row[i] == node:
                return i
        raise ValueError(f"node {node} not a vertex of element {elem}")

    def barycentric(self, elem: int, point) -> np.ndarray:
        """Barycentric coordinates of ``point`` in ``elem`` (affine, may be negative)."""
        e = self.elements[elem]
        grads = self.grads[elem]
        p0 = self.vertices[e[0]]
        lam = np.empty(3)
        lam[1] = grads[1] @ (np.asarray(point) - p0)
        lam[2] = grads[2] @ (np.asarray(point) - p0)
        lam[0] = 1.0 - lam[1] - lam[2]
        return lam

    def hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.vertices, self.elements, self.node_region,
                    self.boundary_edges, self.boundary_tags):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    def __repr__(self):
        return (f"Mesh({self.n_nodes} nodes: {self.n_interior} interior, "
                f"{self.n_time - self.n_interior} time-Robin, "
                f"{self.n_free - self.n_time} Robin, "
                f"{self.n_nodes - self.n_free} Dirichlet; "
                f"{self.n_elements} elements, dx={self.dx:.4g})")

    # -- acuteness -------------------------------------------------------------

    def acuteness(self) -> "AcutenessReport":
        if self._acuteness is None:
            self._acuteness = certify_acuteness(self)
        return self._acuteness


@dataclass
class AcutenessReport:
    """Result of the strict-acuteness certificate.

    ``sin_theta`` is the margin over pairs of non-Dirichlet nodes (the pairs
    the scheme's analysis quantifies over); ``sin_theta_all`` is the margin
    over *all* node pairs.  Artificial-diffusion sizing uses the all-pairs
    value whenever it is positive, so that off-diagonal signs are controlled
    in Dirichlet columns as well.
    """

    ok: bool
    sin_theta: float
    theta: float
    sin_theta_all: float
    theta_all: float
    violations: list

    def __bool__(self):
        return self.ok


def certify_acuteness(mesh: Mesh) -> AcutenessReport:
    """Certify strict acuteness of the hat-function gradients.

    For every element and every pair of non-Dirichlet nodes of that element
    the normalised gradient dot product must be <= -sin(theta) for some
    theta > 0.  Returns the largest admissible theta, or a failure report
    listing the violating (element, node, node) triples.
    """
    g = mesh.grads
    norms = np.linalg.norm(g, axis=2)
    reg = mesh.node_region
    pair_margin = np.inf
    pair_margin_all = np.inf
    violations = []
    for (i, j) in ((0, 1), (0, 2), (1, 2)):
        dots = np.einsum("ed,ed->e", g[:, i], g[:, j]) / (norms[:, i] * norms[:, j])
        pair_margin_all = min(pair_margin_all, float((-dots).min()))
        ni, nj = mesh.elements[:, i], mesh.elements[:, j]
        counted = (reg[ni] != DIRICHLET) & (reg[nj] != DIRICHLET)
        if not counted.any():
            continue
        s = -dots[counted]
        pair_margin = min(pair_margin, float(s.min()))
        bad = np.flatnonzero(counted)[dots[counted] >= 0]
        violations.extend((int(k), int(ni[k]), int(nj[k])) for k in bad)
    if np.isinf(pair_margin):  # no counted pairs at all
        pair_margin = 1.0
    if np.isinf(pair_margin_all):
        pair_margin_all = 1.0
    ok = pair_margin > 0
    theta = float(np.arcsin(min(pair_margin, 1.0))) if ok else 0.0
    theta_all = (float(np.arcsin(min(pair_margin_all, 1.0)))
                 if pair_margin_all > 0 else 0.0)
    return AcutenessReport(ok=ok, sin_theta=float(pair_margin), theta=theta,
                           sin_theta_all=float(pair_margin_all),
                           theta_all=theta_all, violations=violations)


# -- Dini stencils ------------------------------------------------------------

def find_dini_stencil(mesh: Mesh, node: int, direction) -> tuple[int, float]:
    """Locate an element and step length realising the lower Dini derivative.

    Returns ``(elem, lam)`` with the segment from the node to
    ``node + lam*direction`` inside the closure of ``elem``.  Because P1
    functions are affine on each element the difference quotient at this
    ``lam`` equals the directional derivative exactly; no limit is needed.

    Raises :class:`ConeError` when the direction leaves the domain at the
    node, i.e. no adjacent element contains any initial segment.
    """
    b = np.asarray(direction, dtype=float)
    nb = np.linalg.norm(b)
    if nb == 0.0:
        raise ValueError("direction must be non-zero")
    if mesh.node_region[node] == INTERIOR:
        raise ValueError(f"node {node} is not a boundary node")
    y = mesh.vertices[node]
    for elem in sorted(int(k) for k in mesh.elements_of_node(node)):
        loc = mesh.local_index(elem, node)
        emanating = [mesh.edge_lengths[elem, i] for i in range(3) if i != loc]
        lam0 = 0.5 * min(emanating) / nb
        lam = lam0
        for _ in range(31):
            lamb = mesh.barycentric(elem, y + lam * b)
            if lamb.min() >= -_CONTAIN_TOL:
                return elem, lam
            lam *= 0.5
    raise ConeError(
        f"direction {tuple(b)} at node {node} {tuple(y)} is outside the tangent cone")


def dini_stencil_weights(mesh: Mesh, node: int, direction):
    """Dini stencil as sparse row data.

    Returns ``(cols, coeffs)`` such that for nodal values ``w``,
    ``sum(coeffs * w[cols])`` equals the lower Dini derivative of the P1
    function ``w`` at the node in the given direction (the difference
    quotient ``(w(y) - w(y + lam*b)) / lam``).
    """
    elem, lam = find_dini_stencil(mesh, node, direction)
    y = mesh.vertices[node]
    bary = mesh.barycentric(elem, y + lam * np.asarray(direction, dtype=float))
    bary = np.clip(bary, 0.0, None)
    bary /= bary.sum()
    cols = [node]
    coeffs = [1.0 / lam]
    for i in range(3):
        n_i = int(mesh.elements[elem, i])
        w = bary[i]
        if w == 0.0:
            continue
        if n_i == node:
            coeffs[0] -= w / lam
        else:
            cols.append(n_i)
            coeffs.append(-w / lam)
    return np.array(cols, dtype=np.int64), np.array(coeffs)


# -- mesh construction --------------------------------------------------------

def build_mesh(vertices, elements, edge_tags, point_tags=None) -> Mesh:
    """Validate raw arrays, resolve the region of every node, and build a Mesh.

    ``edge_tags`` maps undirected boundary vertex pairs ``(i, j)`` (original
    indices) to region codes and must cover the boundary exactly; a
    :class:`BoundaryRegionSpec` may be passed instead.  ``point_tags`` gives
    explicit regions for individual boundary vertices; it is required
    wherever two regions meet.
    """
    if isinstance(edge_tags, BoundaryRegionSpec):
        spec = edge_tags
        edge_tags = spec.edge_tags
        point_tags = {**spec.point_tags, **(point_tags or {})}
    vertices = np.asarray(vertices, dtype=float)
    elements = np.asarray(elements, dtype=np.int64)
    if vertices.ndim != 2 or vertices.shape[1] != 2:
        raise MeshError("vertices must be an (n, 2) array")
    if elements.ndim != 2 or elements.shape[1] != 3:
        raise MeshError("elements must be an (ne, 3) array")
    n = len(vertices)
    if elements.min(initial=0) < 0 or elements.max(initial=-1) >= n:
        raise MeshError("element vertex index out of range")

    # exact duplicate vertices break conformity silently; refuse them
    _, uniq_counts = np.unique(vertices, axis=0, return_counts=True)
    if np.any(uniq_counts > 1):
        raise MeshError("duplicate vertex coordinates")

    # edge incidence bookkeeping
    edges = np.concatenate([elements[:, [0, 1]], elements[:, [1, 2]], elements[:, [2, 0]]])
    edges_sorted = np.sort(edges, axis=1)
    uniq, inverse, counts = np.unique(edges_sorted, axis=0,
                                      return_inverse=True, return_counts=True)
    if counts.max(initial=0) > 2:
        k = int(np.argmax(counts))
        raise MeshError(f"non-conforming mesh: edge {tuple(uniq[k])} shared by "
                        f"{counts[k]} elements")
    boundary_mask = counts == 1
    boundary_set = {(int(a), int(b)) for a, b in uniq[boundary_mask]}

    tag_keys = {(min(a, b), max(a, b)) for a, b in edge_tags}
    missing = boundary_set - tag_keys
    if missing:
        raise MeshError(f"untagged boundary edges: {sorted(missing)[:5]}"
                        + ("..." if len(missing) > 5 else ""))
    extra = tag_keys - boundary_set
    if extra:
        raise MeshError(f"tagged edges are not boundary edges (non-conforming?): "
                        f"{sorted(extra)[:5]}")

    # connectivity through shared edges; inverse[k] is the unique-edge id of
    # the k-th entry of `edges`, and entry k belongs to element k % ne
    pairs = {}
    rows, cols = [], []
    for entry, eid in enumerate(inverse):
        if counts[eid] != 2:
            continue
        other = pairs.pop(eid, None)
        if other is None:
            pairs[eid] = entry % len(elements)
        else:
            rows.append(other)
            cols.append(entry % len(elements))
    if len(elements) > 1:
        adj = coo_matrix((np.ones(len(rows)), (rows, cols)),
                         shape=(len(elements), len(elements)))
        ncomp, _ = connected_components(adj, directed=False)
        if ncomp > 1:
            raise MeshError(f"disconnected domain ({ncomp} components)")

    # resolve node regions
    region = np.full(n, INTERIOR, dtype=np.int8)
    node_edge_regions: dict[int, set] = {}
    norm_tags = {(min(a, b), max(a, b)): t for (a, b), t in edge_tags.items()}
    for (a, b), tag in norm_tags.items():
        if tag not in (TIME_ROBIN, ROBIN, DIRICHLET):
            raise MeshError(f"unknown region tag {tag!r} on edge ({a},{b})")
        node_edge_regions.setdefault(a, set()).add(tag)
        node_edge_regions.setdefault(b, set()).add(tag)
    point_tags = dict(point_tags or {})
    for node, regs in node_edge_regions.items():
        if node in point_tags:
            region[node] = point_tags.pop(node)
        elif len(regs) == 1:
            region[node] = regs.pop()
        else:
            x, y = vertices[node]
            raise MeshError(
                f"vertex {node} ({x:g},{y:g}) lies on {len(regs)} boundary regions; "
                f"an explicit point tag is required")
    if point_tags:
        bad = sorted(point_tags)
        raise MeshError(f"point tags for non-boundary vertices: {bad}")

    # reorder nodes: interior, time-Robin, Robin, Dirichlet (stable within block)
    perm = np.argsort(region, kind="stable")
    inv_perm = np.empty(n, dtype=np.int64)
    inv_perm[perm] = np.arange(n)
    new_vertices = vertices[perm]
    new_elements = inv_perm[elements]
    new_region = region[perm]
    tag_by_new = {}
    for (a, b), t in norm_tags.items():
        na, nb_ = int(inv_perm[a]), int(inv_perm[b])
        tag_by_new[(min(na, nb_), max(na, nb_))] = t
    b_edges = np.array(sorted(tag_by_new), dtype=np.int64).reshape(-1, 2)
    b_tags = np.array([tag_by_new[tuple(e)] for e in b_edges], dtype=np.int8)

    return Mesh(new_vertices, new_elements, new_region, b_edges, b_tags)


# -- file format ---------------------------------------------------------------

def load_mesh(path) -> Mesh:
    """Read the plain-text mesh format.

    Header ``d nv ne nb``; then nv lines ``x y``; then ne lines ``i j k``
    (0-based, counter-clockwise); then nb lines ``i j TAG`` with TAG one of
    D, R, T; then optional lines ``point i TAG`` overriding vertex ownership.
    """
    with open(path, encoding="utf-8") as fh:
        tokens = [ln.split("#", 1)[0].split() for ln in fh]
    tokens = [t for t in tokens if t]
    if not tokens:
        raise MeshError(f"{path}: empty mesh file")
    header = tokens[0]
    if len(header) != 4:
        raise MeshError(f"{path}: header must be 'd nv ne nb'")
    d, nv, ne, nb = (int(x) for x in header)
    if d != 2:
        raise MeshError(f"{path}: only d=2 supported, got d={d}")
    need = 1 + nv + ne + nb
    if len(tokens) < need:
        raise MeshError(f"{path}: truncated file")
    vertices = np.array([[float(t[0]), float(t[1])] for t in tokens[1:1 + nv]])
    elements = np.array([[int(t[0]), int(t[1]), int(t[2])]
                         for t in tokens[1 + nv:1 + nv + ne]], dtype=np.int64)
    edge_tags = {}
    for t in tokens[1 + nv + ne:need]:
        a, b, tag = int(t[0]), int(t[1]), t[2]
        if tag not in TAG_TO_REGION:
            raise MeshError(f"{path}: unknown boundary tag {tag!r}")
        edge_tags[(a, b)] = TAG_TO_REGION[tag]
    point_tags = {}
    for t in tokens[need:]:
        if t[0] != "point" or len(t) != 3:
            raise MeshError(f"{path}: malformed trailing line {' '.join(t)!r}")
        point_tags[int(t[1])] = TAG_TO_REGION[t[2]]
    return build_mesh(vertices, elements, edge_tags, point_tags)


def write_mesh(mesh: Mesh, path) -> None:
    """Write a mesh in the plain-text format read by :func:`load_mesh`."""
    lines = [f"2 {mesh.n_nodes} {mesh.n_elements} {len(mesh.boundary_edges)}"]
    lines += [f"{float(x)!r} {float(y)!r}" for x, y in mesh.vertices]
    lines += [f"{int(i)} {int(j)} {int(k)}" for i, j, k in mesh.elements]
    for (a, b), t in zip(mesh.boundary_edges, mesh.boundary_tags):
        lines.append(f"{a} {b} {REGION_TO_TAG[int(t)]}")
    # persist resolved vertex ownership so junction vertices reload unambiguously
    on_boundary = np.zeros(mesh.n_nodes, dtype=bool)
    on_boundary[mesh.boundary_edges.ravel()] = True
    for node in np.flatnonzero(on_boundary):
        lines.append(f"point {node} {REGION_TO_TAG[int(mesh.node_region[node])]}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# -- structured generators ------------------------------------------------------

def crisscross_mesh(nx, ny, bounds=(-1.0, 1.0, -1.0, 1.0),
                    side_tags=None, corner_tags=None) -> Mesh:
    """Criss-cross mesh: each cell of an nx-by-ny grid split by both diagonals.

    ``side_tags`` maps each of "left", "right", "bottom", "top" to a region
    letter (default all Dirichlet).  Corners between sides of different
    regions need an entry in ``corner_tags`` ("sw", "se", "ne", "nw").
    """
    x0, x1, y0, y1 = bounds
    side_tags = {**{"left": "D", "right": "D", "bottom": "D", "top": "D"},
                 **(side_tags or {})}
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    grid_id = {}
    verts = []
    for j in range(ny + 1):
        for i in range(nx + 1):
            grid_id[(i, j)] = len(verts)
            verts.append((xs[i], ys[j]))
    center_id = {}
    for j in range(ny):
        for i in range(nx):
            center_id[(i, j)] = len(verts)
            verts.append((0.5 * (xs[i] + xs[i + 1]), 0.5 * (ys[j] + ys[j + 1])))
    elements = []
    for j in range(ny):
        for i in range(nx):
            sw, se = grid_id[(i, j)], grid_id[(i + 1, j)]
            ne_, nw = grid_id[(i + 1, j + 1)], grid_id[(i, j + 1)]
            c = center_id[(i, j)]
            elements += [(sw, se, c), (se, ne_, c), (ne_, nw, c), (nw, sw, c)]
    edge_tags = {}
    for i in range(nx):
        edge_tags[(grid_id[(i, 0)], grid_id[(i + 1, 0)])] = TAG_TO_REGION[side_tags["bottom"]]
        edge_tags[(grid_id[(i, ny)], grid_id[(i + 1, ny)])] = TAG_TO_REGION[side_tags["top"]]
    for j in range(ny):
        edge_tags[(grid_id[(0, j)], grid_id[(0, j + 1)])] = TAG_TO_REGION[side_tags["left"]]
        edge_tags[(grid_id[(nx, j)], grid_id[(nx, j + 1)])] = TAG_TO_REGION[side_tags["right"]]
    corner_nodes = {"sw": grid_id[(0, 0)], "se": grid_id[(nx, 0)],
                    "ne": grid_id[(nx, ny)], "nw": grid_id[(0, ny)]}
    corner_sides = {"sw": ("bottom", "left"), "se": ("bottom", "right"),
                    "ne": ("top", "right"), "nw": ("top", "left")}
    point_tags = {}
    for name, node in corner_nodes.items():
        s1, s2 = corner_sides[name]
        if corner_tags and name in corner_tags:
            point_tags[node] = TAG_TO_REGION[corner_tags[name]]
        elif side_tags[s1] != side_tags[s2]:
            raise MeshError(f"corner {name!r} joins regions "
                            f"{side_tags[s1]}/{side_tags[s2]}: set corner_tags[{name!r}]")
    return build_mesh(np.array(verts), np.array(elements), edge_tags, point_tags)


def retag_mesh(mesh: Mesh, edge_rule, point_rule=None) -> Mesh:
    """Rebuild a mesh with boundary regions assigned by geometric rules.

    ``edge_rule(pa, pb)`` receives the endpoint coordinates of a boundary
    edge and returns its region code.  ``point_rule(p)`` may return a region
    code for individual boundary vertices (required at junctions between
    regions) or None to keep the edge-derived assignment.
    """
    edge_tags = {}
    for (a, b) in mesh.boundary_edges:
        edge_tags[(int(a), int(b))] = int(edge_rule(mesh.vertices[a], mesh.vertices[b]))
    point_tags = {}
    if point_rule is not None:
        on_boundary = np.zeros(mesh.n_nodes, dtype=bool)
        on_boundary[mesh.boundary_edges.ravel()] = True
        for node in np.flatnonzero(on_boundary):
            r = point_rule(mesh.vertices[node])
            if r is not None:
                point_tags[int(node)] = int(r)
    return build_mesh(mesh.vertices, mesh.elements, edge_tags, point_tags)


def refine(mesh: Mesh) -> Mesh:
    """Red refinement: split every element into four via edge midpoints.

    The four children are similar to the parent, so element angles (and with
    them any acuteness margin) are preserved exactly and the mesh size
    halves exactly.
    """
    v = mesh.vertices
    elems = mesh.elements
    edges = np.concatenate([elems[:, [0, 1]], elems[:, [1, 2]], elems[:, [2, 0]]])
    edges_sorted = np.sort(edges, axis=1)
    uniq, inverse = np.unique(edges_sorted, axis=0, return_inverse=True)
    mid_index = {tuple(e): mesh.n_nodes + k for k, e in enumerate(uniq)}
    midpoints = 0.5 * (v[uniq[:, 0]] + v[uniq[:, 1]])
    new_v = np.vstack([v, midpoints])

    ne = len(elems)
    m01 = mesh.n_nodes + inverse[:ne]
    m12 = mesh.n_nodes + inverse[ne:2 * ne]
    m20 = mesh.n_nodes + inverse[2 * ne:]
    a, b, c = elems[:, 0], elems[:, 1], elems[:, 2]
    new_e = np.concatenate([
        np.stack([a, m01, m20], axis=1),
        np.stack([m01, b, m12], axis=1),
        np.stack([m20, m12, c], axis=1),
        np.stack([m01, m12, m20], axis=1),
    ])

    edge_tags = {}
    point_tags = {}
    for (a_, b_), t in zip(mesh.boundary_edges, mesh.boundary_tags):
        m = mid_index[(min(int(a_), int(b_)), max(int(a_), int(b_)))]
        edge_tags[(int(a_), m)] = int(t)
        edge_tags[(m, int(b_))] = int(t)
    # original boundary vertices keep their resolved ownership
    on_boundary = np.zeros(mesh.n_nodes, dtype=bool)
    on_boundary[mesh.boundary_edges.ravel()] = True
    for node in np.flatnonzero(on_boundary):
        point_tags[int(node)] = int(mesh.node_region[node])
    return build_mesh(new_v, new_e, edge_tags, point_tags)
