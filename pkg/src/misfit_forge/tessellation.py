"""Voronoi cells, Delaunay pretriangulations, bond graphs and rigid tessellations.

The pretriangulation is obtained from a simplicial Delaunay triangulation by
merging adjacent simplices that share their circumsphere; cospherical groups
(octahedra of FCC/HCP, hexagons of the honeycomb) thus come out as single
polyhedral cells.  Polygonal facets are refined by a fan of diagonals from the
lexicographically largest vertex, and the refined cells are peeled into
tetrahedra wherever a vertex of degree three allows it.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import ConvexHull, Delaunay, HalfspaceIntersection, cKDTree

from .lattice import (
    NN_DISTANCE,
    AtomSet,
    LatticeSpec,
    WireDomain,
    biphase_points,
    to_lattice_coords,
    wire_domain,
)

SPHERE_TOL = 1e-7
VARIANT_ORDERS = {1: (0, 1, 2), 2: (1, 2, 0), 3: (2, 0, 1)}


class GeometryError(RuntimeError):
    """A geometric construction hit a configuration it cannot resolve."""

    def __init__(self, message, vertices=None):
        super().__init__(message)
        self.vertices = None if vertices is None else [int(v) for v in vertices]


class Shape(str, enum.Enum):
    TETRAHEDRON = "tetrahedron"
    OCTAHEDRON = "octahedron"
    POLYHEDRON = "polyhedron"
    TRIANGLE = "triangle"
    RAW = "raw"


class BondClass(str, enum.Enum):
    NN = "NN"
    NNN = "NNN"
    INTERFACE_DIAGONAL = "InterfaceDiagonal"


@dataclass(frozen=True)
class Cell:
    """A cell given by atom ids.

    ``faces`` lists the boundary facets, outward oriented: vertex cycles in 3D
    (triangles for every cell except raw pretriangulation cells), edges in 2D.
    """

    vertices: tuple
    shape: Shape
    faces: tuple = ()

    def edges(self) -> set:
        out = set()
        for face in self.faces:
            n = len(face)
            if n == 2:
                out.add(_pair(face[0], face[1]))
                continue
            for i in range(n):
                out.add(_pair(face[i], face[(i + 1) % n]))
        return out


@dataclass(frozen=True)
class BondGraph:
    edges: np.ndarray
    classes: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        classes = np.asarray(self.classes, dtype=object)
        if len(edges) and np.any(edges[:, 0] == edges[:, 1]):
            raise ValueError("bond with identical endpoints")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "classes", classes)

    def __len__(self):
        return len(self.edges)

    @classmethod
    def from_dict(cls, mapping: dict) -> "BondGraph":
        items = sorted(mapping.items())
        if not items:
            return cls(np.zeros((0, 2), np.int64), np.zeros(0, object))
        edges = np.array([e for e, _ in items], dtype=np.int64)
        classes = np.array([BondClass(c).value for _, c in items], dtype=object)
        return cls(edges, classes)

    def as_dict(self) -> dict:
        return {(int(a), int(b)): c for (a, b), c in zip(self.edges, self.classes)}

    def select(self, *classes) -> np.ndarray:
        wanted = {BondClass(c).value for c in classes}
        mask = np.array([c in wanted for c in self.classes], dtype=bool)
        return self.edges[mask] if len(self.edges) else self.edges

    def neighbours(self, atom: int, *classes) -> list:
        edges = self.select(*classes) if classes else self.edges
        out = set(edges[edges[:, 0] == atom, 1]) | set(edges[edges[:, 1] == atom, 0])
        return sorted(int(v) for v in out)

    def degree(self, n_atoms: int, *classes) -> np.ndarray:
        edges = self.select(*classes) if classes else self.edges
        return np.bincount(edges.ravel(), minlength=n_atoms)


@dataclass(frozen=True)
class Tessellation:
    cells: list
    triangulations: dict
    provenance: dict = field(default_factory=dict)

    def simplices(self, variant: int = 1) -> np.ndarray:
        return self.triangulations[variant]

    def octahedra(self) -> list:
        return [c for c in self.cells if c.shape is Shape.OCTAHEDRON]

    def count(self, shape: Shape) -> int:
        return sum(1 for c in self.cells if c.shape is shape)


@dataclass(frozen=True)
class VoronoiCell:
    halfspaces: np.ndarray
    vertices: np.ndarray
    facet_neighbours: tuple
    boundary_truncated: bool

    @property
    def n_facets(self) -> int:
        return len(self.facet_neighbours) + (1 if self.boundary_truncated else 0)

    def volume(self) -> float:
        return float(ConvexHull(self.vertices).volume)


def _pair(a, b):
    a, b = int(a), int(b)
    return (a, b) if a < b else (b, a)


def _lex_argmax(ids, positions, order):
    keys = np.round(positions[list(ids)][:, list(order)], 9)
    best = 0
    for i in range(1, len(ids)):
        if tuple(keys[i]) > tuple(keys[best]):
            best = i
    return best


def _signed_volume(p):
    """Signed volume (area in 2D) of simplices ``p`` of shape ``(..., d+1, d)``."""
    d = p.shape[-1]
    m = p[..., 1:, :] - p[..., :1, :]
    return np.linalg.det(m) / math.factorial(d)


def cell_volume(cell: Cell, positions: np.ndarray) -> float:
    pts = positions[list(cell.vertices)]
    if len(pts) == pts.shape[1] + 1:
        return float(abs(_signed_volume(pts[None])[0]))
    return float(ConvexHull(pts).volume)


# ---------------------------------------------------------------------------
# Delaunay pretriangulation


def _typical_spacing(points):
    tree = cKDTree(points)
    d, _ = tree.query(points, k=2)
    return float(np.median(d[:, 1]))


def _circumspheres(points, simplices, scale):
    p = points[simplices]
    A = 2.0 * (p[:, 1:, :] - p[:, :1, :])
    b = np.sum(p[:, 1:, :] ** 2 - p[:, :1, :] ** 2, axis=2)
    vol = np.abs(_signed_volume(p))
    d = points.shape[1]
    degenerate = vol < 1e-9 * scale**d
    centres = np.full((len(simplices), d), np.nan)
    ok = ~degenerate
    if np.any(ok):
        centres[ok] = np.linalg.solve(A[ok], b[ok][..., None])[..., 0]
    radii = np.linalg.norm(centres - p[:, 0, :], axis=1)
    return centres, radii, degenerate


def _sliver_bridges(N, centres, radii, degenerate, tol):
    """Pairs of proper simplices separated only by flat slivers and sharing a sphere.

    Triangulated Delaunay output may insert zero-volume simplices inside a
    cospherical group; they must not glue two different spheres together.
    """
    deg = np.flatnonzero(degenerate)
    if len(deg) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    pos = {int(d): i for i, d in enumerate(deg)}
    parent = list(range(len(deg)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for d in deg:
        for t in N[d]:
            if t >= 0 and degenerate[t]:
                parent[find(pos[int(d)])] = find(pos[int(t)])
    groups = {}
    for d in deg:
        nb = [int(t) for t in N[d] if t >= 0 and not degenerate[t]]
        groups.setdefault(find(pos[int(d)]), set()).update(nb)
    bs, bt = [], []
    for nbs in groups.values():
        nbs = sorted(nbs)
        for i, a in enumerate(nbs):
            for b in nbs[i + 1 :]:
                if np.linalg.norm(centres[a] - centres[b]) <= tol and abs(radii[a] - radii[b]) <= tol:
                    bs.append(a)
                    bt.append(b)
    return np.array(bs, dtype=int), np.array(bt, dtype=int)


def _group_simplices(points, tri, scale, tol, relevant):
    S = tri.simplices
    N = tri.neighbors
    centres, radii, degenerate = _circumspheres(points, S, scale)
    s_idx, j_idx = np.nonzero(N >= 0)
    t_idx = N[s_idx, j_idx]
    keep = ~degenerate[s_idx] & ~degenerate[t_idx]
    s_idx, t_idx = s_idx[keep], t_idx[keep]
    T = S[t_idx]
    shared = (T[:, :, None] == S[s_idx][:, None, :]).any(axis=2)
    opp = T[~shared]
    gap = np.linalg.norm(points[opp] - centres[s_idx], axis=1) - radii[s_idx]
    merge = np.abs(gap) <= tol * scale
    near = (
        ~merge
        & (np.abs(gap) <= 100.0 * tol * scale)
        & (radii[s_idx] < 3.0 * scale)
        & relevant[s_idx]
        & relevant[t_idx]
    )
    if np.any(near):
        i = int(np.argmax(near))
        verts = np.union1d(S[s_idx[i]], S[t_idx[i]])
        raise GeometryError(
            f"near-degenerate cosphericity (gap {gap[i]:.3e}); adjust the tolerance", verts
        )
    m = len(S)
    bs, bt = _sliver_bridges(N, centres, radii, degenerate, tol * scale)
    rows = np.concatenate([s_idx[merge], bs])
    cols = np.concatenate([t_idx[merge], bt])
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(m, m))
    _, labels = connected_components(adj, directed=False)
    return labels, degenerate


def _polygon_facets_3d(ids, points):
    """Outward-oriented polygonal facets of the convex hull of ``points[ids]``."""
    pts = points[ids]
    hull = ConvexHull(pts)
    eq = hull.equations
    n_tri = len(hull.simplices)
    parent = list(range(n_tri))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n_tri):
        for j in hull.neighbors[i]:
            if np.allclose(eq[i], eq[j], atol=1e-8):
                parent[find(i)] = find(j)
    groups = {}
    for i in range(n_tri):
        groups.setdefault(find(i), set()).update(hull.simplices[i].tolist())
    facets = []
    for root, verts in groups.items():
        verts = sorted(verts)
        normal = eq[root, :3]
        if len(verts) == 3:
            a, b, c = verts
            if np.dot(np.cross(pts[b] - pts[a], pts[c] - pts[a]), normal) < 0:
                b, c = c, b
            cyc = [a, b, c]
        else:
            centre = pts[verts].mean(axis=0)
            e1 = pts[verts[0]] - centre
            e1 /= np.linalg.norm(e1)
            e2 = np.cross(normal, e1)
            rel = pts[verts] - centre
            ang = np.arctan2(rel @ e2, rel @ e1)
            cyc = [verts[i] for i in np.argsort(ang)]
        facets.append(tuple(int(ids[v]) for v in cyc))
    return sorted(facets, key=lambda f: sorted(f))


def _polygon_edges_2d(ids, points):
    pts = points[ids]
    hull = ConvexHull(pts)
    cyc = [int(ids[v]) for v in hull.vertices]  # counterclockwise
    return tuple((cyc[i], cyc[(i + 1) % len(cyc)]) for i in range(len(cyc)))


def _simplex_faces(verts, points):
    verts = list(verts)
    d = points.shape[1]
    if _signed_volume(points[verts][None])[0] < 0:
        verts[0], verts[1] = verts[1], verts[0]
    if d == 2:
        a, b, c = verts
        return tuple(verts), ((a, b), (b, c), (c, a))
    a, b, c, e = verts
    # outward faces of a positively oriented tetrahedron
    return tuple(verts), ((a, c, b), (a, b, e), (b, c, e), (c, a, e))


def _classify(verts, faces, dim):
    if len(verts) == dim + 1:
        return Shape.TRIANGLE if dim == 2 else Shape.TETRAHEDRON
    if dim == 3 and len(verts) == 6 and len(faces) == 8 and all(len(f) == 3 for f in faces):
        deg = {}
        for f in faces:
            for v in f:
                deg[v] = deg.get(v, 0) + 1
        if all(n == 4 for n in deg.values()):
            return Shape.OCTAHEDRON
    return Shape.RAW


@dataclass
class _Pretri:
    points: np.ndarray
    cells: list
    delaunay: Delaunay
    simplex_cell: np.ndarray  # simplex -> cell index (-1 if dropped)
    scale: float


def _pretriangulate(points, scale=None, tol=SPHERE_TOL, relevant=None):
    points = np.asarray(points, dtype=float)
    dim = points.shape[1]
    if scale is None:
        scale = _typical_spacing(points)
    tri = Delaunay(points)
    S = tri.simplices
    if relevant is None:
        relevant = np.ones(len(S), dtype=bool)
    elif callable(relevant):
        relevant = relevant(points, tri)
    labels, degenerate = _group_simplices(points, tri, scale, tol, relevant)
    order = np.argsort(labels, kind="stable")
    bounds = np.flatnonzero(np.diff(labels[order])) + 1
    simplex_cell = np.full(len(S), -1)
    cells = []
    for members in np.split(order, bounds):
        if not np.any(relevant[members]):
            continue
        if len(members) == 1:
            if degenerate[members[0]]:
                continue
            verts, faces = _simplex_faces(S[members[0]], points)
            shape = Shape.TRIANGLE if dim == 2 else Shape.TETRAHEDRON
            simplex_cell[members] = len(cells)
            cells.append(Cell(verts, shape, faces))
            continue
        ids = np.unique(S[members])
        try:
            if dim == 3:
                faces = _polygon_facets_3d(ids, points)
            else:
                faces = _polygon_edges_2d(ids, points)
        except Exception:  # flat group on the outer hull of the cloud
            if np.all(degenerate[members]):
                continue
            raise GeometryError("cannot build cell hull", ids) from None
        shape = _classify(ids, faces, dim)
        simplex_cell[members] = len(cells)
        cells.append(Cell(tuple(int(v) for v in ids), shape, tuple(faces)))
    return _Pretri(points, cells, tri, simplex_cell, scale)


def delaunay_pretriangulation(atoms, tol: float = SPHERE_TOL) -> list:
    """Delaunay pretriangulation of an atom set (or bare positions) as a list of cells.

    Cospherical groups of vertices are returned as one polyhedral cell;
    tetrahedra and octahedra are tagged as such, anything else is ``RAW``.
    """
    points = atoms.positions if isinstance(atoms, AtomSet) else np.asarray(atoms, float)
    return _pretriangulate(points, tol=tol).cells


def nearest_neighbours(atoms, pre: list) -> BondGraph:
    """NN bonds: the 1-faces of the pretriangulation cells."""
    edges = {}
    for cell in pre:
        for e in cell.edges():
            edges[e] = BondClass.NN
    return BondGraph.from_dict(edges)


# ---------------------------------------------------------------------------
# Voronoi cells and next-to-nearest neighbours


def _search_radius(atoms) -> float:
    if isinstance(atoms, AtomSet):
        return 3.0 * NN_DISTANCE[atoms.kind]
    return 3.0 * _typical_spacing(atoms)


def voronoi_cell(atoms, atom: int, box_factor: float = 3.0) -> VoronoiCell:
    """Voronoi cell of one atom as a halfspace intersection.

    Bisectors are taken against all atoms within twice the search radius; the
    cell is clipped to a box ``box_factor`` times the extent of the atom set and
    flagged when that clipping is active.
    """
    points = atoms.positions if isinstance(atoms, AtomSet) else np.asarray(atoms, float)
    n, dim = points.shape
    if not 0 <= atom < n:
        raise IndexError(f"atom id {atom} out of range")
    x = points[atom]
    radius = 2.0 * _search_radius(atoms) if n > 1 else 1.0
    others = [j for j in cKDTree(points).query_ball_point(x, radius) if j != atom]
    others = np.array(sorted(others), dtype=int)
    lo, hi = points.min(axis=0), points.max(axis=0)
    centre = 0.5 * (lo + hi)
    half = 0.5 * box_factor * np.maximum(hi - lo, radius)
    rows = []
    for j in others:
        y = points[j]
        normal = y - x
        rows.append(np.append(normal, -0.5 * (y @ y - x @ x)))
    for axis in range(dim):
        e = np.zeros(dim)
        e[axis] = 1.0
        rows.append(np.append(e, -(centre[axis] + half[axis])))
        rows.append(np.append(-e, centre[axis] - half[axis]))
    hs = np.array(rows)
    inter = HalfspaceIntersection(hs, x)
    verts = inter.intersections
    resid = verts @ hs[:, :dim].T + hs[:, dim]
    scale = np.linalg.norm(hs[:, :dim], axis=1)
    on = np.abs(resid) <= 1e-9 * np.maximum(scale, 1.0)
    facets = []
    for i in range(len(hs)):
        pts = verts[on[:, i]]
        if len(pts) >= dim and np.linalg.matrix_rank(pts[1:] - pts[0], tol=1e-9) == dim - 1:
            facets.append(i)
    neighbours = tuple(int(others[i]) for i in facets if i < len(others))
    truncated = any(i >= len(others) for i in facets)
    return VoronoiCell(hs, verts, neighbours, truncated)


def next_to_nearest(atoms, atom: int, pre: list = None, graph: BondGraph = None):
    """NNN of ``atom``: Voronoi neighbours after removing its nearest neighbours.

    The nearest neighbours come from ``graph`` (NN class) when given, otherwise
    from the pretriangulation.  Returns ``(ids, boundary_flag)``; the flag is
    set when the recomputed Voronoi cell touches the outer hull of the atom set.
    """
    points = atoms.positions if isinstance(atoms, AtomSet) else np.asarray(atoms, float)
    if graph is not None:
        nn = set(graph.neighbours(atom, BondClass.NN))
    else:
        if pre is None:
            pre = delaunay_pretriangulation(points)
        nn = set(nearest_neighbours(points, pre).neighbours(atom))
    keep = np.array([j for j in range(len(points)) if j not in nn])
    reduced = points[keep]
    local = int(np.flatnonzero(keep == atom)[0])
    radius = 2.0 * _search_radius(atoms)
    window = np.array(sorted(cKDTree(reduced).query_ball_point(reduced[local], 2 * radius)))
    sub = reduced[window]
    centre = int(np.flatnonzero(window == local)[0])
    cells = _pretriangulate(sub).cells
    graph = nearest_neighbours(sub, cells)
    found = [int(keep[window[j]]) for j in graph.neighbours(centre)]
    on_hull = _on_hull(sub, 1e-9)
    boundary = bool(np.any(on_hull[graph.neighbours(centre) + [centre]]))
    return sorted(found), boundary


# ---------------------------------------------------------------------------
# rigid refinement


def _triangulate_faces(cell, positions, diagonals):
    tris = []
    for face in cell.faces:
        if len(face) == 3:
            tris.append(tuple(face))
            continue
        n = len(face)
        m = _lex_argmax(face, positions, (0, 1, 2))
        cyc = [face[(m + j) % n] for j in range(n)]
        for j in range(1, n - 1):
            tris.append((cyc[0], cyc[j], cyc[j + 1]))
        for j in range(2, n - 1):
            diagonals.add(_pair(cyc[0], cyc[j]))
    return tris


def _peel(verts, tris, positions):
    """Cut tetrahedra off at degree-3 vertices; returns (tets, remainder triangles)."""
    tris = [tuple(t) for t in tris]
    tets = []
    while True:
        vset = {v for t in tris for v in t}
        if len(vset) <= 4:
            break
        nbrs = {v: set() for v in vset}
        for t in tris:
            for i in range(3):
                nbrs[t[i]].update((t[(i + 1) % 3], t[(i + 2) % 3]))
        cands = sorted(v for v in vset if len(nbrs[v]) == 3)
        if not cands:
            break
        v = cands[_lex_argmax(cands, positions, (0, 1, 2))]
        a, b, c = sorted(nbrs[v])
        tets.append((v, a, b, c))
        tris = [t for t in tris if v not in t]
        if np.dot(
            np.cross(positions[b] - positions[a], positions[c] - positions[a]),
            positions[v] - positions[a],
        ) < 0:
            b, c = c, b
        tris.append((a, b, c))
    return tets, tris


def _rigid_cells_3d(cell, positions, diagonals):
    if cell.shape in (Shape.TETRAHEDRON, Shape.OCTAHEDRON):
        return [cell]
    tris = _triangulate_faces(cell, positions, diagonals)
    tets, rest = _peel(cell.vertices, tris, positions)
    out = []
    for t in tets:
        verts, faces = _simplex_faces(t, positions)
        out.append(Cell(verts, Shape.TETRAHEDRON, faces))
    rest_verts = tuple(sorted({v for t in rest for v in t}))
    if rest_verts:
        shape = _classify(rest_verts, rest, 3)
        if shape is Shape.TETRAHEDRON:
            verts, faces = _simplex_faces(rest_verts, positions)
            out.append(Cell(verts, shape, faces))
        else:
            if shape is Shape.RAW:
                shape = Shape.POLYHEDRON
            out.append(Cell(rest_verts, shape, tuple(rest)))
    return out


def _rigid_cells_2d(cell, positions, diagonals):
    if cell.shape is Shape.TRIANGLE:
        return [cell]
    cyc = [e[0] for e in cell.faces]
    n = len(cyc)
    m = _lex_argmax(cyc, positions, (0, 1))
    cyc = [cyc[(m + j) % n] for j in range(n)]
    out = []
    for j in range(1, n - 1):
        verts, faces = _simplex_faces((cyc[0], cyc[j], cyc[j + 1]), positions)
        out.append(Cell(verts, Shape.TRIANGLE, faces))
    for j in range(2, n - 1):
        diagonals.add(_pair(cyc[0], cyc[j]))
    return out


def _refine(pre: _Pretri):
    """Rigid refinement of every cell; returns (cells, parent index, diagonals)."""
    positions = pre.points
    dim = positions.shape[1]
    diagonals = set()
    cells, parent = [], []
    for i, cell in enumerate(pre.cells):
        pieces = (
            _rigid_cells_3d(cell, positions, diagonals)
            if dim == 3
            else _rigid_cells_2d(cell, positions, diagonals)
        )
        cells.extend(pieces)
        parent.extend([i] * len(pieces))
    return cells, np.array(parent, dtype=int), diagonals


def _edge_graph(cells, diagonals, base=BondClass.NN, diagonal=BondClass.INTERFACE_DIAGONAL):
    edges = {}
    for cell in cells:
        for e in cell.edges():
            edges[e] = base
    for e in diagonals:
        edges[e] = diagonal
    return edges


def rigid_tessellation(atoms, pre: list = None):
    """Rigid Delaunay tessellation and bond graph of an atom set.

    Returns ``(Tessellation, BondGraph)``.  Diagonals inserted into polygonal
    facets are tagged ``InterfaceDiagonal``.
    """
    points = atoms.positions if isinstance(atoms, AtomSet) else np.asarray(atoms, float)
    if pre is None:
        pre_obj = _pretriangulate(points)
    else:
        pre_obj = _Pretri(points, list(pre), None, None, _typical_spacing(points))
    cells, _, diagonals = _refine(pre_obj)
    tess = _assemble(cells, points)
    return tess, BondGraph.from_dict(_edge_graph(cells, diagonals))


# ---------------------------------------------------------------------------
# sublattice construction (diamond cubic, honeycomb)


def _locate(points_query, pre: _Pretri, cells, parent, tol, strict):
    """For each query point, the refined cell strictly containing it (or -1).

    Ambiguous containment raises only for cells flagged in ``strict``.
    """
    positions = pre.points
    dim = positions.shape[1]
    by_parent = {}
    for i, p in enumerate(parent):
        by_parent.setdefault(int(p), []).append(i)
    simplex = pre.delaunay.find_simplex(points_query)
    out = np.full(len(points_query), -1)
    for q, s in enumerate(simplex):
        if s < 0 or pre.simplex_cell[s] < 0:
            continue
        x = points_query[q]
        hits, touching = [], []
        for ci in by_parent.get(int(pre.simplex_cell[s]), []):
            margin = _inside_margin(cells[ci], positions, x, dim)
            if margin > tol:
                hits.append(ci)
            elif margin > -tol:
                touching.append(ci)
        if len(hits) == 1 and not touching:
            out[q] = hits[0]
        elif (hits or touching) and any(strict[c] for c in hits + touching):
            raise GeometryError(
                "sublattice atom lies on the boundary of a cell (ambiguous containment)",
                cells[(hits + touching)[0]].vertices,
            )
    return out


def _on_hull(points, tol):
    eq = ConvexHull(points).equations
    return np.max(points @ eq[:, :-1].T + eq[:, -1], axis=1) >= -tol


def _inside_margin(cell, positions, x, dim):
    """Smallest distance from ``x`` to the facet planes, negative if outside."""
    best = math.inf
    for face in cell.faces:
        if dim == 2:
            a, b = positions[face[0]], positions[face[1]]
            t = b - a
            normal = np.array([t[1], -t[0]])
            p0 = a
        else:
            a, b, c = (positions[v] for v in face[:3])
            normal = np.cross(b - a, c - a)
            p0 = a
        normal = normal / np.linalg.norm(normal)
        best = min(best, -float(np.dot(x - p0, normal)))
    return best


def _cone(apex, cell, positions):
    dim = positions.shape[1]
    out = []
    for face in cell.faces:
        if apex in face:
            continue
        verts, faces = _simplex_faces((apex,) + tuple(face), positions)
        out.append(Cell(verts, Shape.TRIANGLE if dim == 2 else Shape.TETRAHEDRON, faces))
    return out


def _sublattice_structure(points, sublattice, relevant_fn=None):
    """Cells and bond dict of the sublattice construction on a point cloud."""
    dim = points.shape[1]
    ids = [np.flatnonzero(sublattice == s) for s in (1, 2)]
    pres, refined = [], []
    edges = {}
    for s in (0, 1):
        sub_pts = points[ids[s]]
        pre = _pretriangulate(sub_pts, relevant=relevant_fn)
        cells, parent, diagonals = _refine(pre)
        pres.append(pre)
        on_hull = _on_hull(sub_pts, 1e-7 * pre.scale)
        strict = [not np.any(on_hull[list(c.vertices)]) for c in cells]
        refined.append((cells, parent, strict))
        for (a, b), _ in _edge_graph(cells, diagonals).items():
            edges[_pair(ids[s][a], ids[s][b])] = BondClass.NNN
    tol = 1e-7 * pres[0].scale
    final_cells = []
    split = {}
    for s in (0, 1):
        other = 1 - s
        cells, parent, strict = refined[s]
        host = _locate(points[ids[other]], pres[s], cells, parent, tol, strict)
        for q, ci in enumerate(host):
            if ci < 0:
                continue
            x = int(ids[other][q])
            for v in cells[ci].vertices:
                edges[_pair(x, ids[s][v])] = BondClass.NN
            if s == 0:
                if ci in split:
                    raise GeometryError(
                        "cell contains more than one atom of the other sublattice",
                        [ids[0][v] for v in cells[ci].vertices],
                    )
                split[ci] = q
    cells0 = refined[0][0]
    for ci, cell in enumerate(cells0):
        gmap = ids[0]
        if ci in split:
            # cone from the enclosed atom, in global ids
            q = split[ci]
            x = int(ids[1][q])
            gcell = _relabel(cell, gmap)
            for piece in _cone(x, gcell, points):
                final_cells.append(piece)
        else:
            final_cells.append(_relabel(cell, gmap))
    return final_cells, edges, dim


def _relabel(cell, gmap):
    verts = tuple(int(gmap[v]) for v in cell.vertices)
    faces = tuple(tuple(int(gmap[v]) for v in f) for f in cell.faces)
    return Cell(verts, cell.shape, faces)


def dc_bond_structure(atoms: AtomSet):
    """Sublattice construction for DC and honeycomb: returns ``(Tessellation, BondGraph)``.

    Each sublattice is pretriangulated and refined on its own (edges are NNN);
    an atom of one sublattice enclosed by a cell of the other is bonded (NN) to
    the cell vertices, and sublattice-1 cells are split around the atoms they
    enclose.
    """
    if not atoms.kind.two_sublattice:
        raise ValueError(f"sublattice construction needs dc or honeycomb, got {atoms.kind.value}")
    cells, edges, _ = _sublattice_structure(atoms.positions, atoms.sublattice)
    return _assemble(cells, atoms.positions), BondGraph.from_dict(edges)


# ---------------------------------------------------------------------------
# triangulations


def _cone_tets(cell, positions, apex):
    if cell.shape in (Shape.TETRAHEDRON, Shape.TRIANGLE):
        return [cell.vertices]
    tets = []
    for face in cell.faces:
        if apex in face:
            continue
        verts = (apex,) + tuple(face)
        vol = _signed_volume(positions[list(verts)][None])[0]
        if abs(vol) < 1e-12:
            continue  # face coplanar with the apex
        verts, _ = _simplex_faces(verts, positions)
        tets.append(verts)
    return tets


def triangulate(tess: Tessellation, positions: np.ndarray, variant: int) -> np.ndarray:
    """Split every octahedron (and polyhedron) by coning from its largest vertex.

    The vertex order is ``(x1, x2, x3)`` for variant 1, ``(x2, x3, x1)`` for
    variant 2 and ``(x3, x1, x2)`` for variant 3; for an octahedron this is the
    cut along the diagonal starting at that vertex.
    """
    return _triangulate_cells(tess.cells, positions, variant)[0]


def _triangulate_cells(cells, positions, variant):
    if variant not in VARIANT_ORDERS:
        raise ValueError(f"variant must be 1, 2 or 3, got {variant}")
    dim = positions.shape[1]
    order = VARIANT_ORDERS[variant][:dim] if dim == 3 else (0, 1)
    out, apexes = [], {}
    for i, cell in enumerate(cells):
        if cell.shape in (Shape.TETRAHEDRON, Shape.TRIANGLE):
            out.append(cell.vertices)
            continue
        if cell.shape is Shape.RAW:
            raise GeometryError("raw polyhedron in a rigid tessellation", cell.vertices)
        apex = cell.vertices[_lex_argmax(cell.vertices, positions, order)]
        apexes[i] = int(apex)
        out.extend(_cone_tets(cell, positions, apex))
    arr = np.array(out, dtype=np.int64).reshape(-1, dim + 1)
    return arr, apexes


def _assemble(cells, positions) -> Tessellation:
    tris, prov = {}, {}
    for v in (1, 2, 3):
        tris[v], prov[v] = _triangulate_cells(cells, positions, v)
    return Tessellation(list(cells), tris, prov)


def octahedron_split(vertices, positions, variant: int) -> tuple:
    """Diagonal ``(apex, opposite)`` used for one octahedron under ``variant``."""
    order = VARIANT_ORDERS[variant]
    apex = vertices[_lex_argmax(vertices, positions, order)]
    d = np.linalg.norm(positions[list(vertices)] - positions[apex], axis=1)
    opposite = vertices[int(np.argmax(d))]
    return int(apex), int(opposite)


# ---------------------------------------------------------------------------
# wires


@dataclass(frozen=True)
class Wire:
    spec: LatticeSpec
    atoms: AtomSet
    tess: Tessellation
    graph: BondGraph
    domain: WireDomain


def _meets_open_box(xi, lower, upper):
    """Whether the convex hull of the rows of ``xi`` meets the open box."""
    inside = np.all((xi > lower) & (xi < upper), axis=1)
    if np.any(inside):
        return True
    if np.any(xi.max(axis=0) <= lower) or np.any(xi.min(axis=0) >= upper):
        return False
    n, d = xi.shape
    # maximise t subject to lower + t <= sum_i w_i xi_i <= upper - t, w in simplex
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A_ub = np.vstack(
        [
            np.hstack([-xi.T, np.ones((d, 1))]),
            np.hstack([xi.T, np.ones((d, 1))]),
        ]
    )
    b_ub = np.concatenate([-lower, upper])
    A_eq = np.append(np.ones(n), 0.0)[None]
    res = linprog(
        c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=[1.0],
        bounds=[(0, None)] * n + [(None, 1.0)], method="highs",
    )
    return bool(res.status == 0 and -res.fun > 1e-10)


def _relevance(kind, lower, upper, margin):
    def fn(points, tri):
        xi = to_lattice_coords(kind, points[tri.simplices].mean(axis=1))
        return np.all((xi > lower - margin) & (xi < upper + margin), axis=1)

    return fn


def build_wire(spec: LatticeSpec, pad: float = 4.0, margin: float = 1.5) -> Wire:
    """Atoms, rigid tessellation and bonds of the closed wire domain."""
    cloud = biphase_points(spec, pad=pad)
    domain = wire_domain(spec)
    lower, upper = domain.lower, domain.upper
    points = cloud.positions
    relevant_fn = _relevance(spec.kind, lower, upper, margin)
    if spec.kind.two_sublattice:
        cells, edges, _ = _sublattice_structure(points, cloud.sublattice, relevant_fn)
    else:
        pre = _pretriangulate(points, relevant=relevant_fn)
        cells, _, diagonals = _refine(pre)
        edges = _edge_graph(cells, diagonals)
    kept = []
    for cell in cells:
        xi = to_lattice_coords(spec.kind, points[list(cell.vertices)])
        if _meets_open_box(xi, lower, upper):
            kept.append(cell)
    keep_ids = np.array(sorted({v for c in kept for v in c.vertices}), dtype=int)
    remap = np.full(len(points), -1)
    remap[keep_ids] = np.arange(len(keep_ids))
    atoms = AtomSet(
        spec.kind,
        points[keep_ids],
        cloud.phase[keep_ids],
        cloud.sublattice[keep_ids],
        cloud.index[keep_ids],
        {"rho": spec.rho, "k": spec.k, "M": spec.M},
    )
    cells_local = [_relabel(c, remap) for c in kept]
    bonds = {}
    for (a, b), cls in edges.items():
        ra, rb = remap[a], remap[b]
        if ra >= 0 and rb >= 0:
            bonds[_pair(ra, rb)] = cls
    tess = _assemble(cells_local, atoms.positions)
    return Wire(spec, atoms, tess, BondGraph.from_dict(bonds), domain)
