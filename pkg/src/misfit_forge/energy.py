"""Harmonic bond energies of biphase lattices and admissibility of deformations.

Every unordered bond ``{a, b}`` is expanded into the terms of the two
half-weighted sums over ordered pairs: the ordered pair ``(x, y)`` contributes
``1/2 (|u(x) - u(y)| - r_x)^2`` where ``r_x`` is the rest length of the phase
of ``x`` (``r`` on the left, ``lambda * r`` on the right).  A bond inside one
phase therefore carries a single term of weight one, while a bond across the
interface carries two terms of weight one half.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .lattice import LEFT, AtomSet, LatticeKind, LatticeSpec
from .tessellation import BondClass, BondGraph, Shape, Tessellation, _signed_volume

CLASSES = ("LeftBulk", "RightBulk", "CrossInterface", "NNN_1", "NNN_2")

_S2 = math.sqrt(2.0)
_S6_2 = math.sqrt(6.0) / 2.0
DET_TOL = 1e-12


class AdmissibilityError(ValueError):
    pass


def phi(direction) -> float:
    """Anisotropic rest length of a BCC bond along a unit ``direction``.

    ``sqrt(6)/2 + (sqrt(2) - sqrt(6)/2) (3 q - 1) / 2`` with ``q`` the sum of
    fourth powers of the components: ``sqrt(2)`` on the cube axes and
    ``sqrt(6)/2`` on the body diagonals.
    """
    v = np.asarray(direction, dtype=float)
    if v.shape != (3,) or not np.all(np.isfinite(v)):
        raise ValueError(f"phi needs a finite 3-vector, got {direction!r}")
    if abs(np.linalg.norm(v) - 1.0) > 1e-9:
        raise ValueError(f"phi needs a unit vector, |v| = {np.linalg.norm(v)!r}")
    q = float(np.sum(v**4))
    return _S6_2 + (_S2 - _S6_2) * (3.0 * q - 1.0) / 2.0


@dataclass(frozen=True)
class WeightedBond:
    a: int
    b: int
    terms: tuple  # ((weight, rest), ...)
    bond_class: str


@dataclass(frozen=True)
class BondTable:
    """Flat arrays of all energy terms, one row per term."""

    a: np.ndarray
    b: np.ndarray
    weight: np.ndarray
    rest: np.ndarray
    cls: np.ndarray  # index into CLASSES

    def __len__(self):
        return len(self.a)

    @classmethod
    def from_bonds(cls, bonds) -> "BondTable":
        if isinstance(bonds, BondTable):
            return bonds
        rows = [(w.a, w.b, wt, r, CLASSES.index(w.bond_class)) for w in bonds for wt, r in w.terms]
        if not rows:
            z = np.zeros(0)
            return cls(z.astype(int), z.astype(int), z, z, z.astype(int))
        a, b, wt, r, c = zip(*rows)
        return cls(
            np.array(a, dtype=np.int64),
            np.array(b, dtype=np.int64),
            np.array(wt, dtype=float),
            np.array(r, dtype=float),
            np.array(c, dtype=np.int64),
        )

    def atoms(self) -> np.ndarray:
        return np.unique(np.concatenate([self.a, self.b]))


@dataclass(frozen=True)
class EnergyBreakdown:
    total: float
    by_class: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"total": self.total, "by_class": dict(self.by_class)}


def _base_rest(kind, bond_class, pa, pb):
    if kind in (LatticeKind.FCC, LatticeKind.HCP):
        return 1.0
    if kind is LatticeKind.BCC:
        d = pa - pb
        return phi(d / np.linalg.norm(d))
    nn = math.sqrt(6.0) / 4.0 if kind is LatticeKind.DC else math.sqrt(3.0) / 3.0
    return nn if bond_class == BondClass.NN.value else 1.0


def compile_bonds(
    spec: LatticeSpec, atoms: AtomSet, graph: BondGraph, c1: float = 1.0, c2: float = 1.0
) -> list:
    """Expand a bond graph into weighted energy terms."""
    kind = spec.kind
    lam = spec.lam
    pos = atoms.positions
    phase = atoms.phase
    sub = atoms.sublattice
    out = []
    for (a, b), bc in zip(graph.edges, graph.classes):
        a, b = int(a), int(b)
        if phase[a] not in (0, 1) or phase[b] not in (0, 1):
            raise RuntimeError(f"bond ({a}, {b}) has an untagged endpoint")
        r = _base_rest(kind, bc, pos[a], pos[b])
        if bc == BondClass.NNN.value:
            s = int(sub[a])
            scale = c1 if s == 1 else c2
            label = f"NNN_{s}"
        else:
            scale = 1.0
            if phase[a] != phase[b]:
                label = "CrossInterface"
            else:
                label = "LeftBulk" if phase[a] == LEFT else "RightBulk"
        rest_a = r if phase[a] == LEFT else lam * r
        rest_b = r if phase[b] == LEFT else lam * r
        if phase[a] == phase[b]:
            terms = ((scale, rest_a),)
        else:
            terms = ((0.5 * scale, rest_a), (0.5 * scale, rest_b))
        out.append(WeightedBond(a, b, terms, label))
    return out


def _as_positions(deformation, n_atoms=None, needed=None):
    if isinstance(deformation, dict):
        if needed is None:
            needed = range(n_atoms or 0)
        missing = [int(i) for i in needed if int(i) not in deformation]
        if missing:
            raise KeyError(f"deformation missing atom {missing[0]}")
        size = max(deformation) + 1 if deformation else 0
        dim = len(next(iter(deformation.values())))
        arr = np.zeros((size, dim))
        for i, v in deformation.items():
            arr[int(i)] = v
        out = arr
    else:
        out = np.asarray(deformation, dtype=float)
        if needed is not None and len(needed) and int(np.max(needed)) >= len(out):
            raise KeyError(f"deformation missing atom {int(np.max(needed))}")
    if not np.all(np.isfinite(out)):
        raise ValueError("deformation has non-finite entries")
    return out


def bond_lengths(table: BondTable, positions: np.ndarray) -> np.ndarray:
    return np.linalg.norm(positions[table.a] - positions[table.b], axis=1)


def energy(bonds, deformation) -> EnergyBreakdown:
    """Total energy ``sum weight * (length - rest)^2`` with a per-class breakdown."""
    table = BondTable.from_bonds(bonds)
    pos = _as_positions(deformation, needed=table.atoms())
    terms = table.weight * (bond_lengths(table, pos) - table.rest) ** 2
    parts = {name: float(np.sum(terms[table.cls == i])) for i, name in enumerate(CLASSES)}
    return EnergyBreakdown(float(np.sum(terms)), parts)


def energy_value(table: BondTable, positions: np.ndarray) -> float:
    return float(np.sum(table.weight * (bond_lengths(table, positions) - table.rest) ** 2))


def cell_determinant_sign(cell, atoms: AtomSet, deformation) -> float:
    """Determinant of the affine map of a simplex cell: ``det(def edges) / det(ref edges)``."""
    verts = list(cell.vertices if hasattr(cell, "vertices") else cell)
    ref = atoms.positions[verts]
    cur = _as_positions(deformation, needed=verts)[verts]
    d0 = _signed_volume(ref[None])[0]
    if abs(d0) < 1e-14:
        raise RuntimeError(f"degenerate reference cell {verts}")
    return float(_signed_volume(cur[None])[0] / d0)


@dataclass(frozen=True)
class AdmissibilityReport:
    admissible: bool
    violations: list

    def __bool__(self):
        return self.admissible


POLY_SOURCE = 5


def _facet_vertex_tets(cell, reference) -> list:
    """Tetrahedra ``(facet, vertex)`` whose orientation encodes convexity of a cell.

    Only pairs strictly separated in the reference are kept; a vertex lying in
    the plane of a facet (a flat hinge between two triangles of one polygon)
    imposes no condition beyond orientation.
    """
    verts = [int(v) for v in cell.vertices]
    pts = reference[verts]
    scale = float(np.max(np.linalg.norm(pts - pts.mean(axis=0), axis=1)))
    out = []
    for face in cell.faces:
        a, b, c = (int(v) for v in face[:3])
        for v in verts:
            if v in face:
                continue
            vol = _signed_volume(reference[[a, b, c, v]][None])[0]
            if abs(vol) > 1e-9 * scale**3:
                out.append((a, b, c, v))
    return out


def octahedron_diagonals(cell) -> list:
    """The three vertex pairs of an octahedron that are not edges, sorted."""
    edges = cell.edges()
    verts = sorted(int(v) for v in cell.vertices)
    return [(a, b) for i, a in enumerate(verts) for b in verts[i + 1 :] if (a, b) not in edges]


class AdmissibilityChecker:
    """Vectorised admissibility test for one tessellation and reference configuration.

    A deformation is admissible when every simplex of the first triangulation
    keeps its orientation and every octahedron image is convex.  An octahedron
    image is convex exactly when the four simplices around each of its three
    diagonals are positively oriented.  For other polyhedral cells every
    facet must keep the remaining vertices on its inner side, which is again an
    orientation condition on the tetrahedra spanned by a facet and a vertex.
    """

    def __init__(self, tess: Tessellation, reference: np.ndarray):
        self.reference = np.asarray(reference, dtype=float)
        self.tess = tess
        simp = [tess.triangulations[1]]
        src = [np.full(len(tess.triangulations[1]), 1)]
        extra, tags = [], []
        for cell in tess.cells:
            if cell.shape is Shape.OCTAHEDRON:
                for j, (a, _) in enumerate(octahedron_diagonals(cell)):
                    extra.extend((a,) + tuple(f) for f in cell.faces if a not in f)
                    tags.extend([j + 2] * 4)
            elif cell.shape is Shape.POLYHEDRON:
                quads = _facet_vertex_tets(cell, self.reference)
                extra.extend(quads)
                tags.extend([POLY_SOURCE] * len(quads))
        if extra:
            simp.append(np.array(extra, dtype=np.int64))
            src.append(np.array(tags))
        self.simplices = np.vstack(simp) if simp else np.zeros((0, 4), int)
        self.source = np.concatenate(src)
        self.ref_volume = _signed_volume(self.reference[self.simplices])
        if np.any(np.abs(self.ref_volume) < 1e-14):
            raise RuntimeError("degenerate reference simplex in tessellation")

    def ratios(self, positions: np.ndarray) -> np.ndarray:
        return _signed_volume(positions[self.simplices]) / self.ref_volume

    def __call__(self, positions) -> bool:
        return not np.any(self.ratios(positions) <= DET_TOL)

    def report(self, positions, limit: int = 10) -> AdmissibilityReport:
        r = self.ratios(positions)
        bad = np.flatnonzero(r <= DET_TOL)
        violations = []
        for i in bad[:limit]:
            src = int(self.source[i])
            if src == 1:
                reason = "orientation"
            elif src == POLY_SOURCE:
                reason = "convexity (polyhedron facet)"
            else:
                reason = f"convexity (octahedron diagonal {src - 1})"
            violations.append(
                {"simplex": [int(v) for v in self.simplices[i]], "ratio": float(r[i]), "reason": reason}
            )
        return AdmissibilityReport(not violations, violations)


def check_admissible(tess: Tessellation, atoms: AtomSet, deformation) -> AdmissibilityReport:
    """Orientation of the first triangulation plus convexity of octahedron images."""
    pos = _as_positions(deformation, needed=range(len(atoms)))
    return AdmissibilityChecker(tess, atoms.positions).report(pos)
