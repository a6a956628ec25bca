import math
import re

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial import Delaunay

from misfit_forge.lattice import (
    LEFT,
    RIGHT,
    LatticeKind,
    LatticeSpec,
    basis,
    biphase_points,
    generate_bulk,
    generators,
    to_lattice_coords,
    wire_domain,
)
from misfit_forge.tessellation import _meets_open_box

S2, S3, S6 = math.sqrt(2), math.sqrt(3), math.sqrt(6)


def _as_set(points, digits=9):
    return {tuple(np.round(p, digits) + 0.0) for p in points}


class TestLatticeSpec:
    @pytest.mark.parametrize("field,value,msg", [
        ("rho", 1.5, "rho out of (0,1]"),
        ("rho", 0.0, "rho out of (0,1]"),
        ("lam", -0.2, "lambda out of (0,1]"),
    ])
    def test_range_errors(self, field, value, msg):
        kw = dict(kind="fcc", rho=0.8, lam=0.8, k=2, M=3.0)
        kw[field] = value
        with pytest.raises(ValueError, match=re.escape(msg)):
            LatticeSpec(**kw)

    def test_k_must_be_positive(self):
        with pytest.raises(ValueError):
            LatticeSpec("fcc", rho=1.0, lam=1.0, k=0, M=3.0)

    def test_interesting_flag(self):
        assert LatticeSpec("fcc", rho=0.8, lam=0.8, k=2, M=3.0).interesting
        assert LatticeSpec("fcc", rho=1.0, lam=0.8, k=2, M=3.0).interesting
        assert not LatticeSpec("fcc", rho=0.7, lam=0.8, k=2, M=3.0).interesting

    def test_kind_aliases(self):
        assert LatticeKind.parse("diamond") is LatticeKind.DC
        assert LatticeKind.parse("Honeycomb2D") is LatticeKind.HONEYCOMB2D
        with pytest.raises(ValueError):
            LatticeKind.parse("sc")


class TestGenerators:
    @pytest.mark.parametrize("kind,nn", [
        ("fcc", 1.0), ("hcp", 1.0), ("bcc", S6 / 2), ("dc", S6 / 4), ("honeycomb", S3 / 3),
    ])
    def test_nearest_distance(self, kind, nn):
        atoms = generate_bulk(kind, [(-2, 2)] * LatticeKind.parse(kind).dim)
        d = np.linalg.norm(atoms.positions[:, None] - atoms.positions[None], axis=-1)
        d = d[d > 1e-9]
        assert d.min() == pytest.approx(nn, abs=1e-12)

    @pytest.mark.parametrize("kind", list(LatticeKind))
    def test_lattice_coords_inverse(self, kind):
        V = generators(kind)
        xi = np.array([[1.0, -2.0, 0.5][: kind.dim]])
        assert np.allclose(to_lattice_coords(kind, xi @ V), xi)


class TestGenerateBulk:
    def test_fcc_conventional_cube_has_four_atoms(self):
        # oracle: conventional description of FCC as the cube corners plus face centres
        h = S2 / 2
        expected = {(0, 0, 0), (h, h, 0), (h, 0, h), (0, h, h)}
        atoms = generate_bulk("fcc", [(-4, 4)] * 3)
        p = atoms.positions
        inside = np.all((p > -1e-9) & (p < S2 - 1e-9), axis=1)
        assert inside.sum() == 4
        assert _as_set(p[inside]) == _as_set(np.array(sorted(expected)))

    def test_hcp_basis_atom(self):
        atoms = generate_bulk("hcp", [(0, 0)] * 3)
        assert (0.0, round(S3 / 3, 9), round(S6 / 3, 9)) in _as_set(atoms.positions)
        assert len(atoms) == 2

    def test_honeycomb_cell(self):
        atoms = generate_bulk("honeycomb", [(0, 0), (0, 0)])
        assert _as_set(atoms.positions) == {(0.0, 0.0), (0.0, round(S3 / 3, 9))}
        assert set(atoms.sublattice) == {1, 2}

    def test_empty_box(self):
        atoms = generate_bulk("fcc", [(0.2, 0.8), (0, 1), (0, 1)])
        assert len(atoms) == 0

    def test_non_finite_box(self):
        with pytest.raises(ValueError, match="non-finite"):
            generate_bulk("fcc", [(0, math.inf), (0, 1), (0, 1)])

    def test_positions_read_only(self):
        atoms = generate_bulk("bcc", [(0, 1)] * 3)
        with pytest.raises(ValueError):
            atoms.positions[0, 0] = 3.0


class TestWireDomain:
    def test_inside_left(self):
        spec = LatticeSpec("fcc", rho=0.8, lam=0.8, k=1, M=3.0)
        dom = wire_domain(spec)
        x = np.array([-1.0, 0.5, 0.5]) @ generators("fcc")
        assert dom.inside(x)[0] and dom.in_left(x)[0] and not dom.in_right(x)[0]

    def test_outside_transverse(self):
        spec = LatticeSpec("fcc", rho=0.8, lam=0.8, k=2, M=3.0)
        x = np.array([0.5, 2.1, 0.5]) @ generators("fcc")
        assert not wire_domain(spec).inside(x)[0]

    def test_volume(self):
        spec = LatticeSpec("fcc", rho=0.8, lam=0.8, k=2, M=3.0)
        assert wire_domain(spec).volume() == pytest.approx(6 * 4 * S2 / 2)


class TestBiphase:
    def test_right_phase_indices_scaled(self):
        spec = LatticeSpec("fcc", rho=0.8, lam=0.8, k=2, M=3.0)
        pts = biphase_points(spec, pad=1.0)
        right = pts.index[pts.phase == RIGHT]
        assert np.allclose(right / 0.8, np.round(right / 0.8))
        assert np.all(pts.index[pts.phase == LEFT][:, 0] < 0)

    def test_rho_one_is_bulk(self, wire_factory):
        w = wire_factory("fcc", 1.0, 1.0, 2, 3.0)
        xi = to_lattice_coords("fcc", w.atoms.positions)
        assert np.allclose(xi, np.round(xi), atol=1e-9)
        bulk = generate_bulk("fcc", [(-3, 3), (0, 2), (0, 2)])
        open_slab = bulk.positions[w.domain.inside(bulk.positions)]
        assert _as_set(open_slab) <= _as_set(w.atoms.positions)

    def test_right_bulk_distances(self, fcc_wire):
        w = fcc_wire
        p = w.atoms.positions
        xi = to_lattice_coords("fcc", p)
        deep = (w.atoms.phase == RIGHT) & (xi[:, 0] >= 1.0)
        edges = w.graph.select("NN")
        both = deep[edges[:, 0]] & deep[edges[:, 1]]
        assert both.sum() > 10
        lengths = np.linalg.norm(p[edges[both, 0]] - p[edges[both, 1]], axis=1)
        assert np.allclose(lengths, 0.8, atol=1e-12)

    def test_atom_count_matches_independent_closure(self, fcc_wire):
        # oracle: Delaunay of the raw cloud, simplices grouped by circumsphere,
        # groups meeting the open slab contribute their vertices.  Closure uses
        # refined cells, so a five-vertex interface pyramid may contribute only
        # the vertices of its refined tetrahedra; everything else must agree.
        spec = fcc_wire.spec
        pts = biphase_points(spec, pad=3.0).positions
        groups = {}
        for s in Delaunay(pts).simplices:
            P = pts[s]
            A = 2 * (P[1:] - P[0])
            if abs(np.linalg.det(A)) < 1e-10:
                continue
            c = np.linalg.solve(A, np.sum(P[1:] ** 2 - P[0] ** 2, axis=1))
            key = tuple(np.round(np.append(c, np.linalg.norm(P[0] - c)), 6))
            groups.setdefault(key, set()).update(int(v) for v in s)
        dom = fcc_wire.domain
        regular, pyramid = set(), set()
        for verts in groups.values():
            xi = to_lattice_coords("fcc", pts[sorted(verts)])
            if _meets_open_box(xi, dom.lower, dom.upper):
                (pyramid if len(verts) == 5 else regular).update(verts)
        mine = _as_set(fcc_wire.atoms.positions)
        assert len(mine) == len(fcc_wire.atoms)
        assert _as_set(pts[sorted(regular)]) <= mine
        assert mine <= _as_set(pts[sorted(regular | pyramid)])
        assert len(regular) <= len(fcc_wire.atoms) <= len(regular | pyramid)

    def test_cells_meet_slab(self, fcc_wire):
        dom = fcc_wire.domain
        p = fcc_wire.atoms.positions
        for cell in fcc_wire.tess.cells:
            xi = to_lattice_coords("fcc", p[list(cell.vertices)])
            assert _meets_open_box(xi, dom.lower, dom.upper)
            centroid = p[list(cell.vertices)].mean(axis=0)
            if dom.inside(centroid)[0]:
                phases = set(fcc_wire.atoms.phase[list(cell.vertices)])
                side = LEFT if dom.in_left(centroid)[0] else RIGHT
                assert side in phases


@settings(max_examples=25, deadline=None)
@given(
    kind=st.sampled_from(["fcc", "hcp", "bcc", "dc"]),
    lo=st.lists(st.integers(-3, 1), min_size=3, max_size=3),
    size=st.lists(st.integers(0, 2), min_size=3, max_size=3),
)
def test_bulk_count_is_cells_times_basis(kind, lo, size):
    box = [(a, a + s) for a, s in zip(lo, size)]
    atoms = generate_bulk(kind, box)
    n_cells = np.prod([s + 1 for s in size])
    assert len(atoms) == n_cells * len(basis(kind))
    xi = np.floor(to_lattice_coords(kind, atoms.positions - basis(kind)[atoms.sublattice - 1 if kind == "dc" else 0]) + 1e-9)
    assert np.all(xi >= np.array(lo)) and np.all(xi <= np.array(lo) + np.array(size))
