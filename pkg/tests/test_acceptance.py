"""Acceptance criteria 1-11. Each test prints one PASS/FAIL line and asserts the verdict."""

import hashlib
import math
import os
from collections import Counter

import numpy as np
import pytest
from scipy.spatial import ConvexHull

from misfit_forge.cli import run
from misfit_forge.energy import BondTable, check_admissible, compile_bonds, energy_value
from misfit_forge.experiments import crossover, fit_power_law, scaling_sweep
from misfit_forge.lattice import LatticeSpec, generate_bulk
from misfit_forge.relax import (
    ClampSpec,
    ClampedProblem,
    MinimizeOptions,
    default_M_schedule,
    full_gradient,
    gamma_estimate,
    random_rotations,
    rotation_invariance_check,
)
from misfit_forge.rigidity import (
    OCTA_P,
    lemma33_discrepancies,
    octa_diagonal,
    octa_gap,
    tetra_gap,
    verify_rigidity,
)
from misfit_forge.tessellation import (
    Shape,
    dc_bond_structure,
    delaunay_pretriangulation,
    nearest_neighbours,
)

pytestmark = pytest.mark.slow

LAM = 0.8
SWEEP_OPTS = MinimizeOptions(multistart=1)
EXPONENT_BANDS = {"dislocated": (1.6, 2.4), "defect_free": (2.6, 3.4)}
# diagnostic only: in 2D the interface is a line, so each band drops by one
EXPONENT_BANDS_2D = {"dislocated": (0.6, 1.4), "defect_free": (1.6, 2.4)}
R2_MIN = 0.95


def _interior(points, margin=1.6):
    eq = ConvexHull(points).equations
    return (-(points @ eq[:, :-1].T + eq[:, -1])).min(axis=1) > margin


def _bulk(kind):
    dim = 2 if kind == "honeycomb" else 3
    return generate_bulk(kind, [(-4, 4)] * dim)


# ---------------------------------------------------------------------------


def test_1_coordination(criterion):
    expected = {"fcc": {"NN": 12}, "hcp": {"NN": 12}, "bcc": {"NN": 14}, "dc": {"NN": 4, "NNN": 12}, "honeycomb": {"NN": 3, "NNN": 6}}
    found = {}
    for kind, want in expected.items():
        atoms = _bulk(kind)
        if "NNN" in want:
            _, graph = dc_bond_structure(atoms)
        else:
            graph = nearest_neighbours(atoms, delaunay_pretriangulation(atoms))
        inner = _interior(atoms.positions)
        found[kind] = {c: sorted(Counter(graph.degree(len(atoms), c)[inner].tolist())) for c in want}
    ok = all(found[k][c] == [v] for k, w in expected.items() for c, v in w.items())
    assert criterion(1, ok, f"interior degrees {found}")


def test_2_bulk_shapes(criterion):
    bad, checked = [], Counter()
    for kind in ("fcc", "hcp", "bcc"):
        atoms = _bulk(kind)
        p = atoms.positions
        inner = _interior(p, 1.0)
        for cell in delaunay_pretriangulation(atoms):
            if not all(inner[list(cell.vertices)]):
                continue
            lengths = sorted(np.linalg.norm(p[a] - p[b]) for a, b in cell.edges())
            if kind == "bcc":
                want = sorted([math.sqrt(6) / 2] * 4 + [math.sqrt(2)] * 2)
                good = cell.shape is Shape.TETRAHEDRON and np.allclose(lengths, want, rtol=0, atol=1e-9)
            else:
                n = {Shape.TETRAHEDRON: 6, Shape.OCTAHEDRON: 12}.get(cell.shape)
                good = n == len(lengths) and np.allclose(lengths, 1.0, rtol=0, atol=1e-9)
            checked[f"{kind} {cell.shape.value}"] += 1
            if not good:
                bad.append((kind, cell.shape.value, lengths))
    ok = not bad and checked["fcc octahedron"] and checked["hcp octahedron"] and checked["bcc tetrahedron"]
    assert criterion(2, bool(ok), f"{len(bad)} nonconforming among interior cells {dict(sorted(checked.items()))}")


def test_3_rigidity_certification(criterion):
    rep = verify_rigidity(samples=100_000, oct_samples=1000, seed=7)
    t = 0.1
    g = tetra_gap((1 + t) * np.eye(3))
    iso_tet = abs(g.ratio - 0.5) < 1e-12
    iso_oct = all(
        abs(o.lhs - 3 * t * t) < 1e-12 and abs(o.rhs - 12 * t * t) < 1e-12 for o in octa_gap((1 + t) * OCTA_P)
    )
    ok = rep.violation_count == 0 and iso_tet and iso_oct
    detail = (
        f"C_tet={rep.C_tet:.4f} C_oct={rep.C_oct:.4f} tet_violations={rep.tet_violations} "
        f"oct_violations={rep.oct_violations} isotropic tet ratio={g.ratio:.15g} octa checkpoint={iso_oct}"
    )
    assert criterion(3, ok, detail)


def test_4_octahedron_convexity_equivalence(criterion):
    out = lemma33_discrepancies(1000, seed=33)
    assert criterion(
        4,
        out["discrepancies"] == 0 and out["samples"] == 1000,
        f"samples={out['samples']} discrepancies={out['discrepancies']} admissible={out['admissible']}",
    )


def test_5_octahedron_diagonal(criterion):
    errs = []
    for j in range(21):
        a = math.pi / 3 + j * math.pi / 60
        errs.append(abs(octa_diagonal(a)[0] - (3 - 1 / math.cos(a / 2) ** 2)))
    at_60 = abs(octa_diagonal(math.pi / 3)[0] - 5 / 3)
    ok = max(errs) < 1e-9 and at_60 < 1e-12
    assert criterion(5, ok, f"max closed-form error {max(errs):.2e}, |l3(pi/3) - 5/3| = {at_60:.2e}")


def test_6_gradient_exactness(criterion, wire_factory):
    w = wire_factory("fcc", LAM, LAM, 2, 4.0)
    table = BondTable.from_bonds(compile_bonds(w.spec, w.atoms, w.graph))
    rng = np.random.default_rng(6)
    worst, sampled, h = 0.0, 0, 1e-6
    for _ in range(3):
        y = w.atoms.positions + 0.03 * rng.standard_normal(w.atoms.positions.shape)
        assert check_admissible(w.tess, w.atoms, y).admissible
        g = full_gradient(table, y)
        for idx in rng.choice(y.size, size=40, replace=False):
            i, j = divmod(int(idx), y.shape[1])
            p, m = y.copy(), y.copy()
            p[i, j] += h
            m[i, j] -= h
            fd = (energy_value(table, p) - energy_value(table, m)) / (2 * h)
            worst = max(worst, abs(fd - g[i, j]) / abs(g[i, j]))
            sampled += 1
    assert criterion(6, worst < 1e-6, f"{sampled} coordinates, max relative error {worst:.2e}")


# ---------------------------------------------------------------------------
# scaling sweeps shared by criteria 7 and 8


@pytest.fixture(scope="module")
def fcc_sweep():
    return scaling_sweep("fcc", LAM, [1.0, LAM], [1, 2, 3, 4, 6, 8], SWEEP_OPTS, workers=1)


@pytest.fixture(scope="module")
def honeycomb_sweep():
    return scaling_sweep("honeycomb", LAM, [1.0, LAM], list(range(2, 9)), SWEEP_OPTS, workers=1)


def _fits(table, ks):
    rows = {rho: [r for r in table.group(rho) if r.k in ks] for rho in (1.0, LAM)}
    return {"defect_free": fit_power_law(rows[1.0]), "dislocated": fit_power_law(rows[LAM])}


def _in_band(fit, band):
    return band[0] <= fit.exponent <= band[1] and fit.r_squared >= R2_MIN


def _describe(fits):
    return ", ".join(f"{g}: exponent {f.exponent:.3f} r2 {f.r_squared:.4f}" for g, f in fits.items())


def test_7_scaling_exponents(criterion, fcc_sweep, honeycomb_sweep, capsys):
    fcc = _fits(fcc_sweep, {1, 2, 3, 4})
    hc = _fits(honeycomb_sweep, set(range(2, 9)))
    ok_fcc = all(_in_band(fcc[g], EXPONENT_BANDS[g]) for g in fcc)
    ok_hc = all(_in_band(hc[g], EXPONENT_BANDS[g]) for g in hc)
    ok_hc_2d = all(_in_band(hc[g], EXPONENT_BANDS_2D[g]) for g in hc)
    with capsys.disabled():
        print("\nFCC gamma_hat (k, rho=1, rho=lambda):")
        for a, b in zip(fcc_sweep.group(1.0), fcc_sweep.group(LAM)):
            print(f"  {a.k}  {a.gamma_hat:.6g}  {b.gamma_hat:.6g}")
        print("honeycomb gamma_hat (k, rho=1, rho=lambda):")
        for a, b in zip(honeycomb_sweep.group(1.0), honeycomb_sweep.group(LAM)):
            print(f"  {a.k}  {a.gamma_hat:.6g}  {b.gamma_hat:.6g}")
        print(f"honeycomb against the 2D bands {EXPONENT_BANDS_2D}: {'inside' if ok_hc_2d else 'outside'}")
    detail = f"FCC k=1..4 [{_describe(fcc)}]; honeycomb k=2..8 [{_describe(hc)}]; bands {EXPONENT_BANDS}, r2 >= {R2_MIN}"
    assert criterion(7, ok_fcc and ok_hc, detail)


def test_8_crossover(criterion, fcc_sweep, honeycomb_sweep):
    fcc = crossover(fcc_sweep)["k_star"]
    hc = crossover(honeycomb_sweep)["k_star"]
    ratios = {r.k: r.gamma_hat / s.gamma_hat for r, s in zip(fcc_sweep.group(LAM), fcc_sweep.group(1.0))}
    detail = (
        f"FCC k=1..8 k_star={fcc}, honeycomb k=2..8 k_star={hc}; "
        f"FCC gamma(lambda)/gamma(1) by k: {', '.join(f'{k}:{v:.3f}' for k, v in ratios.items())}"
    )
    assert criterion(8, fcc is not None, detail)


def test_9_rotation_independence(criterion):
    # the 1/M tail of the clamped problem depends on R, so the clamps sit far out
    spec = LatticeSpec("fcc", rho=LAM, lam=LAM, k=2, M=60.0)
    out = rotation_invariance_check(spec, SWEEP_OPTS, random_rotations(3, 3, seed=1), [60.0, 120.0, 240.0])
    detail = (
        f"values {[round(v, 6) for v in out['values']]} spread {100 * out['spread']:.2f}%; "
        f"M->inf extrapolations {[round(v, 6) for v in out['extrapolated']]} spread {100 * out['extrapolated_spread']:.3f}%"
    )
    assert criterion(9, out["spread"] < 0.05, detail)


def test_10_degenerate_cases(criterion, wire_factory):
    worst_zero = 0.0
    for kind in ("fcc", "hcp", "bcc", "dc", "honeycomb"):
        spec = LatticeSpec(kind, rho=1.0, lam=1.0, k=1, M=1.0)
        est = gamma_estimate(spec, SWEEP_OPTS, default_M_schedule(spec))
        worst_zero = max(worst_zero, max(abs(v) for v in est.values))

    spec = LatticeSpec("fcc", rho=LAM, lam=LAM, k=2, M=10.0)
    est = gamma_estimate(spec, SWEEP_OPTS, [6.0, 8.0, 10.0])
    w = wire_factory("fcc", LAM, LAM, 2, 12.0)
    x = w.atoms.positions
    table = BondTable.from_bonds(compile_bonds(w.spec, w.atoms, w.graph))
    problem = ClampedProblem(w.spec, w.atoms, w.tess, table, ClampSpec(10.0))
    identity = problem.value(problem.pack(x, np.zeros(3)))
    # oracle: direct sum over bonds joining the two phases, each carrying both rest lengths at weight 1/2
    oracle = 0.0
    for (a, b), _ in zip(w.graph.edges, w.graph.classes):
        if w.atoms.phase[a] != w.atoms.phase[b]:
            d = float(np.linalg.norm(x[a] - x[b]))
            oracle += 0.5 * (d - 1.0) ** 2 + 0.5 * (d - LAM) ** 2
    ok = worst_zero < 1e-10 and abs(identity - oracle) < 1e-12 and est.value <= identity
    detail = (
        f"max |gamma_hat| at rho=lambda=1 over 5 lattices {worst_zero:.1e}; "
        f"identity energy {identity:.15g} vs oracle {oracle:.15g}; minimized {est.value:.10g}"
    )
    assert criterion(10, ok, detail)


def _digests(directory):
    out = {}
    for name in sorted(os.listdir(directory)):
        if name.endswith(".manifest.json"):
            continue
        with open(os.path.join(directory, name), "rb") as fh:
            out[name] = hashlib.sha256(fh.read()).hexdigest()
    return out


def test_11_reproducibility(criterion, tmp_path, monkeypatch):
    configs = [
        {"command": "generate", "kind": "hcp", "rho": 0.8, "lambda": 0.8, "k": 2, "xyz": "atoms.xyz"},
        {"command": "bonds", "kind": "dc", "rho": 0.8, "lambda": 0.8, "k": 1, "cells": "cells.json", "csv": "bonds.csv"},
        {"command": "energy", "kind": "bcc", "rho": 0.9, "lambda": 0.8, "k": 1, "deformation": [[1.01, 0, 0], [0, 1, 0], [0, 0, 1]]},
        {"command": "verify-rigidity", "kind": "fcc", "samples": 5000, "oct_samples": 200, "seed": 4},
        {"command": "gamma", "kind": "fcc", "rho": 0.8, "lambda": 0.8, "k": 1, "M": [3, 4], "seed": 9, "xyz": "relaxed.xyz"},
        {"command": "scaling", "kind": "honeycomb", "lambda": 0.8, "k": "2:3", "seed": 2, "opts": {"multistart": 2}},
    ]
    runs = []
    for rep in ("a", "b"):
        d = tmp_path / rep
        d.mkdir()
        monkeypatch.chdir(d)
        for cfg in configs:
            run(cfg)
        runs.append(_digests(d))
    ok = runs[0] == runs[1] and len(runs[0]) >= 10
    assert criterion(11, ok, f"{len(runs[0])} output files over {len(configs)} subcommands, digests identical: {runs[0] == runs[1]}")
