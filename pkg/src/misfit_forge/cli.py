"""Command-line interface and run orchestration with manifests."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .config import SEED_COUNTERS, ConfigError, RunConfig, parse_config, read_atoms_file
from .energy import check_admissible, compile_bonds, energy
from .experiments import scaling_sweep, summarize
from .lattice import LEFT, LatticeSpec
from .relax import gamma_estimate
from .rigidity import lemma33_discrepancies, octa_diagonal, octa_diagonal_closed_form, verify_rigidity
from .serialize import atomic_write_text, derive_seed, dumps, sha256_file, write_json, xyz_text
from .tessellation import BondClass, BondGraph, Shape, build_wire

log = logging.getLogger("misfit_forge")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_PARTIAL = 3


@dataclass
class RunManifest:
    command: str
    status: str
    config: dict
    applied_defaults: list
    version: str
    seed: int
    wall_time: float
    outputs: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "command": self.command,
            "status": self.status,
            "config": self.config,
            "applied_defaults": list(self.applied_defaults),
            "version": self.version,
            "seed": self.seed,
            "wall_time_s": self.wall_time,
            "outputs": dict(self.outputs),
            "notes": dict(self.notes),
        }


def manifest_path(out: str) -> str:
    return os.path.splitext(out)[0] + ".manifest.json"


def _spec(cfg: RunConfig, M: float | None = None) -> LatticeSpec:
    return LatticeSpec(cfg.kind, rho=cfg.rho_value, lam=cfg.lam, k=cfg.k_value, M=M if M is not None else 1.0)


def _wire(cfg: RunConfig):
    """Wire for the config; an atoms input file must match the regenerated positions."""
    wire = build_wire(_spec(cfg, cfg.M[0]))
    if cfg.atoms:
        pos = np.asarray(read_atoms_file(cfg.atoms)["positions"], dtype=float)
        ref = wire.atoms.positions
        if pos.shape != ref.shape or not np.allclose(pos, ref, rtol=0.0, atol=1e-12):
            raise ConfigError("atoms", f"positions in {cfg.atoms} do not match the lattice built from its parameters")
    return wire


def _read_json(key: str, path: str):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(key, f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(key, f"malformed JSON in {path}: {exc}") from None


def _read_bond_graph(path: str, n_atoms: int) -> BondGraph:
    """Bond graph from a ``bonds`` output file (``{edges: [{a, b, class}]}``)."""
    doc = _read_json("bonds", path)
    edges = doc.get("edges") if isinstance(doc, dict) else None
    if not isinstance(edges, list):
        raise ConfigError("bonds", f"{path} has no edges list")
    pairs, classes = [], []
    for i, e in enumerate(edges):
        try:
            a, b, c = int(e["a"]), int(e["b"]), BondClass(e["class"]).value
        except (KeyError, TypeError, ValueError):
            raise ConfigError(f"bonds.edges[{i}]", f"malformed edge {e!r}") from None
        if not (0 <= a < n_atoms and 0 <= b < n_atoms) or a == b:
            raise ConfigError(f"bonds.edges[{i}]", f"atom ids ({a}, {b}) invalid for {n_atoms} atoms")
        pairs.append((min(a, b), max(a, b)))
        classes.append(c)
    return BondGraph(np.array(pairs, dtype=np.int64).reshape(-1, 2), np.array(classes, dtype=object))


def _deformed(cfg: RunConfig, x: np.ndarray) -> tuple:
    """Deformed positions and their description for the report.

    A deformation file holds a matrix, ``{"F": matrix}`` or ``{"positions": [...]}``.
    """
    dim = x.shape[1]
    d = cfg.deformation
    if d is None:
        return x.copy(), np.eye(dim)
    if not isinstance(d, str):
        F = np.array(d)
        return x @ F.T, F
    doc = _read_json("deformation", d)
    if isinstance(doc, dict) and "positions" in doc:
        y = np.asarray(doc["positions"], dtype=float)
        if y.shape != x.shape or not np.all(np.isfinite(y)):
            raise ConfigError("deformation", f"positions in {d} must be a finite {x.shape[0]}x{dim} array")
        return y, {"positions_file": d}
    F = np.asarray(doc.get("F") if isinstance(doc, dict) else doc, dtype=float)
    if F.shape != (dim, dim) or not np.all(np.isfinite(F)):
        raise ConfigError("deformation", f"{d} must hold a finite {dim}x{dim} matrix")
    return x @ F.T, F


def _interior(wire, margin: float = 1.5) -> np.ndarray:
    xi = wire.domain.coords(wire.atoms.positions)
    lo, hi = wire.domain.lower + margin, wire.domain.upper - margin
    return np.all((xi > lo) & (xi < hi), axis=1)


def _cmd_generate(cfg: RunConfig) -> tuple:
    wire = _wire(cfg)
    a = wire.atoms
    doc = {
        "kind": cfg.kind,
        "rho": cfg.rho_value,
        "lambda": cfg.lam,
        "k": cfg.k_value,
        "M": cfg.M[0],
        "n_atoms": len(a),
        "ids": a.ids,
        "positions": a.positions,
        "tags": ["L" if p == LEFT else "R" for p in a.phase],
        "phase": a.phase,
        "sublattice": a.sublattice,
        "lattice_index": a.index,
    }
    write_json(cfg.out, doc)
    outputs = [cfg.out]
    if cfg.xyz:
        atomic_write_text(cfg.xyz, xyz_text(a.positions, a.phase, f"{cfg.kind} rho={cfg.rho_value} k={cfg.k_value}"))
        outputs.append(cfg.xyz)
    return outputs, "ok", {}


def _cmd_bonds(cfg: RunConfig) -> tuple:
    wire = _wire(cfg)
    n = len(wire.atoms)
    g = wire.graph
    interior = _interior(wire)
    degrees = {}
    for cls in sorted(set(g.classes)):
        deg = g.degree(n, cls)
        degrees[cls] = {
            "all": {str(d): c for d, c in sorted(Counter(deg.tolist()).items())},
            "interior": {str(d): c for d, c in sorted(Counter(deg[interior].tolist()).items())},
        }
    doc = {
        "kind": cfg.kind,
        "n_atoms": n,
        "n_interior": int(interior.sum()),
        "edges": [{"a": int(a), "b": int(b), "class": str(c)} for (a, b), c in zip(g.edges, g.classes)],
        "class_counts": dict(sorted(Counter(str(c) for c in g.classes).items())),
        "cell_counts": {s.value: wire.tess.count(s) for s in Shape if wire.tess.count(s)},
        "degrees": degrees,
    }
    write_json(cfg.out, doc)
    outputs = [cfg.out]
    if cfg.cells:
        cells = [{"vertices": [int(v) for v in c.vertices], "shape": c.shape.value} for c in wire.tess.cells]
        write_json(cfg.cells, {"kind": cfg.kind, "n_atoms": n, "cells": cells})
        outputs.append(cfg.cells)
    if cfg.csv:
        lines = ["a,b,class"] + [f"{int(a)},{int(b)},{c}" for (a, b), c in zip(g.edges, g.classes)]
        atomic_write_text(cfg.csv, "\n".join(lines) + "\n")
        outputs.append(cfg.csv)
    return outputs, "ok", {}


def _cmd_energy(cfg: RunConfig) -> tuple:
    wire = _wire(cfg)
    x = wire.atoms.positions
    graph = wire.graph if not cfg.bonds else _read_bond_graph(cfg.bonds, len(x))
    y, described = _deformed(cfg, x)
    bonds = compile_bonds(wire.spec, wire.atoms, graph, cfg.c1, cfg.c2)
    br = energy(bonds, y)
    rep = check_admissible(wire.tess, wire.atoms, y)
    doc = {
        "deformation": described,
        "energy": br.as_dict(),
        "admissible": rep.admissible,
        "violations": rep.violations,
    }
    write_json(cfg.out, doc)
    return [cfg.out], "ok", {}


def _cmd_verify_rigidity(cfg: RunConfig) -> tuple:
    seed = derive_seed(cfg.seed, SEED_COUNTERS["rigidity"])
    rep = verify_rigidity(cfg.samples, cfg.oct_samples, seed=seed)
    lemma = lemma33_discrepancies(cfg.oct_samples, seed=derive_seed(cfg.seed, SEED_COUNTERS["rigidity"], 1))
    alphas = [np.pi / 3 + j * np.pi / 60 for j in range(21)]
    diag = [
        {"alpha": a, "l3": octa_diagonal(a)[0], "closed_form": octa_diagonal_closed_form(a)} for a in alphas
    ]
    doc = {"rigidity": rep.as_dict(), "lemma33": lemma, "octahedron_diagonal": diag}
    write_json(cfg.out, doc)
    status = "ok" if rep.violation_count == 0 and lemma["discrepancies"] == 0 else "partial"
    return [cfg.out], status, {"violations": rep.violation_count, "lemma33_discrepancies": lemma["discrepancies"]}


def _cmd_gamma(cfg: RunConfig) -> tuple:
    spec = _spec(cfg)
    opts = cfg.minimize_options(derive_seed(cfg.seed, SEED_COUNTERS["relax"]))
    R = None if cfg.rotation is None else np.array(cfg.rotation)
    est = gamma_estimate(spec, opts, list(cfg.M), rotation=R, c1=cfg.c1, c2=cfg.c2)
    write_json(cfg.out, est.as_dict())
    outputs = [cfg.out]
    if cfg.xyz:
        atomic_write_text(cfg.xyz, xyz_text(est.positions, est.phase, f"relaxed {cfg.kind} M={est.M}"))
        outputs.append(cfg.xyz)
    status = "ok" if est.admissible else "partial"
    return outputs, status, {"converged": est.converged}


def _cmd_scaling(cfg: RunConfig, estimator=None) -> tuple:
    opts = cfg.minimize_options(derive_seed(cfg.seed, SEED_COUNTERS["scaling"]))
    table = scaling_sweep(
        cfg.kind, cfg.lam, list(cfg.rho), list(cfg.k), opts,
        M_schedule=None if cfg.M is None else list(cfg.M), estimator=estimator,
    )
    stem = os.path.splitext(cfg.out)[0]
    table.write(cfg.out)
    json_path, fits_path = stem + ".json", stem + ".fits.json"
    if json_path == cfg.out:
        json_path = stem + ".table.json"
    table.write(json_path)
    write_json(fits_path, summarize(table))
    failed = [r.as_dict() for r in table.rows if r.failed]
    return [cfg.out, json_path, fits_path], "partial" if failed else "ok", {"failed_rows": failed}


COMMANDS = {
    "generate": _cmd_generate,
    "bonds": _cmd_bonds,
    "energy": _cmd_energy,
    "verify-rigidity": _cmd_verify_rigidity,
    "gamma": _cmd_gamma,
    "scaling": _cmd_scaling,
}


def run(config, **hooks) -> RunManifest:
    """Execute a validated config, write its outputs and a manifest next to ``out``.

    ``hooks`` are forwarded to the scaling command (``estimator=``) for fault
    injection. Numerical outputs depend only on the config; the manifest also
    carries the wall time and is therefore not byte-stable.
    """
    cfg = config if isinstance(config, RunConfig) else parse_config(config)
    t0 = time.perf_counter()
    fn = COMMANDS[cfg.command]
    outputs, status, notes = fn(cfg, **hooks) if hooks else fn(cfg)
    manifest = RunManifest(
        command=cfg.command,
        status=status,
        config=cfg.to_dict(),
        applied_defaults=list(cfg.applied_defaults),
        version=__version__,
        seed=cfg.seed,
        wall_time=time.perf_counter() - t0,
        outputs={p: sha256_file(p) for p in outputs},
        notes=notes,
    )
    write_json(manifest_path(cfg.out), manifest.as_dict())
    log.info("%s finished with status %s; manifest %s", cfg.command, status, manifest_path(cfg.out))
    return manifest


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser, *, scaling: bool = False, from_file: bool = False) -> None:
    p.add_argument("--kind", required=not from_file, help="fcc, hcp, bcc, dc or honeycomb")
    p.add_argument("--rho", help="reference spacing in (0,1]" + (", comma list" if scaling else ""))
    p.add_argument("--lambda", dest="lambda_", help="lattice mismatch in (0,1]")
    p.add_argument("--k", help="wire thickness" + (", list or range a:b" if scaling else ""))
    p.add_argument("--M", help="clamp half-length or comma-separated schedule")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="primary output path")
    p.add_argument("--c1", help="NNN weight on sublattice 1")
    p.add_argument("--c2", help="NNN weight on sublattice 2")


def _add_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tol-grad")
    p.add_argument("--max-iter")
    p.add_argument("--multistart")
    p.add_argument("--perturbation")
    p.add_argument("--ramp")
    p.add_argument("--method", choices=["newton", "bb"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="misfit-forge", description="Misfit transition energies in biphase nanowires.")
    parser.add_argument("--log-level", default="INFO", help="logging level for standard error")
    parser.add_argument("--error-json", help="write a structured error document here on failure ('-' for stdout)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="atoms of the closed wire")
    _add_common(p)
    p.add_argument("--xyz", help="also write an XYZ file")
    p = sub.add_parser("bonds", help="bond graph, cell counts and coordination")
    _add_common(p, from_file=True)
    p.add_argument("--in", dest="atoms", help="atoms file from generate (supplies the lattice parameters)")
    p.add_argument("--cells", help="also write the cells (vertex ids and shape) as JSON")
    p.add_argument("--csv", help="also write the edges as a flat a,b,class CSV")
    p = sub.add_parser("energy", help="energy and admissibility of a deformation")
    _add_common(p, from_file=True)
    p.add_argument("--atoms", help="atoms file from generate (supplies the lattice parameters)")
    p.add_argument("--bonds", help="bonds file from the bonds command (default: recomputed)")
    p.add_argument(
        "--deformation",
        help="JSON matrix F applied as y = F x, or a JSON file with a matrix or per-atom positions (default identity)",
    )
    p = sub.add_parser("verify-rigidity", help="sampled rigidity constants and octahedron checks")
    p.add_argument("--samples")
    p.add_argument("--oct-samples")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p = sub.add_parser("gamma", help="transition energy estimate over an M schedule")
    _add_common(p)
    _add_opts(p)
    p.add_argument("--rotation", help="JSON rotation matrix for the right clamp")
    p.add_argument("--xyz", help="write the relaxed configuration as XYZ")
    p = sub.add_parser("scaling", help="k sweep over several rho values")
    _add_common(p, scaling=True)
    _add_opts(p)
    p = sub.add_parser("run", help="execute a JSON or YAML configuration file")
    p.add_argument("config")
    return parser


_ARG_KEYS = {
    "kind": "kind", "rho": "rho", "lambda_": "lambda", "k": "k", "M": "M", "seed": "seed", "out": "out",
    "c1": "c1", "c2": "c2", "xyz": "xyz", "samples": "samples", "oct_samples": "oct_samples",
    "atoms": "atoms", "bonds": "bonds", "cells": "cells", "csv": "csv",
}
_OPT_ARGS = ("tol_grad", "max_iter", "multistart", "perturbation", "ramp", "method")
_JSON_ARGS = ("rotation", "deformation")


def args_to_document(ns: argparse.Namespace) -> dict:
    """Flags present on the command line, as a configuration document."""
    doc = {"command": ns.command}
    for attr, key in _ARG_KEYS.items():
        v = getattr(ns, attr, None)
        if v is not None:
            doc[key] = v
    for attr in _JSON_ARGS:
        v = getattr(ns, attr, None)
        if v is not None:
            try:
                doc[attr] = json.loads(v)
            except json.JSONDecodeError as exc:
                if attr == "deformation" and os.path.exists(v):
                    doc[attr] = v
                else:
                    raise ConfigError(attr, f"malformed JSON matrix: {exc}") from None
    opts = {a: getattr(ns, a) for a in _OPT_ARGS if getattr(ns, a, None) is not None}
    if opts:
        doc["opts"] = opts
    return doc


def _emit_error(target: str | None, kind: str, exc: BaseException) -> None:
    if not target:
        return
    doc = {"status": "error", "error_type": kind, "exception": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        doc["key_path"] = exc.path
    if target == "-":
        sys.stdout.write(dumps(doc))
    else:
        write_json(target, doc)


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr, level=getattr(logging, str(ns.log_level).upper(), logging.INFO),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        if ns.command == "run":
            with open(ns.config, encoding="utf-8") as fh:
                cfg = parse_config(fh.read())
        else:
            cfg = parse_config(args_to_document(ns))
    except (ConfigError, OSError) as exc:
        log.error("invalid input: %s", exc)
        _emit_error(ns.error_json, "input", exc)
        return EXIT_USAGE
    try:
        manifest = run(cfg)
    except ConfigError as exc:
        log.error("invalid input: %s", exc)
        _emit_error(ns.error_json, "input", exc)
        return EXIT_USAGE
    except Exception as exc:
        log.error("%s failed: %s: %s", cfg.command, type(exc).__name__, exc)
        _emit_error(ns.error_json, "runtime", exc)
        return EXIT_ERROR
    return EXIT_PARTIAL if manifest.status == "partial" else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
