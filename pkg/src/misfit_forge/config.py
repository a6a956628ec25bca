"""Run configuration documents: parsing, validation, defaults and normalization."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np
import yaml

from .lattice import LatticeKind
from .relax import METHODS, MinimizeOptions

COMMANDS = ("generate", "bonds", "energy", "verify-rigidity", "gamma", "scaling")

# counter words appended to the root seed, see ``serialize.derive_seed``
SEED_COUNTERS = {"relax": 1, "rigidity": 2, "scaling": 3}

DEFAULT_OUT = {
    "generate": "atoms.json",
    "bonds": "bonds.json",
    "energy": "energy.json",
    "verify-rigidity": "rigidity.json",
    "gamma": "gamma.json",
    "scaling": "sweep.csv",
}

_OPTS_DEFAULTS = MinimizeOptions()
OPTS_KEYS = ("tol_grad", "max_iter", "multistart", "perturbation", "ramp", "method")


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending key path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
        self.detail = message


@dataclass(frozen=True)
class RunConfig:
    command: str
    kind: str
    rho: tuple
    lam: float
    k: tuple
    M: tuple | None
    seed: int
    opts: dict
    out: str
    xyz: str | None = None
    rotation: tuple | None = None
    deformation: tuple | None = None
    c1: float = 1.0
    c2: float = 1.0
    samples: int = 100_000
    oct_samples: int = 1000
    atoms: str | None = None
    bonds: str | None = None
    cells: str | None = None
    csv: str | None = None
    applied_defaults: tuple = field(default=(), compare=False)

    # scalar views for the single-run commands
    @property
    def rho_value(self) -> float:
        return self.rho[0]

    @property
    def k_value(self) -> int:
        return self.k[0]

    def minimize_options(self, seed: int) -> MinimizeOptions:
        return MinimizeOptions(seed=seed, **self.opts)

    def to_dict(self) -> dict:
        """Normalized document; ``parse_config(dumps(to_dict()))`` reproduces ``self``."""
        scalar = self.command != "scaling"
        d = {
            "command": self.command,
            "kind": self.kind,
            "rho": self.rho[0] if scalar else list(self.rho),
            "lambda": self.lam,
            "k": self.k[0] if scalar else list(self.k),
            "M": None if self.M is None else (self.M[0] if self.command in ("generate", "bonds", "energy") else list(self.M)),
            "seed": self.seed,
            "opts": dict(self.opts),
            "out": self.out,
            "xyz": self.xyz,
            "rotation": None if self.rotation is None else [list(r) for r in self.rotation],
            "deformation": (
                self.deformation if self.deformation is None or isinstance(self.deformation, str)
                else [list(r) for r in self.deformation]
            ),
            "c1": self.c1,
            "c2": self.c2,
            "samples": self.samples,
            "oct_samples": self.oct_samples,
            "atoms": self.atoms,
            "bonds": self.bonds,
            "cells": self.cells,
            "csv": self.csv,
        }
        return d


KEYS = (
    "command", "kind", "rho", "lambda", "k", "M", "seed", "opts", "out", "xyz",
    "rotation", "deformation", "c1", "c2", "samples", "oct_samples", "atoms", "bonds", "cells", "csv",
)
# keys an atoms file written by ``generate`` supplies
ATOMS_SPEC_KEYS = ("kind", "rho", "lambda", "k", "M")


def _number(path, value) -> float:
    if isinstance(value, bool):
        raise ConfigError(path, f"malformed number {value!r}")
    if isinstance(value, (int, float)):
        x = float(value)
    elif isinstance(value, str):
        try:
            x = float(value)
        except ValueError:
            raise ConfigError(path, f"malformed number {value!r}") from None
    else:
        raise ConfigError(path, f"malformed number {value!r}")
    if not math.isfinite(x):
        raise ConfigError(path, f"non-finite number {value!r}")
    return x


def _integer(path, value) -> int:
    x = _number(path, value)
    if x != int(x):
        raise ConfigError(path, f"expected an integer, got {value!r}")
    return int(x)


def _unit_interval(path, name, value) -> float:
    x = _number(path, value)
    if not 0.0 < x <= 1.0:
        raise ConfigError(path, f"{name} out of (0,1]: {x}")
    return x


def _list_or_scalar(path, value, convert, allow_range=False):
    if allow_range and isinstance(value, str) and ":" in value:
        parts = value.split(":")
        if len(parts) != 2:
            raise ConfigError(path, f"malformed range {value!r}, expected 'a:b'")
        a, b = (_integer(path, p) for p in parts)
        if b < a:
            raise ConfigError(path, f"empty range {value!r}")
        return [convert(path, v) for v in range(a, b + 1)]
    if isinstance(value, str) and "," in value:
        value = [v for v in value.split(",") if v.strip()]
    if isinstance(value, (list, tuple)):
        if not value:
            raise ConfigError(path, "list must be nonempty")
        return [convert(f"{path}[{i}]", v) for i, v in enumerate(value)]
    return [convert(path, value)]


def _matrix(path, value, dim):
    if not isinstance(value, (list, tuple)) or len(value) != dim:
        raise ConfigError(path, f"expected a {dim}x{dim} matrix")
    rows = []
    for i, row in enumerate(value):
        if not isinstance(row, (list, tuple)) or len(row) != dim:
            raise ConfigError(f"{path}[{i}]", f"expected {dim} entries")
        rows.append(tuple(_number(f"{path}[{i}][{j}]", v) for j, v in enumerate(row)))
    return tuple(rows)


def load_document(text: str) -> dict:
    """JSON, falling back to YAML."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError("", f"malformed configuration document: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("", "configuration must be a mapping")
    return doc


def _path(doc, key):
    v = doc.get(key)
    if v is not None and (not isinstance(v, str) or not v):
        raise ConfigError(key, "expected a nonempty path")
    return v


def read_atoms_file(path: str) -> dict:
    """Atoms document written by ``generate``."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError("atoms", f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("atoms", f"malformed JSON in {path}: {exc}") from None
    if not isinstance(doc, dict) or any(key not in doc for key in ATOMS_SPEC_KEYS + ("positions",)):
        raise ConfigError("atoms", f"{path} is not an atoms file (needs {', '.join(ATOMS_SPEC_KEYS)}, positions)")
    return doc


def _inherit_spec(doc: dict, atoms_doc: dict) -> None:
    """Fill lattice parameters from an atoms file; explicit values must agree with it."""
    for key in ATOMS_SPEC_KEYS:
        given = doc.get(key)
        if given is None:
            doc[key] = atoms_doc[key]
            continue
        same = str(given).lower() == str(atoms_doc[key]).lower()
        if not same and key != "kind":
            try:
                same = math.isclose(float(given), float(atoms_doc[key]), rel_tol=1e-12)
            except (TypeError, ValueError):
                same = False
        if not same:
            raise ConfigError(key, f"{given!r} conflicts with the atoms file value {atoms_doc[key]!r}")


def parse_config(source) -> RunConfig:
    """Validate a configuration document (text or mapping) and apply defaults.

    With an ``atoms`` input file, missing lattice parameters are taken from it.
    """
    doc = load_document(source) if isinstance(source, str) else dict(source)
    for key in doc:
        if key not in KEYS:
            raise ConfigError(str(key), "unknown key")
    atoms_path = _path(doc, "atoms")
    if atoms_path is not None:
        _inherit_spec(doc, read_atoms_file(atoms_path))
    applied = []

    def get(key, default):
        if key in doc and doc[key] is not None:
            return doc[key]
        applied.append(key)
        return default

    command = get("command", "gamma")
    if command not in COMMANDS:
        raise ConfigError("command", f"unknown command {command!r}, expected one of {list(COMMANDS)}")
    if "kind" not in doc:
        raise ConfigError("kind", "missing required key")
    try:
        kind = LatticeKind.parse(doc["kind"])
    except (ValueError, AttributeError):
        raise ConfigError("kind", f"unknown lattice kind {doc['kind']!r}") from None
    dim = kind.dim
    scaling = command == "scaling"

    lam = _unit_interval("lambda", "lambda", get("lambda", 0.8))
    rho_raw = get("rho", sorted({1.0, lam}) if scaling else 1.0)
    rho = _list_or_scalar("rho", rho_raw, lambda p, v: _unit_interval(p, "rho", v))
    k = _list_or_scalar("k", get("k", 2), _integer, allow_range=True)
    for i, kv in enumerate(k):
        if kv < 1:
            raise ConfigError("k" if len(k) == 1 else f"k[{i}]", f"k must be >= 1, got {kv}")
    if not scaling:
        if len(rho) != 1:
            raise ConfigError("rho", f"command {command!r} takes a single rho")
        if len(k) != 1:
            raise ConfigError("k", f"command {command!r} takes a single k")
    else:
        if len(set(rho)) != len(rho):
            raise ConfigError("rho", "duplicate values")
        if any(b <= a for a, b in zip(k, k[1:])):
            raise ConfigError("k", f"k list must be increasing, got {k}")

    M = None
    if doc.get("M") is not None:
        M = _list_or_scalar("M", doc["M"], _number)
        for i, m in enumerate(M):
            if not m > 0:
                raise ConfigError("M" if len(M) == 1 else f"M[{i}]", f"M must be positive, got {m}")
        if any(b <= a for a, b in zip(M, M[1:])):
            raise ConfigError("M", f"M schedule must be increasing, got {M}")
        if command in ("generate", "bonds", "energy") and len(M) != 1:
            raise ConfigError("M", f"command {command!r} takes a single M")
    else:
        applied.append("M")
        if command in ("generate", "bonds", "energy"):
            M = [float(2 * k[0] + 2)]
        elif command == "gamma":
            M = [float(j * k[0] + 2) for j in (2, 3, 4)]
        # scaling keeps None: the default schedule is resolved per k

    seed = _integer("seed", get("seed", 0))
    if seed < 0:
        raise ConfigError("seed", f"seed must be nonnegative, got {seed}")

    opts_doc = doc.get("opts")
    if opts_doc is None:
        opts_doc = {}
        applied.append("opts")
    if not isinstance(opts_doc, dict):
        raise ConfigError("opts", "expected a mapping")
    opts = {}
    for key in opts_doc:
        if key not in OPTS_KEYS:
            raise ConfigError(f"opts.{key}", "unknown key")
    for key in OPTS_KEYS:
        default = getattr(_OPTS_DEFAULTS, key)
        if key not in opts_doc or opts_doc[key] is None:
            if "opts" not in applied:
                applied.append(f"opts.{key}")
            opts[key] = default
            continue
        v = opts_doc[key]
        if key == "method":
            if v not in METHODS:
                raise ConfigError("opts.method", f"unknown method {v!r}, expected one of {list(METHODS)}")
            opts[key] = v
        elif key in ("max_iter", "multistart"):
            opts[key] = _integer(f"opts.{key}", v)
        else:
            opts[key] = _number(f"opts.{key}", v)
    try:
        MinimizeOptions(**opts)
    except ValueError as exc:
        raise ConfigError("opts", str(exc)) from None

    out = get("out", DEFAULT_OUT[command])
    if not isinstance(out, str) or not out:
        raise ConfigError("out", "expected a nonempty path")
    xyz = doc.get("xyz")
    if xyz is not None and (not isinstance(xyz, str) or not xyz):
        raise ConfigError("xyz", "expected a nonempty path")

    rotation = None
    if doc.get("rotation") is not None:
        rotation = _matrix("rotation", doc["rotation"], dim)
        R = np.array(rotation)
        if not np.allclose(R @ R.T, np.eye(dim), atol=1e-10) or np.linalg.det(R) <= 0:
            raise ConfigError("rotation", "expected a proper rotation matrix")
    deformation = None
    if isinstance(doc.get("deformation"), str):
        deformation = _path(doc, "deformation")  # file holding a matrix or per-atom positions
    elif doc.get("deformation") is not None:
        deformation = _matrix("deformation", doc["deformation"], dim)
    inputs = {key: _path(doc, key) for key in ("bonds", "cells", "csv")}

    c1 = _number("c1", get("c1", 1.0))
    c2 = _number("c2", get("c2", 1.0))
    if c1 <= 0 or c2 <= 0:
        raise ConfigError("c1" if c1 <= 0 else "c2", "NNN weights must be positive")
    samples = _integer("samples", get("samples", 100_000))
    oct_samples = _integer("oct_samples", get("oct_samples", 1000))
    if samples < 1 or oct_samples < 1:
        raise ConfigError("samples" if samples < 1 else "oct_samples", "must be >= 1")

    return RunConfig(
        command=command,
        kind=kind.value,
        rho=tuple(rho),
        lam=lam,
        k=tuple(k),
        M=None if M is None else tuple(M),
        seed=seed,
        opts=opts,
        out=out,
        xyz=xyz,
        rotation=rotation,
        deformation=deformation,
        c1=c1,
        c2=c2,
        samples=samples,
        oct_samples=oct_samples,
        atoms=atoms_path,
        applied_defaults=tuple(applied),
        **inputs,
    )


def replace(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **changes)
