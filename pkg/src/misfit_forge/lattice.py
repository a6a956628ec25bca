"""Bulk and biphase lattices restricted to nanowire-shaped slabs.

Positions are in lattice units (bulk nearest-neighbour distance of FCC/HCP
equal to one).  The left phase is the undistorted lattice with lattice
index ``xi_1 < 0``; the right phase is the same lattice scaled by ``rho``
with index ``xi_1 >= 0`` (indices of the right phase live in ``rho * Z``).
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

LEFT = 0
RIGHT = 1

_S2 = math.sqrt(2.0)
_S3 = math.sqrt(3.0)
_S6 = math.sqrt(6.0)


class LatticeKind(str, enum.Enum):
    FCC = "fcc"
    HCP = "hcp"
    BCC = "bcc"
    DC = "dc"
    HONEYCOMB2D = "honeycomb"

    @classmethod
    def parse(cls, value: "str | LatticeKind") -> "LatticeKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {"honeycomb2d": "honeycomb", "diamond": "dc"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown lattice kind {value!r}") from None

    @property
    def dim(self) -> int:
        return 2 if self is LatticeKind.HONEYCOMB2D else 3

    @property
    def two_sublattice(self) -> bool:
        """True for kinds whose bonds come from the sublattice construction."""
        return self in (LatticeKind.DC, LatticeKind.HONEYCOMB2D)


# generators as rows v_1, v_2, v_3 and basis vectors u_1, u_2
_GENERATORS = {
    LatticeKind.FCC: (
        _S2 * np.array([[1.0, 0.0, 0.0], [0.5, 0.5, 0.0], [0.0, 0.5, 0.5]]),
        np.zeros((1, 3)),
    ),
    LatticeKind.HCP: (
        np.array([[0.0, 0.0, 2.0 * _S6 / 3.0], [0.5, _S3 / 2.0, 0.0], [-0.5, _S3 / 2.0, 0.0]]),
        np.array([[0.0, 0.0, 0.0], [0.0, _S3 / 3.0, _S6 / 3.0]]),
    ),
    LatticeKind.BCC: (
        (_S2 / 2.0) * np.array([[-1.0, 1.0, 1.0], [1.0, -1.0, 1.0], [1.0, 1.0, -1.0]]),
        np.zeros((1, 3)),
    ),
    LatticeKind.DC: (
        _S2 * np.array([[1.0, 0.0, 0.0], [0.5, 0.5, 0.0], [0.0, 0.5, 0.5]]),
        np.array([[0.0, 0.0, 0.0], _S2 * np.array([0.25, 0.25, 0.25])]),
    ),
    LatticeKind.HONEYCOMB2D: (
        np.array([[1.0, 0.0], [0.5, _S3 / 2.0]]),
        np.array([[0.0, 0.0], [0.0, _S3 / 3.0]]),
    ),
}

# bulk nearest-neighbour distance of each kind
NN_DISTANCE = {
    LatticeKind.FCC: 1.0,
    LatticeKind.HCP: 1.0,
    LatticeKind.BCC: _S6 / 2.0,
    LatticeKind.DC: _S6 / 4.0,
    LatticeKind.HONEYCOMB2D: _S3 / 3.0,
}


def generators(kind: LatticeKind) -> np.ndarray:
    """Generator vectors as the rows of a ``(dim, dim)`` array."""
    return _GENERATORS[LatticeKind.parse(kind)][0].copy()


def basis(kind: LatticeKind) -> np.ndarray:
    """Basis vectors as the rows of a ``(n_basis, dim)`` array."""
    return _GENERATORS[LatticeKind.parse(kind)][1].copy()


@dataclass(frozen=True)
class LatticeSpec:
    kind: LatticeKind
    rho: float = 1.0
    lam: float = 1.0
    k: int = 1
    M: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "kind", LatticeKind.parse(self.kind))
        for name in ("rho", "lam", "M"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value!r}")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"rho out of (0,1]: {self.rho}")
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"lambda out of (0,1]: {self.lam}")
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k must be a positive integer, got {self.k}")
        object.__setattr__(self, "k", int(self.k))
        if self.M <= 0:
            raise ValueError(f"M must be positive, got {self.M}")

    @property
    def dim(self) -> int:
        return self.kind.dim

    @property
    def interesting(self) -> bool:
        """Whether ``lambda <= rho <= 1``, the regime where the comparison matters."""
        return self.lam <= self.rho <= 1.0

    def replace(self, **changes) -> "LatticeSpec":
        values = dict(kind=self.kind, rho=self.rho, lam=self.lam, k=self.k, M=self.M)
        values.update(changes)
        return LatticeSpec(**values)


@dataclass(frozen=True)
class AtomSet:
    """Indexed atoms; atom ``i`` is row ``i`` of every array.

    ``index`` holds the lattice coordinates of the generating cell, integer for
    the left phase and in ``rho * Z`` for the right phase.
    """

    kind: LatticeKind
    positions: np.ndarray
    phase: np.ndarray
    sublattice: np.ndarray
    index: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("positions", "phase", "sublattice", "index"):
            arr = np.array(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def ids(self) -> np.ndarray:
        return np.arange(len(self))

    def lattice_coords(self) -> np.ndarray:
        """Coordinates of the positions in the generator basis."""
        return to_lattice_coords(self.kind, self.positions)

    def subset(self, mask) -> "AtomSet":
        mask = np.asarray(mask)
        return AtomSet(
            self.kind,
            self.positions[mask],
            self.phase[mask],
            self.sublattice[mask],
            self.index[mask],
            dict(self.meta),
        )


def to_lattice_coords(kind: LatticeKind, positions: np.ndarray) -> np.ndarray:
    V = generators(kind)
    return np.linalg.solve(V.T, np.asarray(positions, dtype=float).T).T


def _index_range(lo: float, hi: float, step: float = 1.0) -> np.ndarray:
    """Multiples ``n * step`` with ``lo <= n * step <= hi``."""
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ValueError(f"non-finite box range ({lo}, {hi})")
    n_lo = math.ceil(lo / step - 1e-9)
    n_hi = math.floor(hi / step + 1e-9)
    return np.arange(n_lo, n_hi + 1)


def _enumerate(kind, ranges, scale, xi1_filter):
    V = generators(kind)
    U = basis(kind)
    axes = [_index_range(lo, hi, scale) for lo, hi in ranges]
    if any(len(a) == 0 for a in axes):
        d = kind.dim
        return np.zeros((0, d)), np.zeros(0, int), np.zeros((0, d))
    grid = np.array(list(itertools.product(*axes)), dtype=float).reshape(-1, kind.dim)
    grid = grid[xi1_filter(grid[:, 0])] * scale
    n_cells = len(grid)
    # ordering: lexicographic in (xi_1, ..., xi_d, j)
    idx = np.repeat(grid, len(U), axis=0)
    sub = np.tile(np.arange(1, len(U) + 1), n_cells)
    pos = idx @ V + scale * U[sub - 1]
    return pos, sub, idx


def generate_bulk(kind: LatticeKind, box) -> AtomSet:
    """All points ``sum xi_i v_i + u_j`` with integer ``xi`` inside ``box``.

    ``box`` is a sequence of closed ``(lo, hi)`` ranges, one per lattice axis.
    """
    kind = LatticeKind.parse(kind)
    box = [tuple(map(float, r)) for r in box]
    if len(box) != kind.dim:
        raise ValueError(f"{kind.value} needs {kind.dim} box ranges, got {len(box)}")
    pos, sub, idx = _enumerate(kind, box, 1.0, lambda x: np.ones(len(x), bool))
    phase = np.where(idx[:, 0] < 0, LEFT, RIGHT) if len(idx) else np.zeros(0, int)
    if kind.two_sublattice:
        sublattice = sub
    else:
        sublattice = np.ones(len(sub), int)
    return AtomSet(kind, pos, phase, sublattice, idx)


def biphase_points(spec: LatticeSpec, pad: float = 3.0) -> AtomSet:
    """Biphase lattice on the slab enlarged by ``pad`` cells in every direction.

    This is the raw cloud from which the closed wire domain is cut; it is not
    closed under the tessellation rule.
    """
    lat = spec.kind
    ranges = [(-spec.M - pad, spec.M + pad)] + [(-pad, spec.k + pad)] * (lat.dim - 1)
    pos_l, sub_l, idx_l = _enumerate(lat, ranges, 1.0, lambda x: x < 0)
    pos_r, sub_r, idx_r = _enumerate(lat, ranges, spec.rho, lambda x: x >= 0)
    pos = np.vstack([pos_l, pos_r])
    sub = np.concatenate([sub_l, sub_r])
    idx = np.vstack([idx_l, idx_r])
    phase = np.concatenate([np.full(len(pos_l), LEFT), np.full(len(pos_r), RIGHT)])
    if not lat.two_sublattice:
        sub = np.ones(len(sub), int)
    order = np.lexsort((sub,) + tuple(idx[:, j] for j in reversed(range(lat.dim))))
    return AtomSet(lat, pos[order], phase[order], sub[order], idx[order])


@dataclass(frozen=True)
class WireDomain:
    """Open slab ``xi_1 in (-M, M)``, ``xi_j in (0, k)`` in the generator basis."""

    kind: LatticeKind
    k: int
    M: float

    @property
    def lower(self) -> np.ndarray:
        return np.array([-self.M] + [0.0] * (self.kind.dim - 1))

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.M] + [float(self.k)] * (self.kind.dim - 1))

    def coords(self, points) -> np.ndarray:
        return to_lattice_coords(self.kind, np.atleast_2d(points))

    def inside(self, points) -> np.ndarray:
        xi = self.coords(points)
        return np.all((xi > self.lower) & (xi < self.upper), axis=1)

    def in_left(self, points) -> np.ndarray:
        return self.inside(points) & (self.coords(points)[:, 0] < 0)

    def in_right(self, points) -> np.ndarray:
        return self.inside(points) & (self.coords(points)[:, 0] >= 0)

    def volume(self) -> float:
        return float(abs(np.linalg.det(generators(self.kind))) * np.prod(self.upper - self.lower))


def wire_domain(spec: LatticeSpec) -> WireDomain:
    return WireDomain(spec.kind, spec.k, spec.M)


def generate_biphase(spec: LatticeSpec) -> AtomSet:
    """Closed biphase wire: vertices of all tessellation cells meeting the open slab."""
    from .tessellation import build_wire

    return build_wire(spec).atoms
