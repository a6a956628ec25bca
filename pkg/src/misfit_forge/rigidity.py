"""Distance to rotations and numerical certificates of discrete rigidity.

The tetrahedron estimate bounds ``dist^2(F, SO(3))`` by the squared stretch of
the six unit edges ``w_i`` of the regular tetrahedron.  The octahedron
estimate bounds the same quantity on each of the four tetrahedra around the
``P1 P4`` diagonal by the stretch of the twelve octahedron edges, under the
hypothesis that the deformed octahedron is convex.  The constants are not
known in closed form; they are estimated by sampling and then validated on an
independent sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull
from scipy.spatial.transform import Rotation

from .energy import AdmissibilityChecker
from .tessellation import Cell, Shape, _assemble, _cone_tets, _polygon_facets_3d

_S3 = math.sqrt(3.0)
_S6 = math.sqrt(6.0)

_w1 = np.array([1.0, 0.0, 0.0])
_w2 = np.array([0.5, _S3 / 2.0, 0.0])
_w4 = np.array([0.5, _S3 / 6.0, _S6 / 3.0])
TETRA_W = np.array([_w1, _w2, _w2 - _w1, _w4, _w4 - _w2, _w4 - _w1])

OCTA_P = np.array(
    [
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [1.0, 1.0, 0.0],
        [0.5, 0.5, math.sqrt(2.0) / 2.0],
        [0.5, 0.5, -math.sqrt(2.0) / 2.0],
    ]
)
# P1P2P4P5, P1P2P4P6, P1P3P4P5, P1P3P4P6 (zero-based)
OCTA_TETS = np.array([[0, 1, 3, 4], [0, 1, 3, 5], [0, 2, 3, 4], [0, 2, 3, 5]])
# diagonals P1P4, P2P3, P5P6
OCTA_DIAGONALS = ((0, 3), (1, 2), (4, 5))
OCTA_EDGES = np.array(
    [(i, j) for i in range(6) for j in range(i + 1, 6) if (i, j) not in OCTA_DIAGONALS]
)

SCALES = (0.01, 0.1, 0.3, 1.0)
MARGIN = 1.1


class RigidityDomainError(ValueError):
    """Input outside the hypotheses of a rigidity estimate."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class RigidityGap:
    lhs: float
    rhs: float

    @property
    def ratio(self) -> float | None:
        return self.lhs / self.rhs if self.rhs > 0 else None


# ---------------------------------------------------------------------------
# distance to SO(3)


def _dist2_batch(F: np.ndarray) -> np.ndarray:
    s = np.linalg.svd(F, compute_uv=False)
    return np.sum((s - 1.0) ** 2, axis=-1)


def dist_SO3(F) -> float:
    """Frobenius distance from ``F`` (with ``det F > 0``) to the rotation group."""
    F = np.asarray(F, dtype=float)
    if F.shape != (3, 3) or not np.all(np.isfinite(F)):
        raise ValueError("dist_SO3 needs a finite 3x3 matrix")
    if np.linalg.det(F) <= 0:
        raise RigidityDomainError(f"det F = {np.linalg.det(F):.3g} is not positive")
    return float(math.sqrt(_dist2_batch(F[None])[0]))


def tetra_gap(F) -> RigidityGap:
    """``dist^2(F, SO(3))`` against ``sum (|F w_i| - 1)^2`` over the six edges."""
    lhs = dist_SO3(F) ** 2
    rhs = float(np.sum((np.linalg.norm(TETRA_W @ np.asarray(F).T, axis=1) - 1.0) ** 2))
    return RigidityGap(lhs, rhs)


def _tetra_batch(F):
    lhs = _dist2_batch(F)
    lengths = np.linalg.norm(np.einsum("nij,kj->nki", F, TETRA_W), axis=2)
    return lhs, np.sum((lengths - 1.0) ** 2, axis=1)


# ---------------------------------------------------------------------------
# octahedron


def _octa_checker() -> AdmissibilityChecker:
    faces = _polygon_facets_3d(np.arange(6), OCTA_P)
    cell = Cell(tuple(range(6)), Shape.OCTAHEDRON, tuple(faces))
    return AdmissibilityChecker(_assemble([cell], OCTA_P), OCTA_P)


_CHECKER = None


def octa_checker() -> AdmissibilityChecker:
    """Admissibility checker for the reference octahedron ``O``."""
    global _CHECKER
    if _CHECKER is None:
        _CHECKER = _octa_checker()
    return _CHECKER


def _affine_gradients(images, tets):
    ref = OCTA_P[tets]
    cur = images[..., tets, :]
    D0 = np.swapaxes(ref[:, 1:] - ref[:, :1], -1, -2)
    D1 = np.swapaxes(cur[..., 1:, :] - cur[..., :1, :], -1, -2)
    return D1 @ np.linalg.inv(D0)


def octa_gap(images) -> list:
    """Rigidity gap on each tetrahedron ``T1..T4`` of the ``P1 P4`` split of ``O``.

    ``images`` are the deformed positions of ``P1..P6``.  The deformation must
    be admissible: positive orientation on ``T1..T4`` and a convex image.
    """
    Q = np.asarray(images, dtype=float)
    if Q.shape != (6, 3) or not np.all(np.isfinite(Q)):
        raise ValueError("octa_gap needs six finite points in 3D")
    report = octa_checker().report(Q)
    if not report.admissible:
        raise RigidityDomainError("octahedron deformation is not admissible", report)
    F = _affine_gradients(Q, OCTA_TETS)
    lhs = _dist2_batch(F)
    lengths = np.linalg.norm(Q[OCTA_EDGES[:, 0]] - Q[OCTA_EDGES[:, 1]], axis=1)
    rhs = float(np.sum((lengths - 1.0) ** 2))
    return [RigidityGap(float(v), rhs) for v in lhs]


def _octa_batch(Q):
    """Worst tetrahedron ``lhs`` and the common ``rhs`` for a batch of images."""
    F = _affine_gradients(Q, OCTA_TETS)
    lhs = _dist2_batch(F.reshape(-1, 3, 3)).reshape(len(Q), 4).max(axis=1)
    lengths = np.linalg.norm(Q[:, OCTA_EDGES[:, 0]] - Q[:, OCTA_EDGES[:, 1]], axis=2)
    return lhs, np.sum((lengths - 1.0) ** 2, axis=1)


def octa_diagonal(alpha: float) -> tuple:
    """Edge ``l3 = |Q2 Q5|`` and diagonal ``|Q1 Q4|`` of the one-parameter family.

    All edges of the deformed octahedron have length one except ``Q2 Q5``.
    ``Q2, Q6, Q3, Q5`` lie on a circle of radius ``cos(alpha/2)`` in a plane
    ``p``, consecutive ones separated by the angle ``gamma`` with
    ``cos gamma = 1 - 1/(2 cos^2(alpha/2))``; ``Q1`` and ``Q4`` sit on the
    axis through the centre at height ``+-sin(alpha/2)``.  Once ``3 gamma``
    exceeds a full turn the chain overlaps itself and ``l3`` is reported with
    a negative sign, which keeps it a smooth function of ``alpha``.
    """
    alpha = float(alpha)
    if not 0.0 < alpha < math.pi:
        raise RigidityDomainError(f"alpha out of (0, pi): {alpha}")
    c = math.cos(alpha / 2.0)
    h = math.sin(alpha / 2.0)
    cos_g = 1.0 - 1.0 / (2.0 * c * c)
    if cos_g < -1.0 - 1e-15:
        raise RigidityDomainError(f"construction does not close for alpha = {alpha} (cos gamma = {cos_g})")
    g = math.acos(max(-1.0, cos_g))

    def ring(t):
        return np.array([c * math.cos(t), c * math.sin(t), 0.0])

    Q1, Q4 = np.array([0.0, 0.0, h]), np.array([0.0, 0.0, -h])
    Q2, Q6, Q3, Q5 = (ring(j * g) for j in range(4))
    for a, b in ((Q2, Q6), (Q6, Q3), (Q3, Q5), (Q1, Q2), (Q2, Q4)):
        assert abs(np.linalg.norm(a - b) - 1.0) < 1e-12
    l3 = float(np.linalg.norm(Q2 - Q5))
    if 3.0 * g > 2.0 * math.pi:
        l3 = -l3
    return l3, float(np.linalg.norm(Q1 - Q4))


def octa_diagonal_closed_form(alpha: float) -> float:
    return 3.0 - 1.0 / math.cos(alpha / 2.0) ** 2


# ---------------------------------------------------------------------------
# sampling


def sample_gl_plus(n: int, rng: np.random.Generator, scales=SCALES) -> np.ndarray:
    """``F = R (I + E)`` with ``R`` uniform on SO(3) and ``E`` uniform in ``[-s, s]``.

    The scales are cycled over the samples; draws with ``det F <= 0`` are redrawn.
    """
    out = np.empty((n, 3, 3))
    s = np.resize(np.asarray(scales, dtype=float), n)
    todo = np.arange(n)
    while len(todo):
        R = Rotation.random(len(todo), random_state=rng).as_matrix()
        E = rng.uniform(-1.0, 1.0, size=(len(todo), 3, 3)) * s[todo, None, None]
        F = R @ (np.eye(3) + E)
        ok = np.linalg.det(F) > 0
        out[todo[ok]] = F[ok]
        todo = todo[~ok]
    return out


def sample_octahedra(n: int, rng: np.random.Generator, noise: float = 0.1, admissible=True):
    """Rigidly moved copies of ``O`` with vertexwise noise of sup-norm at most ``noise``."""
    checker = octa_checker()
    out = []
    while len(out) < n:
        m = max(16, 2 * (n - len(out)))
        R = Rotation.random(m, random_state=rng).as_matrix()
        t = rng.normal(size=(m, 1, 3))
        Q = OCTA_P[None] + rng.uniform(-noise, noise, size=(m, 6, 3))
        Q = Q @ np.swapaxes(R, 1, 2) + t
        for q in Q:
            if not admissible or checker(q):
                out.append(q)
                if len(out) == n:
                    break
    return np.array(out)


def convex_by_hull(Q) -> bool:
    """Direct test: the hull of the images has the eight octahedron faces as facets."""
    try:
        hull = ConvexHull(Q)
    except Exception:
        return False
    if len(hull.vertices) != 6 or len(hull.simplices) != 8:
        return False
    expected = {frozenset(f) for f in octa_checker().tess.cells[0].faces}
    return {frozenset(s.tolist()) for s in hull.simplices} == expected


def lemma33_discrepancies(n: int, seed: int = 0, noises=(0.1, 0.25, 0.4)) -> dict:
    """Compare the determinant test against a direct convex-hull test on random octahedra."""
    rng = np.random.default_rng(seed)
    checker = octa_checker()
    t1 = checker.source == 1
    counts = {"samples": 0, "discrepancies": 0, "admissible": 0, "nonconvex_with_t1_positive": 0}
    per = np.resize(np.asarray(noises), n)
    for noise in per:
        q = sample_octahedra(1, rng, noise=float(noise), admissible=False)[0]
        r = checker.ratios(q)
        t1_pos = bool(np.all(r[t1] > 0))
        lhs = t1_pos and convex_by_hull(q)
        rhs = bool(np.all(r > 0))
        counts["samples"] += 1
        counts["discrepancies"] += int(lhs != rhs)
        counts["admissible"] += int(rhs)
        counts["nonconvex_with_t1_positive"] += int(t1_pos and not rhs)
    return counts


@dataclass
class RigidityReport:
    C_tet: float
    C_oct: float
    tet_violations: int
    oct_violations: int
    tet_samples: int
    oct_samples: int
    seed: int
    histogram: dict = field(default_factory=dict)

    @property
    def violation_count(self) -> int:
        return self.tet_violations + self.oct_violations

    def as_dict(self) -> dict:
        return {
            "C_tet": self.C_tet,
            "C_oct": self.C_oct,
            "violation_count": self.violation_count,
            "tet_violations": self.tet_violations,
            "oct_violations": self.oct_violations,
            "tet_samples": self.tet_samples,
            "oct_samples": self.oct_samples,
            "seed": self.seed,
            "histogram": self.histogram,
        }


def _ratios(lhs, rhs):
    keep = rhs > 1e-14
    return lhs[keep] / rhs[keep], int(np.sum(~keep & (lhs > 1e-8)))


def _histogram(r, bins=20):
    counts, edges = np.histogram(np.log10(np.maximum(r, 1e-300)), bins=bins)
    return {"log10_ratio_edges": edges.tolist(), "counts": counts.tolist()}


def verify_rigidity(samples: int = 100_000, oct_samples: int = 1000, seed: int = 7) -> RigidityReport:
    """Fit ``C_tet`` and ``C_oct`` on one sample and count violations on a fresh one."""
    fit_seq, val_seq = np.random.SeedSequence(seed).spawn(2)
    fit_rng, val_rng = np.random.default_rng(fit_seq), np.random.default_rng(val_seq)

    r_fit, bad_fit = _ratios(*_tetra_batch(sample_gl_plus(samples, fit_rng)))
    C_tet = MARGIN * float(r_fit.max())
    lhs, rhs = _tetra_batch(sample_gl_plus(samples, val_rng))
    tet_viol = int(np.sum(lhs > C_tet * rhs)) + bad_fit

    o_fit, bad_o = _ratios(*_octa_batch(sample_octahedra(oct_samples, fit_rng)))
    C_oct = MARGIN * float(o_fit.max())
    lhs, rhs = _octa_batch(sample_octahedra(oct_samples, val_rng))
    oct_viol = int(np.sum(lhs > C_oct * rhs)) + bad_o

    return RigidityReport(
        C_tet,
        C_oct,
        tet_viol,
        oct_viol,
        samples,
        oct_samples,
        seed,
        {"tet": _histogram(r_fit), "oct": _histogram(o_fit)},
    )


def cell_rigidity_gaps(tess, reference: np.ndarray, positions: np.ndarray) -> list:
    """Per-cell ``(shape, lhs, rhs)`` on a unit-edge tessellation.

    ``lhs`` is the largest ``dist^2(grad u, SO(3))`` over the simplices of the
    first triangulation inside the cell; ``rhs`` sums ``(|edge| - 1)^2`` over
    the cell edges.
    """
    out = []
    for ci, cell in enumerate(tess.cells):
        if cell.shape is Shape.TETRAHEDRON:
            tets = [cell.vertices]
        else:
            tets = _cone_tets(cell, reference, tess.provenance[1][ci])
        tets = np.array(tets, dtype=np.int64)
        D0 = np.swapaxes(reference[tets][:, 1:] - reference[tets][:, :1], 1, 2)
        D1 = np.swapaxes(positions[tets][:, 1:] - positions[tets][:, :1], 1, 2)
        lhs = float(_dist2_batch(D1 @ np.linalg.inv(D0)).max())
        edges = np.array(sorted(cell.edges()))
        lengths = np.linalg.norm(positions[edges[:, 0]] - positions[edges[:, 1]], axis=1)
        out.append((cell.shape, lhs, float(np.sum((lengths - 1.0) ** 2))))
    return out
