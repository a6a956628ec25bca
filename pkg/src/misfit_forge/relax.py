"""Clamped energy minimization and estimates of the transition cost.

Atoms with lattice coordinate ``xi_1 <= -M`` follow the identity, atoms with
``xi_1 >= M`` follow ``x -> (lambda/rho) R x + t_R`` and the atoms in between
are free.  The translation ``t_R`` is optimized together with the free atoms;
the left translation is pinned to zero, which removes the translation gauge.
Every finite ``M`` gives an upper bound for the transition cost, and the bound
can only improve as ``M`` grows.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial.transform import Rotation

from .energy import DET_TOL, AdmissibilityChecker, BondTable, EnergyBreakdown, compile_bonds, energy
from .lattice import NN_DISTANCE, LatticeSpec, generators
from .tessellation import _signed_volume, build_wire

log = logging.getLogger(__name__)

STALL_STEP = 1e-14
METHODS = ("newton", "bb")


class MinimizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClampSpec:
    """Far-field data: identity on the left, ``(lambda/rho) R`` on the right."""

    M: float
    R: np.ndarray | None = None

    def __post_init__(self):
        if not (math.isfinite(self.M) and self.M > 0):
            raise ValueError(f"clamp half-length must be positive, got {self.M}")
        if self.R is not None:
            R = np.array(self.R, dtype=float)
            if R.shape[0] != R.shape[1] or not np.allclose(R @ R.T, np.eye(len(R)), atol=1e-10):
                raise ValueError("R must be a rotation matrix")
            if np.linalg.det(R) <= 0:
                raise ValueError("R must be orientation preserving")
            R.setflags(write=False)
            object.__setattr__(self, "R", R)

    def rotation(self, dim: int) -> np.ndarray:
        return np.eye(dim) if self.R is None else self.R


@dataclass(frozen=True)
class MinimizeOptions:
    tol_grad: float = 1e-8
    max_iter: int = 10_000
    multistart: int = 4
    seed: int = 0
    perturbation: float = 0.02
    ramp: float = 1.0
    method: str = "newton"

    def __post_init__(self):
        if not self.tol_grad > 0:
            raise ValueError(f"tol_grad must be positive, got {self.tol_grad}")
        if int(self.max_iter) != self.max_iter or self.max_iter < 1:
            raise ValueError(f"max_iter must be a positive integer, got {self.max_iter}")
        if int(self.multistart) != self.multistart or self.multistart < 1:
            raise ValueError(f"multistart must be a positive integer, got {self.multistart}")
        if self.perturbation < 0 or not self.ramp > 0:
            raise ValueError("perturbation must be nonnegative and ramp positive")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")

    def replace(self, **changes) -> "MinimizeOptions":
        return dataclasses.replace(self, **changes)


@dataclass
class MinimizeResult:
    positions: np.ndarray
    energy: EnergyBreakdown
    iterations: int
    grad_norm: float
    admissible: bool
    converged: bool
    stalled: bool
    t_R: np.ndarray
    history: list = field(default_factory=list, repr=False)


@dataclass
class GammaEstimate:
    value: float
    kind: str
    rho: float
    lam: float
    k: int
    M: float
    iterations: int
    grad_norm: float
    admissible: bool
    multistart_best_of: int
    converged: bool
    stalled: bool = False
    M_values: list = field(default_factory=list)
    values: list = field(default_factory=list)
    breakdown: dict = field(default_factory=dict)
    positions: np.ndarray | None = field(default=None, repr=False, compare=False)
    phase: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def extrapolated(self) -> float | None:
        """Limit ``M -> infinity`` assuming ``value(M) = a + b / M`` on the last two clamps.

        A diagnostic only; unlike ``value`` it is not an upper bound.
        """
        if len(self.values) < 2:
            return None
        (m0, v0), (m1, v1) = zip(self.M_values[-2:], self.values[-2:])
        return float((m1 * v1 - m0 * v0) / (m1 - m0))

    def as_dict(self) -> dict:
        return {
            "value": self.value,
            "kind": self.kind,
            "rho": self.rho,
            "lambda": self.lam,
            "k": self.k,
            "M": self.M,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "admissible": self.admissible,
            "multistart_best_of": self.multistart_best_of,
            "converged": self.converged,
            "stalled": self.stalled,
            "M_values": list(self.M_values),
            "values": list(self.values),
            "breakdown": dict(self.breakdown),
            "extrapolated": self.extrapolated,
        }


# ---------------------------------------------------------------------------
# gradient


def _term_forces(table: BondTable, pos: np.ndarray):
    d = pos[table.a] - pos[table.b]
    length = np.linalg.norm(d, axis=1)
    if np.any(length == 0.0):
        i = int(np.flatnonzero(length == 0.0)[0])
        raise MinimizationError(f"bond ({table.a[i]}, {table.b[i]}) has zero deformed length")
    coef = 2.0 * table.weight * (length - table.rest) / length
    return coef[:, None] * d, length


def _accumulate(table: BondTable, f: np.ndarray, n: int) -> np.ndarray:
    g = np.empty((n, f.shape[1]))
    for j in range(f.shape[1]):
        g[:, j] = np.bincount(table.a, f[:, j], minlength=n) - np.bincount(table.b, f[:, j], minlength=n)
    return g


def full_gradient(table: BondTable, pos: np.ndarray) -> np.ndarray:
    """Gradient of the energy with respect to every atom position."""
    f, _ = _term_forces(table, pos)
    return _accumulate(table, f, len(pos))


def gradient(bonds, deformation, free) -> dict:
    """Exact gradient with respect to the positions of the ``free`` atoms."""
    table = BondTable.from_bonds(bonds)
    if isinstance(deformation, dict):
        n = max(deformation) + 1
        dim = len(next(iter(deformation.values())))
        pos = np.zeros((n, dim))
        for i, v in deformation.items():
            pos[int(i)] = v
    else:
        pos = np.asarray(deformation, dtype=float)
    free = [int(i) for i in free]
    touching = np.isin(table.a, free) | np.isin(table.b, free)
    sub = BondTable(table.a[touching], table.b[touching], table.weight[touching], table.rest[touching], table.cls[touching])
    g = full_gradient(sub, pos)
    return {i: g[i].copy() for i in free}


# ---------------------------------------------------------------------------
# clamped problem


class ClampedProblem:
    """Energy, gradient and admissibility as functions of the free variables.

    The variable vector stacks the free atom positions followed by ``t_R``.
    """

    def __init__(self, spec: LatticeSpec, atoms, tess, bonds, clamps: ClampSpec):
        self.spec = spec
        self.reference = np.array(atoms.positions, dtype=float)
        self.dim = atoms.dim
        xi1 = atoms.lattice_coords()[:, 0]
        self.M = float(clamps.M)
        self.rotated = not np.allclose(clamps.rotation(atoms.dim), np.eye(atoms.dim))
        self.free = np.flatnonzero(np.abs(xi1) < clamps.M)
        self.left = np.flatnonzero(xi1 <= -clamps.M)
        self.right = np.flatnonzero(xi1 >= clamps.M)
        if len(self.free) == 0:
            raise MinimizationError("no free atoms between the clamps")
        self.A = (spec.lam / spec.rho) * clamps.rotation(self.dim)
        self.table = BondTable.from_bonds(bonds)
        is_free = np.zeros(len(atoms), bool)
        is_free[self.free] = True
        self.is_free = is_free
        act = is_free[self.table.a] | is_free[self.table.b]
        t = self.table
        self.active = BondTable(t.a[act], t.b[act], t.weight[act], t.rest[act], t.cls[act])
        self._right_base = self.reference[self.right] @ self.A.T
        checker = AdmissibilityChecker(tess, self.reference)
        keep = np.any(is_free[checker.simplices], axis=1)
        self._simplices = checker.simplices[keep]
        self._ref_volume = checker.ref_volume[keep]
        self._source = checker.source[keep]

        d = self.dim
        n = len(atoms)
        rows, cols = [], []
        for j, atom in enumerate(self.free):
            rows.extend(atom * d + np.arange(d))
            cols.extend(j * d + np.arange(d))
        t0 = len(self.free) * d
        for atom in self.right:
            rows.extend(atom * d + np.arange(d))
            cols.extend(t0 + np.arange(d))
        self._P = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n * d, t0 + d))

    @property
    def n_vars(self) -> int:
        return (len(self.free) + 1) * self.dim

    def positions(self, z: np.ndarray) -> np.ndarray:
        d = self.dim
        pos = self.reference.copy()
        pos[self.free] = z[:-d].reshape(-1, d)
        pos[self.right] = self._right_base + z[-d:]
        return pos

    def pack(self, pos: np.ndarray, t_R: np.ndarray) -> np.ndarray:
        return np.concatenate([pos[self.free].ravel(), np.asarray(t_R, dtype=float)])

    def value_and_grad(self, z: np.ndarray):
        pos = self.positions(z)
        f, length = _term_forces(self.active, pos)
        e = float(np.sum(self.active.weight * (length - self.active.rest) ** 2))
        g = _accumulate(self.active, f, len(pos))
        return e, np.concatenate([g[self.free].ravel(), g[self.right].sum(axis=0)])

    def hessian(self, z: np.ndarray, modified: bool = False):
        """Sparse Hessian in the free variables.

        With ``modified`` the transverse stiffness of compressed bonds is
        dropped, which makes every bond block positive semidefinite.
        """
        pos = self.positions(z)
        t = self.active
        d = pos[t.a] - pos[t.b]
        length = np.linalg.norm(d, axis=1)
        nrm = d / length[:, None]
        tau = (length - t.rest) / length
        if modified:
            tau = np.maximum(tau, 0.0)
        eye = np.eye(self.dim)
        nn = nrm[:, :, None] * nrm[:, None, :]
        K = 2.0 * t.weight[:, None, None] * (nn + tau[:, None, None] * (eye - nn))
        dim = self.dim
        ia = t.a[:, None] * dim + np.arange(dim)
        ib = t.b[:, None] * dim + np.arange(dim)
        r = np.concatenate([_rows(ia, ia), _rows(ib, ib), _rows(ia, ib), _rows(ib, ia)])
        c = np.concatenate([_cols(ia, ia), _cols(ib, ib), _cols(ia, ib), _cols(ib, ia)])
        v = np.concatenate([K.ravel(), K.ravel(), -K.ravel(), -K.ravel()])
        n = len(pos) * dim
        H = sp.csr_matrix((v, (r, c)), shape=(n, n))
        return (self._P.T @ H @ self._P).tocsc()

    def value(self, z: np.ndarray) -> float:
        pos = self.positions(z)
        d = pos[self.active.a] - pos[self.active.b]
        length = np.linalg.norm(d, axis=1)
        return float(np.sum(self.active.weight * (length - self.active.rest) ** 2))

    def ratios(self, pos: np.ndarray) -> np.ndarray:
        return _signed_volume(pos[self._simplices]) / self._ref_volume

    def admissible(self, z: np.ndarray) -> bool:
        return not np.any(self.ratios(self.positions(z)) <= DET_TOL)

    def breakdown(self, z: np.ndarray) -> EnergyBreakdown:
        return energy(self.table, self.positions(z))

    # initial deformations

    def axis_point(self) -> np.ndarray:
        xi = np.zeros(self.dim)
        xi[1:] = self.spec.k / 2.0
        return xi @ generators(self.spec.kind)

    def _rotation_path(self, s: np.ndarray) -> np.ndarray:
        """Rotations ``R^s`` along the geodesic from the identity to ``R``."""
        R = self.A * (self.spec.rho / self.spec.lam)
        if self.dim == 3:
            rotvec = Rotation.from_matrix(R).as_rotvec()
            return Rotation.from_rotvec(s[:, None] * rotvec).as_matrix()
        th = math.atan2(R[1, 0], R[0, 0]) * s
        c, si = np.cos(th), np.sin(th)
        return np.stack([np.stack([c, -si], -1), np.stack([si, c], -1)], -2)

    def ramp_start(self, width: float) -> np.ndarray:
        """Rod-like blend from the identity to the right clamp across ``|xi_1| <= width``.

        Each cross-section ``xi_1 = t`` is scaled by ``1 + s(t)(lambda/rho - 1)``
        and rotated by ``R^s(t)`` about its own axis point, and the deformed axis
        is the integral of the blended map applied to ``v_1``; outside the ramp
        the map is exactly the left or right clamp.
        """
        V = generators(self.spec.kind)
        v1 = V[0]
        ratio = self.spec.lam / self.spec.rho
        c = self.axis_point()
        x = self.reference
        xi1 = (x @ np.linalg.inv(V))[:, 0]

        def ramp(t):
            return np.clip((t + width) / (2.0 * width), 0.0, 1.0)

        def frame(t):
            sv = ramp(t)
            return (1.0 + sv * (ratio - 1.0))[:, None, None] * self._rotation_path(sv)

        grid = np.linspace(-width, width, 4097)
        f = frame(grid) @ v1
        axis = np.concatenate([[np.zeros(self.dim)], np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(grid)[:, None], axis=0)])
        axis += c - width * v1
        end = axis[-1]
        t = np.clip(xi1, -width, width)
        p = np.stack([np.interp(t, grid, axis[:, j]) for j in range(self.dim)], axis=1)
        p += np.where(xi1 < -width, xi1 + width, 0.0)[:, None] * v1
        F_end = self.A
        p += np.where(xi1 > width, xi1 - width, 0.0)[:, None] * (F_end @ v1)
        r_perp = x - c - xi1[:, None] * v1
        pos = p + np.einsum("nij,nj->ni", frame(xi1), r_perp)
        t_R = end - F_end @ (c + width * v1)
        return self.pack(pos, t_R)

    def default_start(self, ramp: float = 1.0) -> np.ndarray:
        """Narrowest admissible ramp, starting at ``ramp`` and doubling up to ``M``.

        A rotated right clamp is spread over the whole free region, where its
        bending cost is smallest.
        """
        widths = []
        w = self.M if self.rotated else min(ramp, self.M)
        while w < self.M:
            widths.append(w)
            w *= 2.0
        widths.append(self.M)
        for w in widths:
            z = self.ramp_start(w)
            if self.admissible(z):
                return z
        raise MinimizationError("no admissible initial deformation found")

    def perturb(self, z: np.ndarray, rng: np.random.Generator, size: float) -> np.ndarray:
        d = self.dim
        noise = rng.uniform(-size, size, size=len(z))
        noise[-d:] = 0.0
        for _ in range(60):
            if self.admissible(z + noise):
                return z + noise
            noise *= 0.5
        return z


def _rows(ia, ib):
    return np.repeat(ia, ib.shape[1], axis=1).ravel()


def _cols(ia, ib):
    return np.tile(ib, (1, ia.shape[1])).ravel()


def _newton_direction(problem, z, g):
    gn = float(np.linalg.norm(g))
    for modified in (False, True):
        H = problem.hessian(z, modified=modified)
        if modified:
            H = H + sp.identity(H.shape[0], format="csc") * (1e-10 * max(1.0, abs(H.diagonal()).max()))
        try:
            p = spla.splu(H).solve(-g)
        except RuntimeError:
            continue
        if np.all(np.isfinite(p)) and float(g @ p) < -1e-12 * gn * float(np.linalg.norm(p)):
            return p
    return -g


def _backtrack(problem, z, e, g, p, t):
    slope = float(g @ p)
    while t >= STALL_STEP:
        z_new = z + t * p
        if problem.admissible(z_new):
            e_new = problem.value(z_new)
            if e_new <= e + 1e-4 * t * slope:
                return z_new, t
        t *= 0.5
    return None, t


def _newton_descent(problem: ClampedProblem, z0: np.ndarray, opts: MinimizeOptions):
    """Damped Newton iteration with admissibility and Armijo backtracking."""
    z = z0.copy()
    e, g = problem.value_and_grad(z)
    history = [e]
    gnorm = float(np.max(np.abs(g)))
    it, stalled = 0, False
    while gnorm >= opts.tol_grad and it < opts.max_iter:
        p = _newton_direction(problem, z, g)
        z_new, _ = _backtrack(problem, z, e, g, p, 1.0)
        if z_new is None:
            z_new, _ = _backtrack(problem, z, e, g, -g, 1.0 / max(gnorm, 1.0))
            if z_new is None:
                stalled = True
                break
        e_new, g_new = problem.value_and_grad(z_new)
        if e_new >= e and float(np.max(np.abs(g_new))) >= gnorm:
            stalled = True
            break
        z, e, g = z_new, e_new, g_new
        history.append(e)
        gnorm = float(np.max(np.abs(g)))
        it += 1
    return z, e, gnorm, it, stalled, history


def _bb_descent(problem: ClampedProblem, z0: np.ndarray, opts: MinimizeOptions):
    """Monotone gradient descent with Barzilai-Borwein trial steps."""
    z = z0.copy()
    e, g = problem.value_and_grad(z)
    history = [e]
    gnorm = float(np.max(np.abs(g)))
    step = 1e-2 / max(gnorm, 1.0)
    it = 0
    stalled = False
    alternate = False
    while gnorm >= opts.tol_grad and it < opts.max_iter:
        gg = float(g @ g)
        t = step
        while True:
            z_new = z - t * g
            if problem.admissible(z_new):
                e_new = problem.value(z_new)
                if e_new <= e - 1e-4 * t * gg:
                    break
            t *= 0.5
            if t < STALL_STEP:
                stalled = True
                break
        if stalled:
            break
        e_new, g_new = problem.value_and_grad(z_new)
        s = z_new - z
        y = g_new - g
        sy = float(s @ y)
        if sy > 0:
            step = float(s @ s) / sy if not alternate else sy / float(y @ y)
            alternate = not alternate
        else:
            step = 2.0 * t
        step = min(max(step, 1e-12), 1e6)
        z, e, g = z_new, e_new, g_new
        history.append(e)
        gnorm = float(np.max(np.abs(g)))
        it += 1
    return z, e, gnorm, it, stalled, history


def _spot_check(problem: ClampedProblem, z: np.ndarray, rng: np.random.Generator, n: int = 10, h: float = 1e-6):
    _, g = problem.value_and_grad(z)
    for i in rng.choice(len(z), size=min(n, len(z)), replace=False):
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        fd = (problem.value(zp) - problem.value(zm)) / (2.0 * h)
        if abs(fd - g[i]) > 1e-5 * (abs(g[i]) + 1e-2):
            raise MinimizationError(f"gradient check failed at coordinate {i}: {g[i]} vs {fd}")


def minimize(
    spec: LatticeSpec,
    atoms,
    tess,
    bonds,
    clamps: ClampSpec,
    opts: MinimizeOptions = MinimizeOptions(),
    start: np.ndarray | None = None,
) -> MinimizeResult:
    """Best admissible clamped configuration over the multistart replicas.

    ``start``, if given, is a full position array used as the first replica
    (its right-clamp translation is recovered from the clamped atoms).
    """
    problem = ClampedProblem(spec, atoms, tess, bonds, clamps)
    rng = np.random.default_rng(np.random.SeedSequence([opts.seed, 0x5EED]))
    if start is not None:
        start = np.asarray(start, dtype=float)
        if len(problem.right):
            t_R = np.mean(start[problem.right] - problem._right_base, axis=0)
        else:
            t_R = problem.axis_point() - problem.A @ problem.axis_point()
        z0 = problem.pack(start, t_R)
        if not problem.admissible(z0):
            raise MinimizationError("supplied start is not admissible")
    else:
        z0 = problem.default_start(opts.ramp)
    best = None
    for r in range(opts.multistart):
        z = z0 if r == 0 else problem.perturb(z0, rng, opts.perturbation * NN_DISTANCE[spec.kind])
        _spot_check(problem, z, rng)
        descent = _newton_descent if opts.method == "newton" else _bb_descent
        z, e, gnorm, it, stalled, hist = descent(problem, z, opts)
        log.debug("replica %d: E=%.12g |g|=%.3g it=%d stalled=%s", r, e, gnorm, it, stalled)
        if best is None or e < best[1]:
            best = (z, e, gnorm, it, stalled, hist)
    z, e, gnorm, it, stalled, hist = best
    pos = problem.positions(z)
    return MinimizeResult(
        positions=pos,
        energy=problem.breakdown(z),
        iterations=it,
        grad_norm=gnorm,
        admissible=problem.admissible(z),
        converged=gnorm < opts.tol_grad,
        stalled=stalled,
        t_R=z[-problem.dim :].copy(),
        history=hist,
    )


def default_M_schedule(spec: LatticeSpec) -> list:
    """Clamp half-lengths growing with the thickness: ``2k+2, 3k+2, 4k+2``."""
    return [float(j * spec.k + 2) for j in (2, 3, 4)]


def gamma_estimate(
    spec: LatticeSpec,
    opts: MinimizeOptions = MinimizeOptions(),
    M_schedule=None,
    rotation=None,
    c1: float = 1.0,
    c2: float = 1.0,
) -> GammaEstimate:
    """Minimized transition energy for each clamp half-length in ``M_schedule``.

    One wire long enough for the largest ``M`` is generated; each later run
    starts from the previous minimizer, which stays admissible when more atoms
    are released, so the values are nonincreasing in ``M``.
    """
    schedule = [float(m) for m in (M_schedule or default_M_schedule(spec))]
    if any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError(f"M schedule must be increasing, got {schedule}")
    wire = build_wire(spec.replace(M=schedule[-1] + 2.0))
    bonds = BondTable.from_bonds(compile_bonds(spec, wire.atoms, wire.graph, c1, c2))
    values, total_it, start, res = [], 0, None, None
    for j, M in enumerate(schedule):
        run_opts = opts if j == 0 else opts.replace(multistart=1)
        clamps = ClampSpec(M, rotation)
        res = minimize(spec, wire.atoms, wire.tess, bonds, clamps, run_opts, start)
        if start is not None and rotation is not None and not np.allclose(rotation, np.eye(spec.dim)):
            # a rotation spread over the whole free region can beat the warm start
            fresh = minimize(spec, wire.atoms, wire.tess, bonds, clamps, run_opts, None)
            if fresh.energy.total < res.energy.total:
                res = fresh
        values.append(res.energy.total)
        total_it += res.iterations
        start = res.positions
        log.info("gamma %s rho=%g lam=%g k=%d M=%g: %.10g (|g|=%.2e, %d it)",
                 spec.kind.value, spec.rho, spec.lam, spec.k, M, res.energy.total, res.grad_norm, res.iterations)
    value = values[-1]
    if len(values) >= 2:
        prev = values[-2]
        converged = abs(prev - value) <= 0.01 * max(abs(prev), abs(value)) or max(abs(prev), abs(value)) < 1e-12
    else:
        converged = False
    return GammaEstimate(
        value=float(value),
        kind=spec.kind.value,
        rho=spec.rho,
        lam=spec.lam,
        k=spec.k,
        M=schedule[-1],
        iterations=total_it,
        grad_norm=res.grad_norm,
        admissible=res.admissible,
        multistart_best_of=opts.multistart,
        converged=converged,
        stalled=res.stalled,
        M_values=schedule,
        values=[float(v) for v in values],
        breakdown=res.energy.by_class,
        positions=res.positions,
        phase=wire.atoms.phase,
    )


def random_rotations(n: int, dim: int, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    if dim == 3:
        return list(Rotation.random(n, random_state=rng).as_matrix())
    out = []
    for th in rng.uniform(-math.pi, math.pi, size=n):
        out.append(np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]]))
    return out


def rotation_invariance_check(spec: LatticeSpec, opts: MinimizeOptions, rotations, M_schedule=None) -> dict:
    """Transition energy for several right-clamp rotations and their relative spread."""
    values, estimates = [], []
    for R in rotations:
        est = gamma_estimate(spec, opts, M_schedule, rotation=np.asarray(R, dtype=float))
        values.append(est.value)
        estimates.append(est.as_dict())
    extra = [e["extrapolated"] for e in estimates]
    return {
        "values": values,
        "spread": _spread(values),
        "extrapolated": extra,
        "extrapolated_spread": _spread(extra) if None not in extra else None,
        "estimates": estimates,
    }


def _spread(values) -> float:
    lo, hi = min(values), max(values)
    return 0.0 if hi == lo else (hi - lo) / max(abs(lo), 1e-300)
