"""Thickness sweeps, power-law fits, crossover detection and table persistence."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .lattice import LatticeKind, LatticeSpec
from .relax import MinimizeOptions, default_M_schedule, gamma_estimate
from .serialize import atomic_write_text, derive_seed, dumps, fmt_float

log = logging.getLogger(__name__)

CSV_COLUMNS = ("kind", "rho", "lambda", "k", "M", "gamma_hat", "converged")
FAILED = "failed"
WORKERS_ENV = "MISFIT_FORGE_WORKERS"


class DegenerateGroupError(ValueError):
    pass


@dataclass(frozen=True)
class ScalingRow:
    kind: str
    rho: float
    lam: float
    k: int
    M: float
    gamma_hat: float
    converged: bool
    failed: bool = False
    error: str | None = None

    def as_dict(self) -> dict:
        return {
            "kind": self.kind,
            "rho": self.rho,
            "lambda": self.lam,
            "k": self.k,
            "M": self.M,
            "gamma_hat": self.gamma_hat,
            "converged": self.converged,
            "failed": self.failed,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScalingRow":
        return cls(
            kind=str(d["kind"]),
            rho=float(d["rho"]),
            lam=float(d["lambda"]),
            k=int(d["k"]),
            M=float(d["M"]),
            gamma_hat=float(d["gamma_hat"]),
            converged=bool(d["converged"]),
            failed=bool(d.get("failed", False)),
            error=d.get("error"),
        )


def _sort_key(row: ScalingRow):
    return (row.kind, row.lam, row.rho, row.k)


@dataclass
class ScalingTable:
    """Rows of a sweep, kept sorted by ``(kind, lambda, rho, k)``."""

    rows: list = field(default_factory=list)

    def __post_init__(self):
        self.rows = sorted(self.rows, key=_sort_key)
        seen = set()
        for r in self.rows:
            key = (r.kind, r.rho, r.lam, r.k)
            if key in seen:
                raise ValueError(f"duplicate k={r.k} in group kind={r.kind} rho={r.rho} lambda={r.lam}")
            seen.add(key)
            if not r.failed and not r.gamma_hat >= 0:
                raise ValueError(f"gamma_hat must be nonnegative, got {r.gamma_hat} at k={r.k}")

    def __len__(self) -> int:
        return len(self.rows)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ScalingTable):
            return NotImplemented
        return [_row_tuple(r) for r in self.rows] == [_row_tuple(r) for r in other.rows]

    @property
    def any_failed(self) -> bool:
        return any(r.failed for r in self.rows)

    def group(self, rho: float, kind: str | None = None, lam: float | None = None) -> list:
        return [
            r for r in self.rows
            if math.isclose(r.rho, rho, rel_tol=0, abs_tol=1e-12)
            and (kind is None or r.kind == kind)
            and (lam is None or math.isclose(r.lam, lam, rel_tol=0, abs_tol=1e-12))
        ]

    def groups(self) -> dict:
        out = {}
        for r in self.rows:
            out.setdefault((r.kind, r.rho, r.lam), []).append(r)
        return out

    # persistence -------------------------------------------------------

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            conv = FAILED if r.failed else ("true" if r.converged else "false")
            w.writerow([r.kind, fmt_float(r.rho), fmt_float(r.lam), r.k, fmt_float(r.M), fmt_float(r.gamma_hat), conv])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ScalingTable":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}, expected {list(CSV_COLUMNS)}")
        rows = []
        for line in reader:
            flag = line["converged"]
            if flag not in ("true", "false", FAILED):
                raise ValueError(f"bad converged flag {flag!r} at k={line['k']}")
            rows.append(
                ScalingRow(
                    kind=line["kind"],
                    rho=float(line["rho"]),
                    lam=float(line["lambda"]),
                    k=int(line["k"]),
                    M=float(line["M"]),
                    gamma_hat=float(line["gamma_hat"]),
                    converged=flag == "true",
                    failed=flag == FAILED,
                )
            )
        return cls(rows)

    def to_json(self) -> str:
        rows = [_json_safe(r.as_dict()) for r in self.rows]
        return dumps({"columns": list(CSV_COLUMNS), "rows": rows})

    @classmethod
    def from_json(cls, text: str) -> "ScalingTable":
        doc = json.loads(text)
        return cls([ScalingRow.from_dict(_json_restore(d)) for d in doc["rows"]])

    def write(self, path) -> None:
        path = os.fspath(path)
        atomic_write_text(path, self.to_json() if path.endswith(".json") else self.to_csv())

    @classmethod
    def read(cls, path) -> "ScalingTable":
        path = os.fspath(path)
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        return cls.from_json(text) if path.endswith(".json") else cls.from_csv(text)


def _row_tuple(r: ScalingRow):
    g = "nan" if math.isnan(r.gamma_hat) else r.gamma_hat
    return (r.kind, r.rho, r.lam, r.k, r.M, g, r.converged, r.failed)


def _json_safe(d: dict) -> dict:
    g = d["gamma_hat"]
    if isinstance(g, float) and not math.isfinite(g):
        d = dict(d, gamma_hat=None)
    return d


def _json_restore(d: dict) -> dict:
    if d.get("gamma_hat") is None:
        d = dict(d, gamma_hat=float("nan"))
    return d


# ---------------------------------------------------------------------------
# sweeps


def _one_cell(args):
    spec, opts, schedule, estimator = args
    est = estimator or gamma_estimate
    if callable(schedule):
        schedule = schedule(spec)
    planned = float((schedule or default_M_schedule(spec))[-1])
    try:
        g = est(spec, opts, schedule)
        return ScalingRow(spec.kind.value, spec.rho, spec.lam, spec.k, g.M, g.value, bool(g.converged and g.admissible))
    except Exception as exc:  # recorded per row, the sweep continues
        log.warning("sweep cell rho=%g k=%d failed: %s", spec.rho, spec.k, exc)
        return ScalingRow(
            spec.kind.value, spec.rho, spec.lam, spec.k, planned, float("nan"), False, True, f"{type(exc).__name__}: {exc}"
        )


def worker_count(default: int = 1) -> int:
    value = os.environ.get(WORKERS_ENV)
    if value is None:
        return default
    n = int(value)
    if n < 1:
        raise ValueError(f"{WORKERS_ENV} must be a positive integer, got {value!r}")
    return n


def scaling_sweep(
    kind,
    lam: float,
    rho_list,
    k_list,
    opts: MinimizeOptions = MinimizeOptions(),
    M_schedule=None,
    workers: int | None = None,
    estimator=None,
) -> ScalingTable:
    """One transition-energy estimate per ``(rho, k)``.

    Each cell gets the seed ``derive_seed(opts.seed, i_rho, k)``, so results do
    not depend on the worker count. ``M_schedule`` may be a list or a callable
    of the spec; ``None`` uses the default schedule. ``estimator`` replaces
    ``gamma_estimate`` (used for fault injection in tests).
    """
    kind = LatticeKind.parse(kind)
    k_list = [int(k) for k in k_list]
    if not k_list:
        raise ValueError("k_list must be nonempty")
    if any(b <= a for a, b in zip(k_list, k_list[1:])):
        raise ValueError(f"k_list must be increasing, got {k_list}")
    rho_list = [float(r) for r in rho_list]
    if len(set(rho_list)) != len(rho_list):
        raise ValueError(f"rho_list has duplicates: {rho_list}")
    jobs = []
    for i, rho in enumerate(rho_list):
        for k in k_list:
            spec = LatticeSpec(kind, rho=rho, lam=lam, k=k)
            jobs.append((spec, opts.replace(seed=derive_seed(opts.seed, i, k)), M_schedule, estimator))
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_one_cell, jobs))
    else:
        rows = [_one_cell(j) for j in jobs]
    return ScalingTable(rows)


# ---------------------------------------------------------------------------
# analysis


@dataclass(frozen=True)
class PowerLawFit:
    exponent: float
    log_prefactor: float
    r_squared: float
    n_points: int

    def as_dict(self) -> dict:
        return {
            "exponent": self.exponent,
            "log_prefactor": self.log_prefactor,
            "r_squared": self.r_squared,
            "n_points": self.n_points,
        }


def fit_power_law(rows) -> PowerLawFit:
    """Least-squares line through ``(log k, log gamma_hat)``; failed rows are skipped."""
    rows = [r for r in rows if not r.failed]
    if len(rows) < 3:
        raise ValueError(f"power-law fit needs at least 3 successful rows, got {len(rows)}")
    k = np.array([r.k for r in rows], dtype=float)
    g = np.array([r.gamma_hat for r in rows], dtype=float)
    if np.any(g <= 0):
        raise DegenerateGroupError("degenerate group: gamma_hat = 0 cannot be fitted on a log scale")
    x, y = np.log(k), np.log(g)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    r2 = 1.0 if ss_tot == 0 else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return PowerLawFit(float(slope), float(intercept), r2, len(rows))


def _single_setting(table: ScalingTable):
    settings = {(r.kind, r.lam) for r in table.rows}
    if len(settings) != 1:
        raise ValueError(f"table must hold one (kind, lambda) setting, got {sorted(settings)}")
    return settings.pop()


def crossover(table: ScalingTable) -> dict:
    """Smallest sampled ``k`` from which ``gamma(lambda, k) < gamma(1, k)`` holds for all larger ``k``.

    Returns ``{"k_star": int | None}``. Both groups must share the same
    ``k`` grid. A failed row in either group counts as "inequality not shown".
    """
    kind, lam = _single_setting(table)
    defect_free = {r.k: r for r in table.group(1.0)}
    dislocated = {r.k: r for r in table.group(lam)}
    if math.isclose(lam, 1.0):
        raise ValueError("crossover needs lambda < 1 so that the two groups differ")
    if not defect_free or not dislocated:
        raise ValueError("table needs both a rho=1 and a rho=lambda group")
    if sorted(defect_free) != sorted(dislocated):
        raise ValueError(f"k grids differ: rho=1 has {sorted(defect_free)}, rho=lambda has {sorted(dislocated)}")
    k_star = None
    for k in sorted(defect_free, reverse=True):
        a, b = dislocated[k], defect_free[k]
        if a.failed or b.failed or not a.gamma_hat < b.gamma_hat:
            break
        k_star = k
    return {"k_star": k_star}


def plot_data(table: ScalingTable) -> dict:
    """``(log k, log gamma_hat)`` pairs per group, skipping failed and zero rows."""
    out = {}
    for (kind, rho, lam), rows in table.groups().items():
        pts = [(math.log(r.k), math.log(r.gamma_hat)) for r in rows if not r.failed and r.gamma_hat > 0]
        out[f"{kind}/rho={fmt_float(rho)}/lambda={fmt_float(lam)}"] = pts
    return out


def best_rho(table: ScalingTable) -> dict:
    """Empirical minimizing ``rho`` per ``k`` for an optional rho-grid sweep."""
    best = {}
    for r in table.rows:
        if r.failed:
            continue
        if r.k not in best or r.gamma_hat < best[r.k][1]:
            best[r.k] = (r.rho, r.gamma_hat)
    return {k: v[0] for k, v in sorted(best.items())}


def summarize(table: ScalingTable) -> dict:
    """Fits per group plus the crossover, tolerating degenerate or short groups."""
    fits = {}
    for (kind, rho, lam), rows in table.groups().items():
        key = f"{kind}/rho={fmt_float(rho)}/lambda={fmt_float(lam)}"
        try:
            fits[key] = fit_power_law(rows).as_dict()
        except ValueError as exc:
            fits[key] = {"error": str(exc)}
    try:
        cross = crossover(table)
    except ValueError as exc:
        cross = {"k_star": None, "error": str(exc)}
    return {"fits": fits, "crossover": cross, "plot_data": plot_data(table)}
