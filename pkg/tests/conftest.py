import functools

import numpy as np
import pytest

from misfit_forge.energy import BondTable, compile_bonds
from misfit_forge.lattice import LatticeSpec
from misfit_forge.tessellation import build_wire


@functools.lru_cache(maxsize=None)
def cached_wire(kind, rho, lam, k, M):
    return build_wire(LatticeSpec(kind, rho=rho, lam=lam, k=k, M=M))


@pytest.fixture(scope="session")
def wire_factory():
    return cached_wire


@pytest.fixture(scope="session")
def fcc_wire():
    return cached_wire("fcc", 0.8, 0.8, 2, 3.0)


@pytest.fixture(scope="session")
def fcc_bonds(fcc_wire):
    spec = fcc_wire.spec
    return BondTable.from_bonds(compile_bonds(spec, fcc_wire.atoms, fcc_wire.graph))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def criterion(request, capsys):
    """Record and print one PASS/FAIL line; returns the verdict for asserting."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} ({detail})"
        request.config.stash[ACCEPTANCE].append((number, line))
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
