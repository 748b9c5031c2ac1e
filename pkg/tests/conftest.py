import numpy as np
import pytest

from scoremeans.manifold import get_manifold


@pytest.fixture
def rng():
    return np.random.default_rng(2712)


@pytest.fixture
def s2():
    return get_manifold("s2")


@pytest.fixture
def r2():
    return get_manifold("r2")


def random_sphere_points(n, dim=3, seed=0):
    x = np.random.default_rng(seed).normal(size=(n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def sphere_point_at(dist, phi=0.0):
    """Unit vector at geodesic distance ``dist`` from the north pole of S^2."""
    return np.array([np.sin(dist) * np.cos(phi), np.sin(dist) * np.sin(phi), np.cos(dist)])


# acceptance criteria record their verdicts here; printed after the run
ACCEPTANCE = {}


def record_criterion(n, ok, detail=""):
    """Merge one check into criterion ``n``; a criterion passes only if every check does."""
    prev_ok, prev_detail = ACCEPTANCE.get(n, (True, ""))
    ACCEPTANCE[n] = (prev_ok and bool(ok), "; ".join(d for d in (prev_detail, detail) if d))
    print(f"criterion {n} {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
