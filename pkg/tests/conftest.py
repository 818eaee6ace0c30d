import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bihnorm.grid import RadialField

settings.register_profile(
    "bihnorm",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("bihnorm")


def random_field(grid, rng, *, signed=True, n_max=3, width=(0.5, 3.0)) -> RadialField:
    """Smooth random radial field in the admissible discrete space.

    A few Gaussians times even quadratics; the origin value comes from the
    grid's even extrapolation and the boundary value is zero.
    """
    r = grid.nodes
    v = np.zeros_like(r)
    for _ in range(int(rng.integers(1, n_max + 1))):
        w = rng.uniform(*width)
        a = rng.normal() if signed else abs(rng.normal()) + 0.1
        v += a * np.exp(-(r**2) / (2 * w**2)) * (1 + 0.3 * rng.normal() * r**2 / w**2)
    return RadialField(grid, grid.from_free(grid.to_free(v)))


def with_mass(u: RadialField, c: float) -> RadialField:
    return u * np.sqrt(c / u.grid.integrate(u.values**2))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance summary ------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
