import json

import numpy as np
import pytest
from scipy.special import gamma

from bihnorm.grid import (
    RadialField,
    bilaplacian,
    grad_seminorm_sq,
    inner,
    lap_seminorm_sq,
    laplacian,
    make_grid,
    mass,
    norms,
    rescale_field,
    sphere_area,
)

from conftest import random_field


def gauss_moment(N, k, alpha):
    """omega * int_0^inf r^(N-1+k) e^(-alpha r^2) dr."""
    return sphere_area(N) * gamma((N + k) / 2) / (2 * alpha ** ((N + k) / 2))


@pytest.mark.parametrize("stretch", [1.0, 1.5, 2.0])
@pytest.mark.parametrize("N", [5, 6, 9])
def test_ball_volume(N, stretch):
    g = make_grid(N, 3.0, 4000, stretch)
    assert np.all(g.weights >= 0)
    exact = sphere_area(N) * 3.0**N / N
    assert g.integrate(np.ones_like(g.nodes)) == pytest.approx(exact, rel=1e-10)


def test_nodes():
    g = make_grid(5, 10.0, 200, 2.0)
    assert g.nodes[0] == 0.0 and np.sum(g.nodes == 0.0) == 1
    assert g.nodes[-1] == pytest.approx(10.0)
    assert np.all(np.diff(g.nodes) > 0)


@pytest.mark.parametrize("bad", [dict(N=4), dict(M=32), dict(R=-1.0)])
def test_make_grid_rejects(bad):
    kw = dict(N=5, R=10.0, M=128, stretch=2.0) | bad
    with pytest.raises(ValueError):
        make_grid(**kw)


def test_gaussian_integral():
    # closed form: omega Gamma(N/2) / 2 = pi^(N/2)
    for N in (5, 7):
        g = make_grid(N, 12.0, 1000, 1.5)
        assert g.integrate(np.exp(-g.nodes**2)) == pytest.approx(np.pi ** (N / 2), rel=1e-8)


def test_quadrature_order():
    f = lambda r: np.exp(-(r**2)) * np.cos(r)
    ref = make_grid(5, 8.0, 8000, 1.0)
    exact = ref.integrate(f(ref.nodes))
    errs = [abs(make_grid(5, 8.0, M, 1.0).integrate(f(make_grid(5, 8.0, M, 1.0).nodes)) - exact) for M in (100, 200)]
    assert errs[0] / errs[1] >= 2**4 * 0.9


def test_lap_of_r_squared():
    g = make_grid(6, 5.0, 400, 1.5)
    lap = g.lap @ g.nodes**2
    assert np.allclose(lap[:-1], 2 * 6, atol=1e-8)


def test_laplacian_gaussian():
    errs = []
    for M in (200, 400):
        g = make_grid(5, 10.0, M, 1.0)
        u = g.sample(lambda r: np.exp(-(r**2) / 2))
        exact = (g.nodes**2 - 5) * np.exp(-(g.nodes**2) / 2)
        errs.append(np.max(np.abs(laplacian(u).values - exact)[:-3]))
    assert errs[1] < 1e-5
    assert errs[0] / errs[1] > 4


def test_bilap_is_composition():
    g = make_grid(5, 10.0, 300, 2.0)
    assert (g.bilap != g.lap @ g.lap).nnz == 0
    # values agree to round-off where the node spacing is not tiny
    g = make_grid(5, 10.0, 300, 1.0)
    u = g.sample(lambda r: np.exp(-(r**2)))
    assert np.allclose(bilaplacian(u).values, laplacian(laplacian(u)).values, rtol=1e-9, atol=1e-9)


def test_gaussian_norms():
    # u = e^(-r^2/2): all four functionals in closed form
    N = 5
    g = make_grid(N, 14.0, 2000, 1.0)
    u = g.sample(lambda r: np.exp(-(r**2) / 2))
    assert mass(u) == pytest.approx(np.pi ** (N / 2), rel=1e-8)
    assert grad_seminorm_sq(u) == pytest.approx(np.pi ** (N / 2) * N / 2, rel=1e-8)
    assert lap_seminorm_sq(u) == pytest.approx(np.pi ** (N / 2) * N * (N + 2) / 4, rel=1e-7)
    assert norms(u, 3.0) == pytest.approx((2 * np.pi / 3) ** (N / 2), rel=1e-8)


def test_zero_field():
    g = make_grid(5, 5.0, 100)
    z = g.zeros()
    assert mass(z) == 0 and norms(z, 3.0) == 0 and lap_seminorm_sq(z) == 0


def test_operator_symmetry(rng):
    g = make_grid(5, 20.0, 800, 1.0)
    u, v = random_field(g, rng), random_field(g, rng)
    a = inner(laplacian(u), v)
    b = inner(u, laplacian(v))
    assert abs(a - b) <= 1e-6 * max(abs(a), 1.0)


def test_rescale_identity_and_scaling():
    g = make_grid(5, 60.0, 2000, 2.0)
    u = g.sample(lambda r: np.exp(-(r**2) / 2) * (1 + 0.2 * r**2))
    assert np.array_equal(rescale_field(u, 0.0).values, u.values)
    for s in (-1.0, 0.7):
        us = rescale_field(u, s)
        assert mass(us) == pytest.approx(mass(u), rel=1e-8)
        assert lap_seminorm_sq(us) == pytest.approx(np.exp(4 * s) * lap_seminorm_sq(u), rel=1e-7)
        assert grad_seminorm_sq(us) == pytest.approx(np.exp(2 * s) * grad_seminorm_sq(u), rel=1e-7)


def test_rescale_warns_on_truncation():
    g = make_grid(5, 4.0, 400, 1.0)
    u = g.sample(lambda r: np.exp(-(r**2) / 2))
    with pytest.warns(RuntimeWarning):
        rescale_field(u, -1.5)


def test_rescale_pchip():
    g = make_grid(5, 30.0, 2000, 1.0)
    u = g.sample(lambda r: np.exp(-(r**2) / 2))
    assert mass(rescale_field(u, 0.5, method="pchip")) == pytest.approx(mass(u), rel=1e-5)
    with pytest.raises(ValueError):
        rescale_field(u, 0.5, method="linear")


@pytest.mark.parametrize("suffix", [".json", ".npz"])
def test_field_roundtrip(tmp_path, rng, suffix):
    g = make_grid(5, 20.0, 300, 1.5)
    u = random_field(g, rng)
    path = tmp_path / f"u{suffix}"
    u.save(path)
    v = RadialField.load(path)
    assert v.grid.M == 300 and v.grid.stretch == 1.5
    assert np.array_equal(u.values, v.values)


def test_field_rejects_bad_version():
    g = make_grid(5, 20.0, 100)
    d = g.zeros().to_dict()
    d["version"] = 99
    with pytest.raises(ValueError):
        RadialField.from_dict(json.loads(json.dumps(d)))


def test_interpolation_inequality(rng):
    g = make_grid(5, 25.0, 1000, 1.5)
    for _ in range(50):
        u = random_field(g, rng)
        assert grad_seminorm_sq(u) <= np.sqrt(lap_seminorm_sq(u) * mass(u)) * (1 + 1e-6)
