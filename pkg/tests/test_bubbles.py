import json
import warnings

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from bihnorm.bubbles import (
    AsymptoticFit,
    BubbleSpec,
    bubble,
    bubble_field,
    bubble_integrals,
    cutoff,
    default_bubble_grid,
    expected_orders,
    field_profile,
    fit_orders,
    fit_slope,
    g_eps_max,
    normalized_coefficients,
    ratio_vanishing_check,
)
from bihnorm.constants import ProblemParams, bubble_prefactor, critical_exponents, sobolev_integrals
from bihnorm.functional import fiber_derivative
from bihnorm.grid import grad_seminorm_sq, lap_seminorm_sq, make_grid, mass

EPS = (0.2, 0.1, 0.05, 0.025)


@pytest.mark.parametrize("kw", [dict(epsilon=0.0), dict(epsilon=0.1, inner=2.0, outer=1.0), dict(epsilon=0.1, smoothness="cubic")])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        BubbleSpec(**kw)


def test_cutoff_shape():
    spec = BubbleSpec(0.1)
    r = np.linspace(0, 3, 3001)
    psi, d1, d2 = cutoff(spec, r)
    assert np.all((psi >= 0) & (psi <= 1))
    assert np.all(psi[r <= 1] == 1) and np.all(psi[r >= 2] == 0)
    assert np.all(np.diff(psi) <= 0)
    # C^2 at both ends of the transition
    for r0 in (1.0, 2.0):
        _, a1, a2 = cutoff(spec, np.array([r0 - 1e-6, r0 + 1e-6]))
        assert np.all(np.abs(a1) < 1e-9) and np.all(np.abs(a2) < 1e-4)
    # derivatives match finite differences
    h = 1e-5
    x = np.linspace(1.05, 1.95, 19)
    assert np.allclose(cutoff(spec, x)[1], (cutoff(spec, x + h)[0] - cutoff(spec, x - h)[0]) / (2 * h), atol=1e-8)
    assert np.allclose(cutoff(spec, x)[2], (cutoff(spec, x + h)[1] - cutoff(spec, x - h)[1]) / (2 * h), atol=1e-6)


def test_bubble_values():
    assert bubble(5, 1.0, 0.0)[0] == pytest.approx(bubble_prefactor(5))
    assert bubble_prefactor(5) == pytest.approx(105 ** (1 / 8))


@pytest.mark.parametrize("N", [5, 6, 8, 9])
def test_bubble_laplacian_formula(N):
    # Lap U = U'' + (N-1) U' / r checked against differences of U'
    eps, h = 0.3, 1e-6
    r = np.linspace(0.05, 2.0, 40)
    U, dU, lapU = bubble(N, eps, r)
    d2 = (bubble(N, eps, r + h)[1] - bubble(N, eps, r - h)[1]) / (2 * h)
    assert np.allclose(lapU, d2 + (N - 1) * dU / r, rtol=1e-7)
    dfd = (bubble(N, eps, r + h)[0] - bubble(N, eps, r - h)[0]) / (2 * h)
    assert np.allclose(dU, dfd, rtol=1e-7)


def test_field_profile_plateau_and_support():
    spec = BubbleSpec(0.1)
    r = np.linspace(0, 3, 301)
    u, _, lap = field_profile(spec, 5, r)
    U, _, lapU = bubble(5, 0.1, r)
    assert np.array_equal(u[r <= 1], U[r <= 1]) and np.array_equal(lap[r <= 1], lapU[r <= 1])
    assert np.all(u[r >= 2] == 0)


def test_bubble_field_warnings():
    with pytest.warns(RuntimeWarning, match="under-resolved"):
        bubble_field(BubbleSpec(0.01), make_grid(5, 2.0, 100, 1.0))
    with pytest.warns(RuntimeWarning, match="truncated"):
        bubble_field(BubbleSpec(0.5), make_grid(5, 1.5, 400, 2.0))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        bubble_field(BubbleSpec(0.05), default_bubble_grid(5))


def test_expected_orders_case_table():
    def table(N, p):
        return {e.quantity: e for e in expected_orders(ProblemParams(N, p, 1.0))}

    t = table(5, 3.0)
    assert t["p_norm"].order == pytest.approx(1.5) and not t["p_norm"].log_factor
    t = table(5, 5.0)
    assert t["p_norm"].order == pytest.approx(2.5) and t["p_norm"].log_factor
    t = table(5, 7.0)
    assert t["p_norm"].order == pytest.approx(5 - 3.5)
    assert table(8, 3.0)["grad_norm"].log_factor and table(8, 3.0)["grad_norm"].order == 4
    assert table(9, 3.0)["grad_norm"].order == 4 and table(6, 3.0)["grad_norm"].order == 2
    for N in (5, 6, 7, 8, 9):
        t = table(N, 2.5)
        assert t["crit_excess"].order == N and t["lap_excess"].order == N - 4
        assert t["grad_norm"].kind == "bound"


def test_fit_slope_recovers_power_and_log():
    eps = np.array(EPS)
    assert fit_slope(eps, 3 * eps**1.7) == pytest.approx(1.7)
    assert fit_slope(eps, 2 * eps**2.5 * np.abs(np.log(eps)), log_factor=True) == pytest.approx(2.5)


def test_fit_validation():
    with pytest.raises(ValueError):
        AsymptoticFit("p_norm", [0.1, 0.2, 0.05, 0.01], [1, 1, 1, 1], 1.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        fit_orders(ProblemParams(5, 3.0, 1.0), epsilons=(0.2, 0.1, 0.05))


@pytest.mark.parametrize("N,p", [(5, 3.0), (5, 5.0), (5, 7.0), (6, 3.0), (8, 3.0), (9, 3.0)])
def test_fit_orders(N, p):
    fits = {f.quantity: f for f in fit_orders(ProblemParams(N, p, 1.0), EPS)}
    for f in fits.values():
        assert f.passed(), (f.quantity, f.fitted_order, f.expected_order)
        assert not f.truncated
    SN4 = sobolev_integrals(N)["lap_sq"]
    assert fits["crit_excess"].values[-1] == pytest.approx(SN4, rel=1e-4)
    assert all(x > 0 for x in fits["lap_excess"].excesses)
    assert all(x > 0 for x in fits["crit_excess"].excesses)


@pytest.mark.parametrize("eps", EPS)
def test_interpolation_bound_on_bubbles(eps):
    b = bubble_integrals(BubbleSpec(eps), 5, 3.0)
    assert b.grad_sq <= np.sqrt(b.lap_sq * b.mass)


def test_grid_quadrature_matches_adaptive():
    spec = BubbleSpec(0.05)
    a = bubble_integrals(spec, 5, 3.0)
    errs = []
    for M in (1000, 2000):
        g = bubble_integrals(spec, 5, 3.0, make_grid(5, 2.0, M, 2.0))
        errs.append(abs(g.lap_sq - a.lap_sq) / a.lap_sq)
        assert g.method != a.method
    assert errs[1] < 1e-6 and errs[0] / errs[1] > 8
    g = bubble_integrals(spec, 5, 3.0, default_bubble_grid(5))
    for k in ("lap_sq", "grad_sq", "mass", "p_norm", "crit"):
        assert getattr(g, k) == pytest.approx(getattr(a, k), rel=1e-6), k


def test_grid_field_agrees_with_integrals():
    spec = BubbleSpec(0.1)
    g = default_bubble_grid(5)
    u = bubble_field(spec, g)
    b = bubble_integrals(spec, 5, 3.0)
    assert mass(u) == pytest.approx(b.mass, rel=1e-8)
    assert grad_seminorm_sq(u) == pytest.approx(b.grad_sq, rel=1e-6)
    assert lap_seminorm_sq(u) == pytest.approx(b.lap_sq, rel=1e-6)


def test_g_eps_max_closed_form():
    N = 5
    q = critical_exponents(ProblemParams(N, 5.0, 1.0)).four_star
    for eps in EPS:
        fc = normalized_coefficients(bubble_integrals(BubbleSpec(eps), N, 5.0), 1.0)
        g = lambda s: -(np.exp(4 * s) * fc.a / 2 - np.exp(2 * q * s) * fc.e / q)
        res = minimize_scalar(g, bounds=(-20, 20), method="bounded", options=dict(xatol=1e-12))
        assert g_eps_max(fc, N) == pytest.approx(-res.fun, rel=1e-10)
        closed = 2 / N * (fc.a / fc.e ** (2 / q)) ** (q / (q - 2))
        assert g_eps_max(fc, N) == pytest.approx(closed, rel=1e-12)


def test_normalized_coefficients_mass():
    b = bubble_integrals(BubbleSpec(0.1), 5, 3.0)
    fc = normalized_coefficients(b, 2.0)
    k = 2.0 / b.mass
    assert fc.a == pytest.approx(k * b.lap_sq) and fc.d == pytest.approx(k**1.5 * b.p_norm)


def _combined(params, eps):
    """Independent recomputation of the combined term at one epsilon."""
    ex = critical_exponents(params)
    fc = normalized_coefficients(bubble_integrals(BubbleSpec(eps), params.N, params.p), params.c)
    s = np.linspace(-30, 10, 40001)
    d = np.array([fiber_derivative(fc, x, params) for x in s])
    k = np.flatnonzero(np.diff(np.sign(d)))[0]
    a, b = s[k], s[k + 1]
    for _ in range(100):
        m = 0.5 * (a + b)
        a, b = (m, b) if fiber_derivative(fc, m, params) > 0 else (a, m)
    su = 0.5 * (a + b)
    return su, 0.5 * np.exp(2 * su) * fc.b - params.mu * np.exp(2 * params.p * ex.gamma_p * su) * fc.d / params.p


@pytest.mark.parametrize("N,p", [(5, 5.0), (9, 3.0)])
def test_ratio_report_values(N, p):
    prm = ProblemParams(N, p, 50.0, 1.0)
    rep = ratio_vanishing_check(prm, EPS)
    assert rep.epsilons == list(EPS)
    for i, eps in enumerate(EPS):
        su, comb = _combined(prm, eps)
        assert rep.s_values[i] == pytest.approx(su, abs=1e-9)
        assert rep.combined[i] == pytest.approx(comb, rel=1e-8, abs=1e-10)
    assert rep.ratio_decreasing == bool(np.all(np.diff(rep.ratios) < 0))
    assert rep.combined_negative_at_smallest == (rep.combined[-1] < 0)
    d = json.loads(rep.to_json())
    assert d["N"] == N and len(d["ratios"]) == 4


def test_ratio_combined_negative_high_dimension():
    rep = ratio_vanishing_check(ProblemParams(9, 3.0, 50.0, 1.0), EPS)
    assert rep.ratio_decreasing and rep.combined_negative_at_smallest
    assert rep.eps0 == EPS[0]
    # the projected level sits below the critical threshold
    assert all(f < rep.level for f in rep.fiber_max)


def test_fiber_drift_is_logarithmic():
    # for N = 5, p = 5 the projection point drifts like (1/4) ln eps
    prm = ProblemParams(5, 5.0, 50.0, 1.0)
    eps = (1e-3, 1e-4, 1e-5, 1e-6)
    rep = ratio_vanishing_check(prm, eps)
    slope = np.polyfit(np.log(rep.epsilons), rep.s_values, 1)[0]
    assert slope == pytest.approx(0.25, rel=0.1)


def test_ratio_requires_supercritical():
    with pytest.raises(ValueError):
        ratio_vanishing_check(ProblemParams(5, 3.0, 1.0), EPS)
