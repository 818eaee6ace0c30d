"""The eleven acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line, printed in the terminal summary.
"""

import time
import warnings

import numpy as np
import pytest
from scipy.optimize import dual_annealing, minimize

from bihnorm.bubbles import fit_orders, ratio_vanishing_check
from bihnorm.constants import (
    GNSettings,
    ProblemParams,
    best_constants,
    critical_exponents,
    g_c,
    sobolev_integrals,
    thresholds,
)
from bihnorm.functional import (
    energy,
    euler_gradient,
    fiber_coefficients,
    fiber_derivative,
    fiber_energy,
    project_pohozaev,
)
from bihnorm.grid import grad_seminorm_sq, inner, lap_seminorm_sq, make_grid, mass, norms, rescale_field
from bihnorm.solvers import ConvergenceError, genus_family, minimize_subcritical, mountain_pass_supercritical

from conftest import random_field, record, with_mass
from test_oracles import GaussianBasis

EPS = (0.2, 0.1, 0.05, 0.025)


def test_criterion_01_threshold_trichotomy():
    t0 = time.perf_counter()
    base = ProblemParams(5, 2.5, 1.0, 1.0)
    consts = best_constants(5, 2.5)
    c_star = thresholds(base, consts).c_star
    vals = []
    for frac in (0.5, 1.0, 1.5):
        prm = base.replace(c=frac * c_star)
        th = thresholds(prm, consts)
        vals.append(float(g_c(th.r_c, prm, consts)))
    dt = time.perf_counter() - t0
    ok = vals[0] > 1e-6 and abs(vals[1]) < 1e-10 and vals[2] < -1e-6 and dt < 1.0
    record(1, ok, f"g_c(r_c) = {vals[0]:.6g}, {vals[1]:.3g}, {vals[2]:.6g}; {dt:.3f} s")
    assert ok


def test_criterion_02_truncation_radius():
    t0 = time.perf_counter()
    margins = {}
    for N, p in [(5, 2.5), (6, 3.0), (7, 3.0)]:
        S_N8 = np.sqrt(sobolev_integrals(N)["lap_sq"])
        margins[(N, p)] = S_N8 - thresholds(ProblemParams(N, p, 1.0)).r_star
    dt = time.perf_counter() - t0
    ok = all(m > 0 for m in margins.values()) and dt < 10.0
    desc = ", ".join(f"N={N},p={p}: {m:.4g}" for (N, p), m in margins.items())
    record(2, ok, f"S^(N/8) - r* = {desc}; {dt:.2f} s")
    assert ok


def test_criterion_03_gradient_check():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    g = make_grid(5, 20.0, 400, 1.0)
    prm = ProblemParams(5, 3.0, 1.0)
    errs = []
    for _ in range(100):
        u, v = random_field(g, rng), random_field(g, rng)
        an = inner(euler_gradient(u, prm), v)
        h = 1e-4 * np.linalg.norm(u.values) / np.linalg.norm(v.values)
        F = lambda t: energy(u + v * t, prm).I
        # Richardson-extrapolated central difference
        d1 = (F(h) - F(-h)) / (2 * h)
        d2 = (F(h / 2) - F(-h / 2)) / h
        fd = (4 * d2 - d1) / 3
        errs.append(abs(an - fd) / abs(fd))
    dt = time.perf_counter() - t0
    ok = max(errs) <= 1e-6 and dt < 30
    record(3, ok, f"max relative error {max(errs):.3g} over 100 pairs; {dt:.2f} s")
    assert ok


def test_criterion_04_fiber_consistency():
    prm = ProblemParams(5, 3.0, 1.0, 1.0)
    u0 = lambda r: np.exp(-(r**2) / 2) * (1 + 0.2 * r**2)
    s_values = np.linspace(-2, 2, 9)
    gaps = []
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        for M in (500, 1000, 2000, 4000):
            g = make_grid(5, 60.0, M, 2.0)
            u = g.sample(u0)
            fc = fiber_coefficients(u, prm)
            gaps.append(
                max(abs(energy(rescale_field(u, s), prm).I - fiber_energy(fc, s, prm)) / abs(fiber_energy(fc, s, prm)) for s in s_values)
            )
    orders = np.log2(np.array(gaps[:-1]) / np.array(gaps[1:]))
    ok = bool(np.all(orders >= 3.5)) and gaps[-1] <= 1e-6
    record(4, ok, f"gaps {', '.join(f'{x:.2e}' for x in gaps)}; observed orders {np.round(orders, 3).tolist()}")
    assert ok


def test_criterion_05_fiber_uniqueness():
    rng = np.random.default_rng(5)
    prm = ProblemParams(5, 5.0, 10.0, 1.0)
    g = make_grid(5, 30.0, 1000, 1.0)
    s_scan = np.linspace(-50, 50, 200_001)
    failures = []
    for i in range(100):
        u = with_mass(random_field(g, rng), 1.0)
        fc = fiber_coefficients(u, prm)
        with np.errstate(over="ignore", invalid="ignore"):
            d = np.sign(fiber_derivative(fc, s_scan, prm))
        changes = int(np.count_nonzero(np.diff(d[d != 0])))
        su, Imax = project_pohozaev(fc, prm)
        if changes != 1 or not (Imax > fiber_energy(fc, su - 1, prm) and Imax > fiber_energy(fc, su + 1, prm)):
            failures.append(i)
    ok = not failures
    record(5, ok, f"{100 - len(failures)}/100 fields with one sign change and a strict maximum")
    assert ok


def _annealing_oracle(N, p, mu, c, r_star):
    q = 2 * N / (N - 4)
    basis = GaussianBasis(N, np.geomspace(0.8, 70, 14), [np.linspace(0, 200, 8001)])

    def I(a):
        A, B, D, E = basis.parts(a, c, p, q)
        if A + B >= r_star**2:
            return 1e3 + A + B
        return 0.5 * A + 0.5 * B - mu * D / p - E / q

    res = dual_annealing(I, [(-1, 1)] * 14, seed=1, maxiter=150)
    return minimize(I, res.x, method="L-BFGS-B", options=dict(ftol=1e-15, gtol=1e-12, maxiter=5000)).fun


def test_criterion_06_subcritical_solve():
    base = ProblemParams(5, 2.5, 1.0, 1.0)
    th0 = thresholds(base)
    prm = base.replace(c=0.5 * th0.c_star)
    t0 = time.perf_counter()
    rep = minimize_subcritical(prm, make_grid(5, 120.0, 2000, 1.0))
    dt = time.perf_counter() - t0
    ch = rep.constraint_checks
    oracle = _annealing_oracle(5, 2.5, 1.0, prm.c, thresholds(prm).r_star)
    rel = abs(rep.I - oracle) / abs(oracle)
    ok = (
        rep.converged
        and rep.I < 0
        and rep.lam < 0
        and ch["in_Vr"]
        and rep.residual <= 1e-6
        and rel <= 1e-3
        and dt <= 120
    )
    record(6, ok, f"I={rep.I:.8g} lambda={rep.lam:.6g} residual={rep.residual:.2e} oracle I={oracle:.8g} (rel {rel:.1e}); {dt:.1f} s")
    assert ok


def test_criterion_07_mountain_pass():
    prm = ProblemParams(5, 5.0, 50.0, 1.0)
    t0 = time.perf_counter()
    try:
        rep = mountain_pass_supercritical(prm, make_grid(5, 40.0, 2000, 1.0))
    except ConvergenceError as exc:
        dt = time.perf_counter() - t0
        record(7, False, f"solver raised: {exc}; {dt:.1f} s")
        pytest.fail(str(exc))
    dt = time.perf_counter() - t0
    ch = rep.constraint_checks
    ok = (
        rep.converged
        and abs(rep.P) <= 1e-6 * ch["seminorm_sum"]
        and 0 < rep.I < ch["level_threshold"]
        and rep.lam < 0
        and dt <= 300
    )
    record(
        7,
        ok,
        f"converged={rep.converged} I={rep.I:.6g} threshold={ch['level_threshold']:.6g} "
        f"margin={ch['level_threshold'] - rep.I:.4g} lambda={rep.lam:.4g} |P|={abs(rep.P):.2e}; {dt:.1f} s"
        + (f"; {rep.message}" if rep.message else ""),
    )
    assert ok


def test_criterion_08_bubble_orders():
    # one exponent per case branch of the p-norm estimate at N = 5
    t0 = time.perf_counter()
    want = ("lap_excess", "crit_excess", "p_norm")
    ok, lines = True, []
    for p in (3.0, 5.0, 7.0):
        fits = {f.quantity: f for f in fit_orders(ProblemParams(5, p, 1.0), EPS)}
        ok &= all(fits[k].passed(0.15) for k in want)
        lines.append(f"p={p}: " + ", ".join(f"{k} {fits[k].fitted_order:.3f}/{fits[k].expected_order:g}" for k in want))
    dt = time.perf_counter() - t0
    ok &= dt <= 60
    record(8, ok, f"N=5 {'; '.join(lines)}; {dt:.1f} s")
    assert ok


def test_criterion_09_ratio_vanishing():
    lines, ok = [], True
    for N, p in [(5, 5.0), (9, 3.0)]:
        rep = ratio_vanishing_check(ProblemParams(N, p, 50.0, 1.0), EPS)
        this = rep.ratio_decreasing and rep.combined_negative_at_smallest
        ok &= this
        lines.append(
            f"N={N},p={p}: ratio decreasing={rep.ratio_decreasing}, combined at eps={EPS[-1]} is {rep.combined[-1]:.4g}"
        )
    record(9, ok, "; ".join(lines))
    assert ok


def test_criterion_10_multiplicity():
    base = ProblemParams(5, 2.5, 1.0, 1.0)
    prm = base.replace(c=0.5 * thresholds(base).c_star)
    fam = genus_family(prm, make_grid(5, 120.0, 2000, 1.0), m=3, n_samples=10_000)
    sup = fam.supports
    disjoint = all(sup[i][1] < sup[i + 1][0] for i in range(len(sup) - 1))
    mu = fam.mu_values
    ok = (
        fam.m == 3
        and disjoint
        and fam.max_mass_error <= 1e-12
        and fam.max_seminorm < fam.r_star_sq
        and np.isfinite(mu[-1])
        and mu[0] <= mu[1] <= mu[2]
        and fam.n_samples >= 10_000
        and fam.mu_test == pytest.approx(2 * mu[2])
        and fam.sup_I_on_Tm < 0
    )
    record(
        10,
        ok,
        f"mu = {[round(x, 6) for x in mu]}, mass error {fam.max_mass_error:.1e}, "
        f"max seminorm {fam.max_seminorm:.4g} < {fam.r_star_sq:.4g}, sup I on T_3 at 2 mu_3 = {fam.sup_I_on_Tm:.6g}",
    )
    assert ok


def test_criterion_11_gn_inequality():
    rng = np.random.default_rng(11)
    opt = GNSettings()
    worst, interp_ok = {}, True
    for N, p in [(5, 2.5), (5, 3.0)]:
        C = best_constants(N, p).C_Np
        gam = critical_exponents(ProblemParams(N, p, 1.0)).gamma_p
        g = make_grid(N, opt.R, opt.M, opt.stretch)
        ratios = []
        for _ in range(1000):
            u = random_field(g, rng, width=(0.3, 5.0))
            A, m2 = lap_seminorm_sq(u), mass(u)
            ratios.append(norms(u, p) ** (1 / p) / (C * A ** (gam / 2) * m2 ** ((1 - gam) / 2)))
            interp_ok &= grad_seminorm_sq(u) <= np.sqrt(A * m2)
        worst[(N, p)] = max(ratios)
    ok = interp_ok and all(w <= 1 + 1e-6 for w in worst.values())
    desc = ", ".join(f"N={N},p={p}: {w:.6f}" for (N, p), w in worst.items())
    record(11, ok, f"max ||u||_p / GN bound over 1000 fields: {desc}; interpolation bound holds: {interp_ok}")
    assert ok
