"""Constrained critical-point solvers and the multiplicity family."""

from __future__ import annotations

import csv
import itertools
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

from .constants import (
    ProblemParams,
    RegimeError,
    ThresholdReport,
    best_constants,
    critical_exponents,
    thresholds,
)
from .descent import SpherePreconditioner, manifold_descent, sphere_descent
from .functional import (
    FiberCoefficients,
    breakdown,
    discrete_energy,
    fiber_energy,
    project_pohozaev,
)
from .grid import RadialField, RadialGrid, mass

REPORT_VERSION = 1
TAIL_FRACTION = 1e-8
MIN_PEAK_CELLS = 8


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 5000
    step: float = 1.0
    armijo: float = 1e-4
    shrink: float = 0.5
    grad_tol: float = 1e-7
    pohozaev_tol: float = 1e-6
    seed: int = 0
    seed_width: float = 1.0
    precond_shift: float | None = None

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("step must be positive")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if not 0 < self.shrink < 1 or not 0 < self.armijo < 1:
            raise ValueError("Armijo parameters must lie in (0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class SolverReport:
    u: RadialField
    I: float
    P: float
    lam: float
    residual: float
    iters: int
    converged: bool
    regime: str
    constraint_checks: dict
    params: ProblemParams
    seed: int
    message: str = ""
    trace: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    breakdown: dict = field(default_factory=dict)

    def invariant_violations(self) -> list[str]:
        """Declared invariants of a converged report that do not hold."""
        if not self.converged:
            return []
        bad = []
        ch = self.constraint_checks
        if self.regime == "subcritical-minimizer":
            if not self.I < 0:
                bad.append(f"I={self.I} is not negative")
            if not self.lam < 0:
                bad.append(f"lambda={self.lam} is not negative")
            if not ch.get("in_Vr", False):
                bad.append("minimizer is not interior to V_r(c)")
        else:
            if not abs(self.P) <= ch["pohozaev_tol"] * ch["seminorm_sum"]:
                bad.append(f"|P|={abs(self.P)} above tolerance")
            if not self.I > 0:
                bad.append(f"I={self.I} is not positive")
            if not ch["level_margin"] > 0:
                bad.append(f"I={self.I} is not below (2/N)S^(N/4)={ch['level_threshold']}")
            if not self.lam < 0:
                bad.append(f"lambda={self.lam} is not negative")
        return bad

    def to_dict(self, include_field: bool = True) -> dict:
        d = {
            "schema": "bihnorm.solver_report",
            "version": REPORT_VERSION,
            "regime": self.regime,
            "params": asdict(self.params),
            "seed": self.seed,
            "I": self.I,
            "P": self.P,
            "lambda": self.lam,
            "residual": self.residual,
            "iters": self.iters,
            "converged": self.converged,
            "message": self.message,
            "wall_time": self.wall_time,
            "constraint_checks": self.constraint_checks,
            "breakdown": self.breakdown,
            "trace": list(self.trace),
            "invariant_violations": self.invariant_violations(),
        }
        if include_field:
            d["u"] = self.u.to_dict()
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


@dataclass
class MultiplicityFamily:
    m: int
    bumps: list[RadialField]
    supports: list[tuple[int, int]]
    omega: float
    s: float
    alpha: list[float]
    beta: list[float]
    mu_values: list[float]
    mu_test: float
    sup_I_on_Tm: float
    n_samples: int
    max_mass_error: float
    max_seminorm: float
    r_star_sq: float

    @property
    def alpha_m(self) -> float:
        return self.alpha[-1]

    @property
    def beta_m(self) -> float:
        return self.beta[-1]

    @property
    def mu_m(self) -> float:
        return self.mu_values[-1]

    def to_dict(self) -> dict:
        return {
            "schema": "bihnorm.multiplicity",
            "version": REPORT_VERSION,
            "m": self.m,
            "supports": [list(s) for s in self.supports],
            "omega": self.omega,
            "s": self.s,
            "alpha": self.alpha,
            "beta": self.beta,
            "mu": self.mu_values,
            "mu_m": self.mu_m,
            "mu_test": self.mu_test,
            "sup_I_on_Tm": self.sup_I_on_Tm,
            "n_samples": self.n_samples,
            "max_mass_error": self.max_mass_error,
            "max_seminorm": self.max_seminorm,
            "r_star_sq": self.r_star_sq,
        }


# membership tests -------------------------------------------------------------


def _seminorm_sum(u: RadialField) -> float:
    g = u.grid
    return g.integrate((g.lap @ u.values) ** 2) + g.integrate((g.deriv @ u.values) ** 2)


def _check_mass(u: RadialField, params: ProblemParams):
    m = mass(u)
    if abs(m - params.c) > 1e-8 * params.c:
        raise ValueError(f"field mass {m:.12g} differs from c={params.c:.12g}")


def in_Vr(u: RadialField, params: ProblemParams, th: ThresholdReport) -> bool:
    _check_mass(u, params)
    if th.r_star is None:
        raise RegimeError("V_r(c) needs the subcritical radius r*")
    return _seminorm_sum(u) < th.r_star**2


def in_A(u: RadialField, params: ProblemParams, th: ThresholdReport) -> bool:
    _check_mass(u, params)
    if th.K is None:
        raise RegimeError("the set A needs K(c, mu) (supercritical p)")
    return _seminorm_sum(u) <= th.K


def in_B(u: RadialField, params: ProblemParams, th: ThresholdReport, rtol: float = 1e-9) -> bool:
    _check_mass(u, params)
    if th.K is None:
        raise RegimeError("the set B needs K(c, mu) (supercritical p)")
    return abs(_seminorm_sum(u) - 2 * th.K) <= rtol * 2 * th.K


# helpers ----------------------------------------------------------------------


def _gaussian_seed(grid: RadialGrid, c: float, width: float, s: float = 0.0) -> np.ndarray:
    """Free values of H(g, s) for the Gaussian g, normalized to mass c.

    The dilation is applied analytically, so no interpolation is involved.
    """
    r = grid.nodes
    vals = np.exp(grid.N * s / 2) * np.exp(-0.5 * (np.exp(s) * r / width) ** 2)
    x = grid.to_free(vals)
    return x * np.sqrt(c / float(grid.free_weights @ x**2))


def _resample(u: RadialField, grid: RadialGrid) -> np.ndarray:
    """Values of u on another grid's nodes (zero beyond u's ball)."""
    if u.grid == grid:
        return u.values.copy()
    from scipy.interpolate import PchipInterpolator

    f = PchipInterpolator(u.grid.nodes, u.values, extrapolate=False)
    return np.nan_to_num(f(grid.nodes), nan=0.0)


def _tail_fraction(grid: RadialGrid, x: np.ndarray) -> float:
    """Share of the mass carried by the outer tenth of the ball."""
    r = grid.nodes[1:-1]
    w = grid.free_weights
    outer = r > 0.9 * grid.R
    return float(w[outer] @ x[outer] ** 2) / float(w @ x**2)


def _peak_cells(values: np.ndarray) -> int:
    """Number of grid cells inside the half-maximum radius of |u|."""
    a = np.abs(values)
    below = np.nonzero(a <= 0.5 * a.max())[0]
    return int(below[0]) if below.size else len(a)


def _radially_decreasing(values: np.ndarray, rtol: float = 1e-8) -> bool:
    return bool(np.all(np.diff(values) <= rtol * np.max(np.abs(values))))


def _shift(de, x: np.ndarray, cfg: SolverConfig) -> float:
    if cfg.precond_shift is not None:
        return cfg.precond_shift
    fc = de.coefficients(x)
    _, g = de.fun_grad(x)
    lam = abs(de.lagrange(x, g))
    m = float(de.w @ x**2)
    return max(lam, 1e-3 * (fc.a + fc.b) / m, 1e-8)


def _tangential_residual(de, x: np.ndarray, g: np.ndarray, gh: np.ndarray) -> tuple[float, float]:
    """Relative L2 residual after removing the mass and Pohozaev normals.

    Returns (residual, nu) where nu is the Pohozaev multiplier; nu vanishes
    for exact critical points of the unconstrained-by-P problem.
    """
    N = np.column_stack([de.w * x, gh])
    wi = 1.0 / de.w
    k = np.linalg.solve(N.T @ (wi[:, None] * N), N.T @ (wi * g))
    r = (g - N @ k) * wi
    return float(np.sqrt(de.w @ r**2)) / de.scale(x), float(k[1])


def existence_range_ok(N: int, p: float) -> bool:
    """Dimension-dependent exponent ranges for the supercritical existence result."""
    if N == 5:
        return 5 <= p < 10
    if N == 6:
        return 4 < p < 6
    if N == 7:
        return 3.5 < p < 14 / 3
    return 2 + 8 / N < p < 2 * N / (N - 4)


# subcritical ------------------------------------------------------------------


def minimize_subcritical(
    params: ProblemParams,
    grid: RadialGrid,
    cfg: SolverConfig = SolverConfig(),
    th: ThresholdReport | None = None,
) -> SolverReport:
    """Local minimizer of I on V_r(c) by projected gradient flow."""
    t0 = time.perf_counter()
    N, p, c = params.N, params.p, params.c
    if not 2 < p < 2 + 4 / N:
        raise RegimeError(f"local minimization needs 2 < p < 2 + 4/N = {2 + 4 / N:g} (p={p})")
    th = th or thresholds(params)
    if not c < th.c_star:
        raise RegimeError(f"c={c} must be below c*={th.c_star:.6g}")
    de = discrete_energy(grid, params)
    r2 = th.r_star**2
    rng = np.random.default_rng(cfg.seed)
    width = cfg.seed_width * float(np.exp(rng.uniform(-0.1, 0.1)))

    x0 = None
    for s0 in np.arange(0.0, -12.0, -0.125):
        x = _gaussian_seed(grid, c, width, s0)
        if _tail_fraction(grid, x) > TAIL_FRACTION:
            break
        fc = de.coefficients(x)
        if fc.a + fc.b < r2 and de.value(fc) < 0:
            x0 = x
            break
    if x0 is None:
        u = RadialField(grid, grid.from_free(_gaussian_seed(grid, c, width)))
        return _finish_sub(u, params, th, cfg, 0, False, "failure to descend: no seed with I < 0 inside V_r(c)", [], t0)

    shift = _shift(de, x0, cfg)
    pre = SpherePreconditioner(de.stiffness, de.w, shift)
    accept = lambda xt: (lambda f: f.a + f.b < r2)(de.coefficients(xt))
    res = sphere_descent(
        de.fun_grad,
        x0,
        c,
        pre,
        de.relative_residual,
        tol=cfg.grad_tol,
        max_iters=cfg.max_iters,
        step=cfg.step,
        armijo=cfg.armijo,
        shrink=cfg.shrink,
        accept=accept,
    )
    x, conv, msg, resid = res.x, res.converged, res.message, res.residual
    if not conv and res.message != "repeated constraint escape":
        xp, sc = _polish(de, x, c, False, cfg)
        if xp is not None and accept(xp):
            x, resid, conv = xp, sc, sc <= cfg.grad_tol
            msg = "converged after Newton polish" if conv else msg + "; polish incomplete"
    u = RadialField(grid, grid.from_free(x))
    return _finish_sub(u, params, th, cfg, res.iters, conv, msg, res.trace, t0, resid)


def _finish_sub(u, params, th, cfg, iters, converged, message, trace, t0, residual=None) -> SolverReport:
    de = discrete_energy(u.grid, params)
    x = u.free()
    fc = de.coefficients(x)
    _, g = de.fun_grad(x)
    bd = breakdown(fc, params.c, params)
    if residual is None:
        residual = de.relative_residual(x, g)
    sn = fc.a + fc.b
    checks = {
        "in_Vr": bool(sn < th.r_star**2),
        "seminorm_sum": sn,
        "r_star_sq": th.r_star**2,
        "Vr_margin": th.r_star**2 - sn,
        "multiplier_bound": 2 * bd.I / params.c,
        "nonneg": float(np.min(u.values)),
        "radially_decreasing": _radially_decreasing(u.values),
        "mass_error": abs(mass(u) - params.c),
        "tail_fraction": _tail_fraction(u.grid, x),
        "c_star": th.c_star,
    }
    return SolverReport(
        u=u,
        I=bd.I,
        P=bd.P,
        lam=bd.lambda_est,
        residual=residual,
        iters=iters,
        converged=converged,
        regime="subcritical-minimizer",
        constraint_checks=checks,
        params=params,
        seed=cfg.seed,
        message=message,
        trace=list(trace),
        wall_time=time.perf_counter() - t0,
        breakdown=bd.to_dict(),
    )


# supercritical ----------------------------------------------------------------


def mountain_pass_supercritical(
    params: ProblemParams,
    grid: RadialGrid,
    cfg: SolverConfig = SolverConfig(),
    S: float | None = None,
    initial: RadialField | None = None,
) -> SolverReport:
    """Minimize I over the radial Pohozaev manifold {mass = c, P = 0}.

    On P = 0 every fiber is at its maximum (s_u = 0), so this is the same
    min-max level as minimizing u -> max_s I(H(u, s)), without the exact
    dilation invariance that makes the latter ill-posed on a fixed grid.
    Solutions that concentrate onto a few grid cells (the discrete trace
    of a level that is not attained) are reported as not converged.
    """
    t0 = time.perf_counter()
    N, p, c = params.N, params.p, params.c
    ex = critical_exponents(params)
    if ex.regime != "supercritical":
        raise RegimeError(f"mountain-pass solve needs p > 2 + 8/N = {ex.p_bar:g} (p={p})")
    if not existence_range_ok(N, p):
        raise RegimeError(f"p={p} is outside the admissible supercritical range for N={N}")
    if S is None:
        S = best_constants(N, p).S
    level = 2.0 / N * S ** (N / 4)
    de = discrete_energy(grid, params)
    rng = np.random.default_rng(cfg.seed)
    width = cfg.seed_width * float(np.exp(rng.uniform(-0.1, 0.1)))

    if initial is not None:
        # warm start, e.g. continuation in mu
        x = grid.to_free(_resample(initial, grid))
        x = x * np.sqrt(c / float(de.w @ x**2))
    else:
        # center the seed on its own fiber analytically
        x = _gaussian_seed(grid, c, width)
        for _ in range(20):
            s_u, _ = project_pohozaev(de.coefficients(x), params)
            if abs(s_u) < 1e-3:
                break
            width *= np.exp(-s_u)
            x = _gaussian_seed(grid, c, width)
    if _tail_fraction(grid, x) > TAIL_FRACTION:
        raise ConvergenceError("seed is truncated by the ball; increase R")

    mu, gam = params.mu, ex.gamma_p
    beta = 1.0 if params.include_gradient_term else 0.0

    def cons(xv):
        fc = de.coefficients(xv)
        ga, gb, gd, ge = de.coefficient_gradients(xv)
        grad = ga + 0.5 * beta * gb - mu * gam * gd - ge
        return de.pohozaev(fc), grad, fc.a + 0.5 * beta * fc.b + mu * gam * fc.d + fc.e

    shift = _shift(de, x, cfg)
    pre = SpherePreconditioner(de.stiffness, de.w, shift)
    res = manifold_descent(
        de.fun_grad,
        cons,
        x,
        c,
        pre,
        lambda xv, g, gh: _tangential_residual(de, xv, g, gh)[0],
        tol=cfg.grad_tol,
        max_iters=cfg.max_iters,
        step=cfg.step,
        armijo=cfg.armijo,
        shrink=cfg.shrink,
    )
    x = res.x
    trace = res.trace
    iters = res.iters
    converged_desc = res.converged
    tang = res.residual
    message = res.message
    if not converged_desc:
        xp, sc = _polish(de, x, c, True, cfg)
        if xp is not None:
            x, tang, converged_desc = xp, sc, sc <= cfg.grad_tol
            message = "converged after Newton polish" if converged_desc else message + "; polish incomplete"
    _, nu = _tangential_residual(de, x, de.fun_grad(x)[1], cons(x)[1])

    s_u, _ = project_pohozaev(de.coefficients(x), params)
    sol_grid = grid.dilated(s_u)
    vals = np.exp(N * s_u / 2) * grid.from_free(x)
    u = RadialField(sol_grid, vals)
    de2 = discrete_energy(sol_grid, params)
    x2 = u.free()
    fc = de2.coefficients(x2)
    f2, g2 = de2.fun_grad(x2)
    bd = breakdown(fc, c, params)
    residual = de2.relative_residual(x2, g2)
    sn = fc.a + fc.b
    fib = [fiber_energy(fc, ds, params) for ds in (-1.0, -0.1, 0.1, 1.0)]
    checks = {
        "pohozaev_tol": cfg.pohozaev_tol,
        "tangential_residual": tang,
        "natural_residual": residual,
        "pohozaev_multiplier": nu,
        "seminorm_sum": sn,
        "pohozaev_relative": abs(bd.P) / sn,
        "s_u": s_u,
        "level_threshold": level,
        "level_margin": level - bd.I,
        "fiber_strict_max": bool(all(v < bd.I for v in fib)),
        "nonneg": float(np.min(u.values)),
        "nonneg_ok": bool(np.min(u.values) >= -1e-8 * np.max(u.values)),
        "radially_decreasing": _radially_decreasing(u.values),
        "mass_error": abs(mass(u) - c),
        "tail_fraction": _tail_fraction(sol_grid, x2),
        "energy_identity": 0.25 * fc.b * (1.0 if params.include_gradient_term else 0.0)
        + (ex.gamma_p / 2 - 1 / p) * params.mu * fc.d
        + (0.5 - 1 / ex.four_star) * fc.e,
    }
    checks["sobolev_ratio"] = fc.a / (fc.e ** (2.0 / ex.four_star) * S) if fc.e > 0 else float("inf")
    checks["peak_cells"] = _peak_cells(u.values)
    resolved = checks["sobolev_ratio"] >= 1.0 and checks["peak_cells"] >= MIN_PEAK_CELLS
    converged = bool(converged_desc and abs(bd.P) <= cfg.pohozaev_tol * sn and resolved)
    msg = message
    if not resolved:
        msg = (
            "grid-scale concentration: the discrete minimizer collapses onto a few cells "
            f"(Sobolev ratio {checks['sobolev_ratio']:.4f}, half-width {checks['peak_cells']} cells); "
            "the level is likely not attained for these parameters"
        )
    if converged and bd.I >= level:
        msg = "inconsistent-with-theory: level not below (2/N)S^(N/4); mu may be too small"
    return SolverReport(
        u=u,
        I=bd.I,
        P=bd.P,
        lam=bd.lambda_est,
        residual=tang,
        iters=iters,
        converged=converged,
        regime="pohozaev-mountain-pass",
        constraint_checks=checks,
        params=params,
        seed=cfg.seed,
        message=msg,
        trace=trace,
        wall_time=time.perf_counter() - t0,
        breakdown=bd.to_dict(),
    )


# multiplicity family ----------------------------------------------------------


def sphere_samples(m: int, n: int, seed: int = 0) -> np.ndarray:
    """Quasi-random points on the unit sphere in R^m (scrambled Sobol normals)."""
    if m == 1:
        return np.array([[1.0], [-1.0]])
    sob = qmc.Sobol(d=m, scramble=True, seed=seed)
    u = sob.random_base2(int(np.ceil(np.log2(max(n, 2)))))[:n]
    z = ndtri(np.clip(u, 1e-12, 1 - 1e-12))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def _bump_values(grid: RadialGrid, centers, halfwidths, s: float) -> list[np.ndarray]:
    r = np.exp(s) * grid.nodes
    out = []
    for a, h in zip(centers, halfwidths):
        x = (r - a) / h
        v = np.where(np.abs(x) < 1, (1 - x**2) ** 4, 0.0)
        out.append(v)
    return out


def genus_family(
    params: ProblemParams,
    grid: RadialGrid,
    th: ThresholdReport | None = None,
    m: int = 2,
    n_samples: int = 10_000,
    seed: int = 0,
    gap_nodes: int = 6,
    mu_test: float | None = None,
) -> MultiplicityFamily:
    """Disjoint-support bumps spanning an m-dimensional family with sup I < 0.

    Bump i is (1 - ((r - a_i)/h)^2)^4 on an annulus (a ball for i = 0),
    dilated by a common s <= 0 and normalized to mass c.  The sup of I over
    the sampled family is taken at ``mu_test`` (default 2 mu_m).
    """
    N, p, c = params.N, params.p, params.c
    if m < 1:
        raise ValueError("m must be >= 1")
    if not 2 < p < 2 + 4 / N:
        raise RegimeError(f"the multiplicity family needs 2 < p < 2 + 4/N (p={p})")
    th = th or thresholds(params)
    if not c < th.c_star:
        raise RegimeError(f"c={c} must be below c*={th.c_star:.6g}")
    r2 = th.r_star**2
    q = critical_exponents(params).four_star
    # unit-scale layout: ball of radius 1, then annuli of half-width 1 with gaps of 1
    centers = [0.0] + [3.0 * i for i in range(1, m)]
    halfw = [1.0] * m
    W = grid.weights

    chosen = None
    for s in np.arange(0.0, -12.0, -0.05):
        outer = (centers[-1] + halfw[-1]) * np.exp(-s)
        if outer >= grid.R:
            break
        raw = _bump_values(grid, centers, halfw, s)
        ok = True
        vals = []
        for v in raw:
            nz = np.flatnonzero(v)
            if len(nz) < 16:
                ok = False
                break
            v = v * np.sqrt(c / float(W @ v**2))
            vals.append(v)
        if not ok:
            continue
        sns = [float(W @ (grid.lap @ v) ** 2 + W @ (grid.deriv @ v) ** 2) for v in vals]
        if max(sns) < r2:
            chosen = (s, vals, sns)
            break
    if chosen is None:
        raise ValueError(
            f"cannot pack {m} bumps with seminorm below r*^2={r2:.6g} inside R={grid.R}; increase R or M"
        )
    s, vals, sns = chosen
    supports = []
    for v in vals:
        nz = np.flatnonzero(v)
        supports.append((int(nz[0]), int(nz[-1])))
    for (lo1, hi1), (lo2, hi2) in zip(supports, supports[1:]):
        if lo2 - hi1 < gap_nodes:
            raise ValueError("bump supports are not separated by the stencil width; increase M")
    bumps = [RadialField(grid, v) for v in vals]
    omega = max(sns)

    V = np.array(vals)
    LV = np.array([grid.lap @ v for v in vals])
    DV = np.array([grid.deriv @ v for v in vals])
    def field_terms(coef: np.ndarray):
        U = coef @ V
        LU = coef @ LV
        DU = coef @ DV
        au = np.abs(U)
        return (
            (LU**2) @ W,
            (DU**2) @ W,
            (au**p) @ W,
            (au**q) @ W,
            (U**2) @ W,
        )

    alphas, betas, mus = [], [], []
    prev = np.zeros((0, 0))
    batch = 1000
    for k in range(1, m + 1):
        pts = sphere_samples(k, n_samples, seed + k)
        if prev.size:
            pts = np.vstack([np.hstack([prev, np.zeros((len(prev), 1))]), pts])
        prev = pts
        full = np.hstack([pts, np.zeros((len(pts), m - k))])
        dmin = emin = np.inf
        for i in range(0, len(full), batch):
            a_, b_, d_, e_, _ = field_terms(full[i : i + batch])
            dmin = min(dmin, float(d_.min()))
            emin = min(emin, float(e_.min()))
        alpha = dmin / omega ** (p / 2)
        beta = emin / omega ** (q / 2)
        mu_k = p * (omega / 2 - omega ** (q / 2) * beta / q) / (omega ** (p / 2) * alpha)
        alphas.append(alpha)
        betas.append(beta)
        mus.append(max(mu_k, 0.0))

    if mu_test is None:
        mu_test = 2 * mus[-1] if mus[-1] > 0 else params.mu
    full = prev
    sup_I = -np.inf
    mass_err = 0.0
    max_sn = 0.0
    for i in range(0, len(full), batch):
        a_, b_, d_, e_, m_ = field_terms(full[i : i + batch])
        I_ = 0.5 * a_ + 0.5 * b_ * (1.0 if params.include_gradient_term else 0.0) - mu_test * d_ / p - e_ / q
        sup_I = max(sup_I, float(I_.max()))
        mass_err = max(mass_err, float(np.max(np.abs(m_ - c))) / c)
        max_sn = max(max_sn, float(np.max(a_ + b_)))
    return MultiplicityFamily(
        m=m,
        bumps=bumps,
        supports=supports,
        omega=omega,
        s=float(s),
        alpha=alphas,
        beta=betas,
        mu_values=mus,
        mu_test=mu_test,
        sup_I_on_Tm=sup_I,
        n_samples=len(full),
        max_mass_error=mass_err,
        max_seminorm=max_sn,
        r_star_sq=r2,
    )


# sweeps -----------------------------------------------------------------------


@dataclass
class SweepRecord:
    params: ProblemParams
    report: SolverReport | None
    error: str | None
    wall_time: float


def _lattice(param_ranges: dict) -> list[dict]:
    keys = ["N", "p", "mu", "c"]
    extra = [k for k in param_ranges if k not in keys and k != "include_gradient_term"]
    if extra:
        raise ValueError(f"unknown sweep parameters: {extra}")
    vals = [list(param_ranges.get(k, [])) for k in keys]
    if any(len(v) == 0 for v in vals):
        return []
    flag = param_ranges.get("include_gradient_term", True)
    return [dict(zip(keys, combo), include_gradient_term=flag) for combo in itertools.product(*vals)]


def solve_auto(params: ProblemParams, grid: RadialGrid, cfg: SolverConfig) -> SolverReport:
    """Pick the solver from the exponent regime."""
    ex = critical_exponents(params)
    if ex.regime == "supercritical":
        return mountain_pass_supercritical(params, grid, cfg)
    return minimize_subcritical(params, grid, cfg)


def sweep(
    param_ranges: dict,
    grid_spec: dict,
    cfg: SolverConfig = SolverConfig(),
    workers: int = 1,
) -> list[SweepRecord]:
    """Solve over the lattice spanned by ``param_ranges`` (lists per key).

    ``grid_spec`` holds R, M and stretch; the dimension comes from each run.
    Failures are recorded and the sweep continues.  Output order follows
    the lattice order regardless of ``workers``.
    """
    from .grid import make_grid

    combos = _lattice(param_ranges)

    def run(kw) -> SweepRecord:
        t0 = time.perf_counter()
        try:
            prm = ProblemParams(**kw)
        except ValueError as exc:
            return SweepRecord(None, None, str(exc), 0.0)
        try:
            grid = make_grid(prm.N, grid_spec.get("R", 40.0), grid_spec.get("M", 2000), grid_spec.get("stretch", 1.0))
            rep = solve_auto(prm, grid, cfg)
            return SweepRecord(prm, rep, None, time.perf_counter() - t0)
        except Exception as exc:  # noqa: BLE001 - recorded per run
            return SweepRecord(prm, None, f"{type(exc).__name__}: {exc}", time.perf_counter() - t0)

    if workers <= 1:
        return [run(kw) for kw in combos]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(run, combos))


SWEEP_COLUMNS = ["N", "p", "mu", "c", "include_gradient_term", "regime", "I", "P", "lambda", "residual", "converged", "wall_time", "error"]


def write_sweep_csv(records: Iterable[SweepRecord], fh) -> None:
    w = csv.writer(fh)
    w.writerow(SWEEP_COLUMNS)
    for rec in records:
        prm = asdict(rec.params) if rec.params else {k: "" for k in ("N", "p", "mu", "c", "include_gradient_term")}
        rep = rec.report
        w.writerow(
            [
                prm["N"],
                prm["p"],
                prm["mu"],
                prm["c"],
                prm["include_gradient_term"],
                rep.regime if rep else "",
                rep.I if rep else "",
                rep.P if rep else "",
                rep.lam if rep else "",
                rep.residual if rep else "",
                rep.converged if rep else False,
                f"{rec.wall_time:.3f}",
                rec.error or "",
            ]
        )


def _polish(de, x, c, pohozaev: bool, cfg: SolverConfig):
    """Newton polish that is kept only if it stays on the same critical level."""
    f0 = de.fun_grad(x)[0]
    xp, sc = newton_polish(de, x, c, pohozaev, tol=0.1 * cfg.grad_tol)
    if xp is x:
        return None, sc
    f1 = de.fun_grad(xp)[0]
    if abs(f1 - f0) > 1e-6 * max(abs(f0), 1.0):
        return None, sc
    return xp, sc


def newton_polish(de, x: np.ndarray, c: float, pohozaev: bool, iters: int = 8, tol: float = 1e-12):
    """Newton iterations on the KKT system of I restricted to the mass sphere
    (and to P = 0 when ``pohozaev``), started from a descent iterate.

    Returns the polished x, or the input when Newton fails to reduce the
    residual.
    """
    from scipy.sparse.linalg import spsolve

    import scipy.sparse as sps

    p, q, mu = de.p, de.q, de.params.mu
    beta, gam = de.beta, de.gamma
    w = de.w

    def parts(xv):
        f, g = de.fun_grad(xv)
        ga, gb, gd, ge = de.coefficient_gradients(xv)
        gP = ga + 0.5 * beta * gb - mu * gam * gd - ge
        return g, gP

    def kkt_res(xv, lam, nu):
        g, gP = parts(xv)
        fc = de.coefficients(xv)
        r = g - lam * w * xv - nu * gP
        return r, float(w @ xv**2) - c, de.pohozaev(fc), g, gP

    def score(xv):
        g, gP = parts(xv)
        if pohozaev:
            return _tangential_residual(de, xv, g, gP)[0]
        return de.relative_residual(xv, g)

    g, gP = parts(x)
    if pohozaev:
        Nm = np.column_stack([w * x, gP])
        wi = 1.0 / w
        lam, nu = np.linalg.solve(Nm.T @ (wi[:, None] * Nm), Nm.T @ (wi * g))
    else:
        lam, nu = de.lagrange(x, g), 0.0
    best, best_score = x, score(x)
    for _ in range(iters):
        r, rm, rP, g, gP = kkt_res(x, lam, nu)
        Ka, Kb, Hp, Hq = de.curvature_parts(x)
        HE = Ka + beta * Kb - mu * (p - 1) * Hp - (q - 1) * Hq
        HP = 2 * Ka + beta * Kb - mu * gam * p * (p - 1) * Hp - q * (q - 1) * Hq
        J = HE - lam * sps.diags(w) - nu * HP
        cols = [sps.csc_matrix((-(w * x))[:, None])]
        rows = [sps.csr_matrix(2 * (w * x)[None, :])]
        rhs = [-r, [-rm]]
        if pohozaev:
            cols.append(sps.csc_matrix(-gP[:, None]))
            rows.append(sps.csr_matrix(gP[None, :]))
            rhs.append([-rP])
        k = len(cols)
        top = sps.hstack([J] + cols)
        bottom = sps.hstack([sps.vstack(rows), sps.csr_matrix((k, k))])
        Kmat = sps.vstack([top, bottom]).tocsc()
        try:
            sol = spsolve(Kmat, np.concatenate([np.asarray(v, dtype=float) for v in rhs]))
        except Exception:  # noqa: BLE001 - singular system ends the polish
            break
        if not np.all(np.isfinite(sol)):
            break
        n = len(x)
        x = x + sol[:n]
        lam += sol[n]
        if pohozaev:
            nu += sol[n + 1]
        # keep the mass exact; the Pohozaev constraint is met to Newton accuracy
        x = x * np.sqrt(c / float(w @ x**2))
        sc = score(x)
        if sc < best_score:
            best, best_score = x, sc
        if sc <= tol:
            break
    return best, best_score
