"""Exponents, best constants and closed-form thresholds."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq

REGIMES = ("subcritical", "critical", "supercritical")


class RegimeError(ValueError):
    """A quantity was requested outside the exponent range where it is defined."""


class QuadratureError(RuntimeError):
    """Successive quadrature refinements disagree beyond tolerance."""


class StagnationWarning(RuntimeWarning):
    """An optimizer stopped before meeting its gradient tolerance."""


def four_star(N: int) -> float:
    if N <= 4:
        raise ValueError(f"N={N}: the critical exponent 2N/(N-4) needs N >= 5")
    return 2.0 * N / (N - 4)


def gamma_exponent(N: int, t: float) -> float:
    """gamma_t = (N/2)(1/2 - 1/t)."""
    return 0.5 * N * (0.5 - 1.0 / t)


@dataclass(frozen=True)
class ProblemParams:
    N: int
    p: float
    mu: float
    c: float = 1.0
    include_gradient_term: bool = True

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 5:
            raise ValueError(f"N={self.N}: dimension must be an integer >= 5")
        q = four_star(self.N)
        if not 2 < self.p < q:
            raise ValueError(f"p={self.p} must lie in (2, 4*) = (2, {q:g}) for N={self.N}")
        if not self.mu >= 0:
            raise ValueError(f"mu={self.mu} must be nonnegative")
        if not self.c > 0:
            raise ValueError(f"c={self.c} must be positive")

    def replace(self, **kw) -> "ProblemParams":
        d = asdict(self)
        d.update(kw)
        return ProblemParams(**d)


@dataclass(frozen=True)
class CriticalExponents:
    N: int
    p: float
    four_star: float
    p_bar: float
    gamma_p: float
    gamma_four_star: float
    regime: str

    def gamma(self, t: float) -> float:
        return gamma_exponent(self.N, t)


def critical_exponents(params: ProblemParams) -> CriticalExponents:
    N, p = params.N, params.p
    q = four_star(N)
    if not 2 < p < q:
        raise ValueError(f"p={p} outside (2, {q:g})")
    p_bar = 2.0 + 8.0 / N
    if math.isclose(p, p_bar, rel_tol=0, abs_tol=1e-14):
        regime = "critical"
    elif p < p_bar:
        regime = "subcritical"
    else:
        regime = "supercritical"
    # 4* gamma_{4*} = (N/2)(1/2 - (N-4)/(2N)) = 1 exactly
    return CriticalExponents(N, p, q, p_bar, gamma_exponent(N, p), 1.0, regime)


def bubble_prefactor(N: int) -> float:
    """D_N = [N(N+2)(N-2)(N-4)]^{(N-4)/8}."""
    return float(N * (N + 2) * (N - 2) * (N - 4)) ** ((N - 4) / 8.0)


# Sobolev constant -------------------------------------------------------------


@dataclass(frozen=True)
class QuadSettings:
    """Gauss-Legendre quadrature in the angle variable r = tan(theta)."""

    nodes: int = 400
    rtol: float = 1e-8


def _bubble_integrals(N: int, n: int) -> tuple[float, float]:
    """(||Lap U_1||^2, ||U_1||_{4*}^{4*}) with n Gauss-Legendre nodes.

    With r = tan(theta) both integrands become smooth trigonometric
    polynomials on [0, pi/2].
    """
    from .grid import sphere_area

    x, wts = np.polynomial.legendre.leggauss(n)
    th = 0.25 * np.pi * (x + 1.0)
    wts = 0.25 * np.pi * wts
    c, s = np.cos(th), np.sin(th)
    D = bubble_prefactor(N)
    # Lap U_1 = D (4-N) (1+r^2)^{-N/2} [N (1+r^2) + (2-N) r^2] = D (4-N) cos^N [N sec^2 + (2-N) tan^2]
    # r^{N-1} dr = sin^{N-1} cos^{-N-1} dtheta
    lap_sq = (D * (4 - N)) ** 2 * (N + (2 - N) * s**2) ** 2 * c ** (2 * N - 4) * s ** (N - 1) * c ** (-N - 1)
    q = four_star(N)
    crit = D**q * c ** ((N - 4) * q) * s ** (N - 1) * c ** (-N - 1)
    om = sphere_area(N)
    return om * float(wts @ lap_sq), om * float(wts @ crit)


def sobolev_integrals(N: int, quad: QuadSettings = QuadSettings()) -> dict:
    """Both bubble integrals plus the refinement check, as a provenance dict."""
    if N < 5:
        raise ValueError("N must be >= 5")
    lap1, crit1 = _bubble_integrals(N, quad.nodes)
    lap2, crit2 = _bubble_integrals(N, 2 * quad.nodes)
    for name, v1, v2 in (("lap", lap1, lap2), ("crit", crit1, crit2)):
        if abs(v1 - v2) > quad.rtol * abs(v2):
            raise QuadratureError(f"{name} integral not converged: {v1!r} vs {v2!r}")
    return {
        "lap_sq": lap2,
        "crit": crit2,
        "refinement_gap": max(abs(lap1 - lap2) / lap2, abs(crit1 - crit2) / crit2),
        "nodes": [quad.nodes, 2 * quad.nodes],
        "method": "gauss-legendre in theta, r = tan(theta)",
    }


def sobolev_constant(N: int, quad: QuadSettings = QuadSettings()) -> float:
    """Best constant S of ||Lap u||^2 >= S ||u||_{4*}^2, from S^{N/4} = ||Lap U_1||^2."""
    return sobolev_integrals(N, quad)["lap_sq"] ** (4.0 / N)


# Gagliardo-Nirenberg constant --------------------------------------------------


@dataclass(frozen=True)
class GNSettings:
    R: float = 30.0
    M: int = 2000
    stretch: float = 2.0
    seed_width: float = 1.0
    max_iters: int = 3000
    grad_tol: float = 5e-7


@dataclass(frozen=True)
class GNResult:
    C: float
    quotient_log: float
    converged: bool
    iters: int
    residual: float
    settings: GNSettings
    message: str


def weinstein_log(u: np.ndarray, grid, p: float) -> float:
    """log of ||u||_p / (||Lap u||^gamma ||u||^{1-gamma}) for nodal values u."""
    gam = gamma_exponent(grid.N, p)
    W = grid.weights
    d = W @ np.abs(u) ** p
    a = W @ (grid.lap @ u) ** 2
    m = W @ u**2
    return float(np.log(d) / p - 0.5 * gam * np.log(a) - 0.5 * (1 - gam) * np.log(m))


def gn_optimize(N: int, p: float, opt: GNSettings = GNSettings()) -> GNResult:
    """Maximize the Weinstein quotient over the discrete radial space."""
    from .descent import SpherePreconditioner, sphere_descent
    from .grid import make_grid

    q = four_star(N)
    if not 2 < p <= q:
        raise ValueError(f"p={p} outside (2, 4*]")
    grid = make_grid(N, opt.R, opt.M, opt.stretch)
    gam = gamma_exponent(N, p)
    P = grid.prolong
    PT = P.T.tocsr()
    Lf = (grid.lap @ P).tocsr()
    LfT = Lf.T.tocsr()
    W = grid.weights
    wf = grid.free_weights

    def fg(x):
        u = P @ x
        lu = Lf @ x
        au = np.abs(u)
        d = W @ au**p
        a = W @ lu**2
        m = wf @ x**2
        f = -(np.log(d) / p - 0.5 * gam * np.log(a) - 0.5 * (1 - gam) * np.log(m))
        g = -(PT @ (W * au ** (p - 2) * u) / d - gam * (LfT @ (W * lu)) / a - (1 - gam) * wf * x / m)
        return float(f), g

    x0 = grid.to_free(np.exp(-0.5 * (grid.nodes / opt.seed_width) ** 2))
    a0 = float(W @ (grid.lap @ P @ x0) ** 2)
    m0 = float(wf @ x0**2)
    pre = SpherePreconditioner(grid.lap_stiffness, wf, shift=a0 / m0)

    def resid(x, g):
        G = pre.solve(g)
        return float(np.sqrt(max(g @ G - (wf * x @ G) ** 2 / (wf * x @ pre.solve(wf * x)), 0.0)))

    res = sphere_descent(fg, x0, 1.0, pre, resid, tol=opt.grad_tol, max_iters=opt.max_iters)
    if not res.converged:
        warnings.warn(
            f"GN quotient ascent stopped without meeting grad_tol ({res.message}, residual {res.residual:.3g})",
            StagnationWarning,
            stacklevel=2,
        )
    return GNResult(float(np.exp(-res.f)), -res.f, res.converged, res.iters, res.residual, opt, res.message)


@lru_cache(maxsize=64)
def _gn_cached(N: int, p: float, opt: GNSettings) -> GNResult:
    return gn_optimize(N, p, opt)


def gn_constant(N: int, p: float, opt: GNSettings = GNSettings()) -> float:
    """Sharp discrete constant C with ||u||_p <= C ||Lap u||^gamma ||u||^{1-gamma}."""
    return _gn_cached(int(N), float(p), opt).C


@dataclass(frozen=True)
class BestConstants:
    N: int
    p: float
    S: float
    C_Np: float
    D_N: float
    provenance: dict = field(default_factory=dict, compare=False, hash=False)


def best_constants(
    N: int, p: float, quad: QuadSettings = QuadSettings(), opt: GNSettings = GNSettings()
) -> BestConstants:
    sob = sobolev_integrals(N, quad)
    gn = _gn_cached(int(N), float(p), opt)
    prov = {
        "sobolev": sob,
        "gn": {**asdict(opt), "converged": gn.converged, "iters": gn.iters, "residual": gn.residual},
    }
    return BestConstants(N, p, sob["lap_sq"] ** (4.0 / N), gn.C, bubble_prefactor(N), prov)


# threshold functions ----------------------------------------------------------


def _kappa(params: ProblemParams, ex: CriticalExponents) -> float:
    return params.c ** (params.p * (1 - ex.gamma_p) / 2)


def g_c(r, params: ProblemParams, consts: BestConstants):
    """g_c(r) = 1/2 - (mu/p) C^p c^{p(1-gamma)/2} r^{p gamma - 2} - r^{4*-2} / (4* S^{4*/2})."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise ValueError("g_c needs r > 0")
    ex = critical_exponents(params)
    p, q = params.p, ex.four_star
    pg = p * ex.gamma_p
    out = (
        0.5
        - params.mu / p * consts.C_Np**p * _kappa(params, ex) * r ** (pg - 2)
        - r ** (q - 2) / (q * consts.S ** (q / 2))
    )
    return out if out.ndim else float(out)


def h_c(r, params: ProblemParams, consts: BestConstants):
    """h_c(r) = r^2 g_c(r), with h_c(0) = 0."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("h_c needs r >= 0")
    ex = critical_exponents(params)
    p, q = params.p, ex.four_star
    pg = p * ex.gamma_p
    rs = np.where(r > 0, r, 1.0)
    out = (
        0.5 * r**2
        - params.mu / p * consts.C_Np**p * _kappa(params, ex) * np.where(r > 0, rs**pg, 0.0)
        - r**q / (q * consts.S ** (q / 2))
    )
    return out if out.ndim else float(out)


def _require_subcritical(ex: CriticalExponents, what: str):
    if ex.regime != "subcritical":
        raise RegimeError(f"{what} is defined only for 2 < p < 2 + 8/N (p={ex.p})")


def r_c(params: ProblemParams, consts: BestConstants) -> float:
    """Unique critical point of g_c."""
    ex = critical_exponents(params)
    _require_subcritical(ex, "r_c")
    p, q = params.p, ex.four_star
    pg = p * ex.gamma_p
    num = (2 - pg) * params.mu * q * consts.S ** (q / 2) * consts.C_Np**p * _kappa(params, ex)
    return (num / ((q - 2) * p)) ** (1 / (q - pg))


def calE(params: ProblemParams, consts: BestConstants) -> float:
    ex = critical_exponents(params)
    _require_subcritical(ex, "calE")
    p, q = params.p, ex.four_star
    pg = p * ex.gamma_p
    return (
        (q - pg)
        / (2 - pg)
        * ((2 - pg) * params.mu * consts.C_Np**p / ((q - 2) * p)) ** ((q - 2) / (q - pg))
        * (q * consts.S ** (q / 2)) ** ((pg - 2) / (q - pg))
    )


def c_star(params: ProblemParams, consts: BestConstants) -> float:
    ex = critical_exponents(params)
    _require_subcritical(ex, "c*")
    p, q = params.p, ex.four_star
    pg = p * ex.gamma_p
    return (1 / (2 * calE(params, consts))) ** (2 * (q - pg) / (p * (1 - ex.gamma_p) * (q - 2)))


def r_c_bound(params: ProblemParams, consts: BestConstants) -> float:
    """Upper bound on r_c valid for c <= c*."""
    ex = critical_exponents(params)
    q = ex.four_star
    pg = params.p * ex.gamma_p
    return ((2 - pg) * q / (2 * (q - pg))) ** (1 / (q - 2)) * consts.S ** (params.N / 8)


def K_cmu(params: ProblemParams, consts: BestConstants) -> tuple[float, tuple[float, ...]]:
    """K(c, mu) and its four defining terms (supercritical p only)."""
    ex = critical_exponents(params)
    if ex.regime != "supercritical":
        raise RegimeError(f"K(c, mu) is defined only for p > 2 + 8/N (p={params.p})")
    N, p, q, mu, c = params.N, params.p, ex.four_star, params.mu, params.c
    S, C = consts.S, consts.C_Np
    pg = p * ex.gamma_p
    cf = c ** ((p - pg) / 2)
    m = mu if mu > 0 else 1.0
    raw = (
        (8 / q) * (q * S / 16) ** (N / 4),
        4 * (S / 4) ** (N / 4),
        (p / (8 * C**p * 2 ** (pg / 2) * m * cf)) ** (2 / (pg - 2)),
        (p / ((p - 2) * N * C**p * m * cf)) ** (2 / (pg - 2)),
    )
    terms = tuple(float(t) for t in raw[:2])
    # the last two terms blow up as mu -> 0
    terms += tuple(float(t) if mu > 0 else np.inf for t in raw[2:])
    return min(terms), terms


@dataclass
class ThresholdReport:
    N: int
    p: float
    mu: float
    c: float
    regime: str
    four_star: float
    p_bar: float
    gamma_p: float
    S: float
    C_Np: float
    D_N: float
    r_tilde: float
    c_star: float | None = None
    calE: float | None = None
    r_c: float | None = None
    r_star: float | None = None
    g_at_r_c: float | None = None
    h_zeros: tuple[float, float] | None = None
    K: float | None = None
    K_terms: tuple[float, ...] | None = None
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("h_zeros", "K_terms"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def h_zeros(params: ProblemParams, consts: BestConstants) -> tuple[float, float] | None:
    """Positive zeros r1 < r_c < r2 of h_c, or None when max g_c <= 0."""
    rc = r_c(params, consts)
    if g_c(rc, params, consts) <= 0:
        return None
    f = lambda r: g_c(r, params, consts)
    lo = rc
    while f(lo) > 0:
        lo *= 0.5
        if lo < 1e-300:
            raise RuntimeError("no lower zero of h_c found")
    hi = rc
    while f(hi) > 0:
        hi *= 2.0
        if hi > 1e300:
            raise RuntimeError("no upper zero of h_c found")
    r1 = brentq(f, lo, rc, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    r2 = brentq(f, rc, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    return r1, r2


def thresholds(params: ProblemParams, consts: BestConstants | None = None) -> ThresholdReport:
    """Populate every threshold that is defined in the active regime."""
    ex = critical_exponents(params)
    if consts is None:
        consts = best_constants(params.N, params.p)
    rep = ThresholdReport(
        N=params.N,
        p=params.p,
        mu=params.mu,
        c=params.c,
        regime=ex.regime,
        four_star=ex.four_star,
        p_bar=ex.p_bar,
        gamma_p=ex.gamma_p,
        S=consts.S,
        C_Np=consts.C_Np,
        D_N=consts.D_N,
        r_tilde=consts.S ** (params.N / 8),
        provenance=dict(consts.provenance),
    )
    if ex.regime == "subcritical" and params.mu == 0:
        # limits as mu -> 0: r* does not depend on mu, c* grows without bound
        q = ex.four_star
        rep.c_star = np.inf
        rep.calE = 0.0
        rep.r_c = 0.0
        rep.r_star = r_c(params.replace(mu=1.0, c=c_star(params.replace(mu=1.0), consts)), consts)
        rep.g_at_r_c = 0.5
        rep.h_zeros = (0.0, float((q * consts.S ** (q / 2) / 2) ** (1 / (q - 2))))
    elif ex.regime == "subcritical":
        cs = c_star(params, consts)
        rep.c_star = cs
        rep.calE = calE(params, consts)
        rep.r_c = r_c(params, consts)
        rep.r_star = r_c(params.replace(c=cs), consts)
        rep.g_at_r_c = g_c(rep.r_c, params, consts)
        rep.h_zeros = h_zeros(params, consts)
    elif ex.regime == "supercritical":
        rep.K, rep.K_terms = K_cmu(params, consts)
    return rep
