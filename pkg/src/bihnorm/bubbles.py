"""Aubin-Talenti bubbles, the cut-off test fields and their asymptotics.

The bubble U_eps(r) = D_N eps^{(N-4)/2} (eps^2 + r^2)^{-(N-4)/2} extremizes
the biharmonic Sobolev inequality.  Cutting it off with a radial psi that is
1 on [0, inner] and 0 beyond outer gives the test fields u_eps = psi U_eps.
Their norms approach the Sobolev values at rates that depend on N and p;
this module computes the norms by quadrature of closed-form integrands and
fits the observed rates.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.integrate import quad

from .constants import ProblemParams, bubble_prefactor, critical_exponents, four_star, sobolev_integrals
from .functional import FiberCoefficients, fiber_energy, project_pohozaev
from .grid import RadialField, RadialGrid, make_grid, sphere_area

MIN_CORE_NODES = 16
CUTOFF_PROFILES = ("quintic",)
QUANTITIES = ("lap_excess", "grad_norm", "crit_excess", "p_norm")


@dataclass(frozen=True)
class BubbleSpec:
    epsilon: float
    inner: float = 1.0
    outer: float = 2.0
    smoothness: str = "quintic"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.inner < self.outer:
            raise ValueError("cut-off radii must satisfy 0 < inner < outer")
        if self.smoothness not in CUTOFF_PROFILES:
            raise ValueError(f"unknown cut-off profile {self.smoothness!r}")


# closed-form profiles ---------------------------------------------------------


def cutoff(spec: BubbleSpec, r):
    """(psi, psi', psi'') with a quintic smoothstep transition on [inner, outer]."""
    r = np.asarray(r, dtype=float)
    L = spec.outer - spec.inner
    t = np.clip((r - spec.inner) / L, 0.0, 1.0)
    psi = 1.0 - t**3 * (10.0 - 15.0 * t + 6.0 * t**2)
    inside = (r > spec.inner) & (r < spec.outer)
    d1 = np.where(inside, -30.0 * t**2 * (1.0 - t) ** 2 / L, 0.0)
    d2 = np.where(inside, -60.0 * t * (1.0 - t) * (1.0 - 2.0 * t) / L**2, 0.0)
    return psi, d1, d2


def bubble(N: int, eps: float, r):
    """(U, U', Lap U) of the bubble U_eps at radii r."""
    r = np.asarray(r, dtype=float)
    D = bubble_prefactor(N) * eps ** ((N - 4) / 2.0)
    q = eps**2 + r**2
    U = D * q ** (-(N - 4) / 2.0)
    dU = D * (4 - N) * r * q ** (-(N - 2) / 2.0)
    lapU = D * (4 - N) * (N * q ** (-(N - 2) / 2.0) + (2 - N) * r**2 * q ** (-N / 2.0))
    return U, dU, lapU


def field_profile(spec: BubbleSpec, N: int, r):
    """(u, u', Lap u) of u_eps = psi U_eps."""
    r = np.asarray(r, dtype=float)
    U, dU, lapU = bubble(N, spec.epsilon, r)
    psi, d1, d2 = cutoff(spec, r)
    with np.errstate(divide="ignore", invalid="ignore"):
        lap_psi = np.where(r > 0, d2 + (N - 1) * d1 / np.where(r > 0, r, 1.0), 0.0)
    u = psi * U
    du = psi * dU + U * d1
    lap = psi * lapU + U * lap_psi + 2.0 * dU * d1
    return u, du, lap


def bubble_field(spec: BubbleSpec, grid: RadialGrid) -> RadialField:
    """Sample u_eps = psi U_eps on the grid nodes."""
    core = int(np.count_nonzero(grid.nodes <= spec.epsilon))
    if core < MIN_CORE_NODES:
        warnings.warn(
            f"only {core} nodes inside r <= eps={spec.epsilon:g}; the bubble core is under-resolved",
            RuntimeWarning,
            stacklevel=2,
        )
    if grid.R < spec.outer:
        warnings.warn("grid ball is smaller than the cut-off support; u_eps is truncated", RuntimeWarning, stacklevel=2)
    u, _, _ = field_profile(spec, grid.N, grid.nodes)
    u[-1] = 0.0
    return RadialField(grid, u)


# integrals ---------------------------------------------------------------------


@dataclass(frozen=True)
class BubbleIntegrals:
    epsilon: float
    N: int
    p: float
    lap_sq: float
    grad_sq: float
    mass: float
    p_norm: float
    crit: float
    lap_excess: float
    crit_excess: float
    method: str

    def fiber(self) -> FiberCoefficients:
        return FiberCoefficients(self.lap_sq, self.grad_sq, self.p_norm, self.crit)

    def to_dict(self) -> dict:
        return asdict(self)


def _radial_quad(f, a: float, b: float, points=(), rtol: float = 1e-12) -> float:
    pts = sorted(x for x in points if a < x < b)
    edges = [a, *pts, b]
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        val, _ = quad(f, lo, hi, epsabs=0.0, epsrel=rtol, limit=500)
        total += val
    return total


def bubble_integrals(spec: BubbleSpec, N: int, p: float, grid: RadialGrid | None = None) -> BubbleIntegrals:
    """The four fiber integrals and the mass of u_eps.

    Without a grid, each integral is adaptive quadrature of the closed-form
    integrand; the excesses over S^{N/4} are integrated directly on
    [inner, inf) so they carry no cancellation.  With a grid, everything is
    summed with the grid weights and the excesses come from subtraction.
    """
    om = sphere_area(N)
    q = four_star(N)
    SN4 = sobolev_integrals(N)["lap_sq"]
    eps = spec.epsilon

    if grid is not None:
        if grid.N != N:
            raise ValueError("grid dimension does not match N")
        u, du, lap = field_profile(spec, N, grid.nodes)
        lap_sq = grid.integrate(lap**2)
        crit = grid.integrate(np.abs(u) ** q)
        return BubbleIntegrals(
            eps,
            N,
            p,
            lap_sq,
            grid.integrate(du**2),
            grid.integrate(u**2),
            grid.integrate(np.abs(u) ** p),
            crit,
            lap_sq - SN4,
            SN4 - crit,
            f"grid(M={grid.M}, R={grid.R:g}, stretch={grid.stretch:g})",
        )

    def radial(g):
        return lambda r: om * r ** (N - 1) * g(r)

    pts = [eps, 4 * eps, 16 * eps, spec.inner]
    lo, hi = 0.0, spec.outer

    def prof(r):
        return field_profile(spec, N, r)

    grad_sq = _radial_quad(radial(lambda r: prof(r)[1] ** 2), lo, hi, pts)
    mass = _radial_quad(radial(lambda r: prof(r)[0] ** 2), lo, hi, pts)
    p_norm = _radial_quad(radial(lambda r: abs(prof(r)[0]) ** p), lo, hi, pts)

    # excesses live on [inner, inf) where the cut-off acts
    lap_in = _radial_quad(radial(lambda r: prof(r)[2] ** 2 - bubble(N, eps, r)[2] ** 2), spec.inner, spec.outer)
    lap_tail, _ = quad(radial(lambda r: bubble(N, eps, r)[2] ** 2), spec.outer, np.inf, epsabs=0.0, epsrel=1e-12, limit=500)
    crit_in = _radial_quad(
        radial(lambda r: (1.0 - cutoff(spec, r)[0] ** q) * bubble(N, eps, r)[0] ** q), spec.inner, spec.outer
    )
    crit_tail, _ = quad(radial(lambda r: bubble(N, eps, r)[0] ** q), spec.outer, np.inf, epsabs=0.0, epsrel=1e-12, limit=500)
    lap_excess = lap_in - lap_tail
    crit_excess = crit_in + crit_tail
    return BubbleIntegrals(
        eps, N, p, SN4 + lap_excess, grad_sq, mass, p_norm, SN4 - crit_excess, lap_excess, crit_excess, "adaptive"
    )


# expected rates ------------------------------------------------------------------


@dataclass(frozen=True)
class ExpectedOrder:
    quantity: str
    limit: float
    order: float
    log_factor: bool
    kind: str  # "rate" for two-sided asymptotics, "bound" for one-sided estimates


def expected_orders(params: ProblemParams) -> list[ExpectedOrder]:
    N, p = params.N, params.p
    SN4 = sobolev_integrals(N)["lap_sq"]
    if N > 8:
        grad = ExpectedOrder("grad_norm", 0.5 * SN4, 4.0, False, "bound")
    elif N == 8:
        grad = ExpectedOrder("grad_norm", 0.5 * SN4, 4.0, True, "bound")
    else:
        grad = ExpectedOrder("grad_norm", 0.5 * SN4, float(N - 4), False, "bound")
    pc = N / (N - 4)
    if np.isclose(p, pc, rtol=0, atol=1e-12):
        pn = ExpectedOrder("p_norm", 0.0, N / 2.0, True, "rate")
    elif p > pc:
        pn = ExpectedOrder("p_norm", 0.0, N - (N - 4) * p / 2.0, False, "rate")
    else:
        pn = ExpectedOrder("p_norm", 0.0, (N - 4) * p / 2.0, False, "rate")
    return [
        ExpectedOrder("lap_excess", SN4, float(N - 4), False, "rate"),
        grad,
        ExpectedOrder("crit_excess", SN4, float(N), False, "rate"),
        pn,
    ]


# fits ------------------------------------------------------------------------------


@dataclass
class AsymptoticFit:
    quantity: str
    epsilons: list[float]
    values: list[float]
    fitted_order: float
    expected_order: float
    limit: float
    log_factor: bool = False
    kind: str = "rate"
    excesses: list[float] = field(default_factory=list)
    window: int = 0
    truncated: bool = False
    bound_holds: bool | None = None

    def __post_init__(self):
        e = np.asarray(self.epsilons)
        if len(e) < 4 or np.any(np.diff(e) >= 0):
            raise ValueError("epsilons must be strictly decreasing with at least 4 samples")

    def relative_error(self) -> float:
        return abs(self.fitted_order - self.expected_order) / abs(self.expected_order)

    def passed(self, rtol: float = 0.15) -> bool:
        if self.kind == "bound":
            return bool(self.bound_holds)
        return not self.truncated and self.relative_error() <= rtol

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed()
        return d

    def csv_rows(self):
        for eps, v, x in zip(self.epsilons, self.values, self.excesses):
            yield {"quantity": self.quantity, "epsilon": eps, "value": v, "excess": x}


def fit_slope(eps, excess, log_factor: bool = False) -> float:
    """Least-squares slope k of log|excess| (or log(|excess|/|ln eps|)) against log eps."""
    eps = np.asarray(eps, dtype=float)
    y = np.log(np.abs(np.asarray(excess, dtype=float)))
    if log_factor:
        y = y - np.log(np.abs(np.log(eps)))
    return float(np.polyfit(np.log(eps), y, 1)[0])


def _monotone_window(excess: np.ndarray) -> int:
    """Length of the leading run over which |excess| keeps shrinking."""
    a = np.abs(excess)
    n = 1
    while n < len(a) and a[n] < a[n - 1] and a[n] > 0:
        n += 1
    return n


def fit_orders(
    params: ProblemParams,
    epsilons=(0.2, 0.1, 0.05, 0.025),
    grid: RadialGrid | None = None,
    spec: BubbleSpec = BubbleSpec(1.0),
) -> list[AsymptoticFit]:
    """Fit observed rates of the four bubble quantities over ``epsilons``.

    ``grid=None`` uses adaptive quadrature; otherwise every integral is summed
    on the grid.  A sequence whose excess stops shrinking has hit the
    quadrature floor: the fit window is cut there and the fit is flagged.
    """
    eps = np.asarray(sorted(epsilons, reverse=True), dtype=float)
    if len(eps) < 4:
        raise ValueError("need at least 4 epsilons")
    ints = [
        bubble_integrals(BubbleSpec(float(e), spec.inner, spec.outer, spec.smoothness), params.N, params.p, grid)
        for e in eps
    ]
    fits = []
    for ex in expected_orders(params):
        if ex.quantity == "lap_excess":
            values = [b.lap_sq for b in ints]
            excess = np.array([b.lap_excess for b in ints])
        elif ex.quantity == "crit_excess":
            values = [b.crit for b in ints]
            excess = np.array([b.crit_excess for b in ints])
        elif ex.quantity == "p_norm":
            values = [b.p_norm for b in ints]
            excess = np.array(values)
        else:
            values = [b.grad_sq for b in ints]
            excess = np.array(values)
        n = _monotone_window(excess)
        truncated = n < len(eps)
        order = fit_slope(eps[:n], excess[:n], ex.log_factor) if n >= 2 else float("nan")
        bound = None
        if ex.kind == "bound":
            bound = bool(np.all(np.asarray(values) <= ex.limit))
        fits.append(
            AsymptoticFit(
                ex.quantity,
                [float(e) for e in eps],
                [float(v) for v in values],
                order,
                ex.order,
                ex.limit,
                ex.log_factor,
                ex.kind,
                [float(x) for x in excess],
                n,
                truncated,
                bound,
            )
        )
    return fits


# the ratio argument for the mountain-pass level -----------------------------------------


@dataclass
class RatioReport:
    N: int
    p: float
    mu: float
    c: float
    epsilons: list[float]
    s_values: list[float]
    ratios: list[float]
    combined: list[float]
    fiber_max: list[float]
    g_max: list[float]
    level: float
    ratio_decreasing: bool
    combined_negative_at_smallest: bool
    eps0: float | None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def normalized_coefficients(b: BubbleIntegrals, c: float) -> FiberCoefficients:
    """Fiber coefficients of v_eps = sqrt(c) u_eps / ||u_eps||_2."""
    k = c / b.mass
    q = four_star(b.N)
    return FiberCoefficients(k * b.lap_sq, k * b.grad_sq, k ** (b.p / 2) * b.p_norm, k ** (q / 2) * b.crit)


def g_eps_max(fc: FiberCoefficients, N: int) -> float:
    """Closed-form max over s of e^{4s} a/2 - e^{2 q s} e / q, q = 4*."""
    q = four_star(N)
    return (0.5 - 1.0 / q) * (fc.a / fc.e ** (2.0 / q)) ** (q / (q - 2.0))


def ratio_vanishing_check(
    params: ProblemParams,
    epsilons=(0.2, 0.1, 0.05, 0.025),
    grid: RadialGrid | None = None,
    spec: BubbleSpec = BubbleSpec(1.0),
) -> RatioReport:
    """Track the gradient-to-p-term ratio along the projected test fields v_eps."""
    ex = critical_exponents(params)
    if ex.regime != "supercritical":
        raise ValueError("the ratio argument concerns the mass-supercritical case")
    N, p, mu, c = params.N, params.p, params.mu, params.c
    eps = sorted((float(e) for e in epsilons), reverse=True)
    level = 2.0 / N * sobolev_integrals(N)["lap_sq"]
    svals, ratios, comb, fmax, gmax = [], [], [], [], []
    for e in eps:
        b = bubble_integrals(BubbleSpec(e, spec.inner, spec.outer, spec.smoothness), N, p, grid)
        fc = normalized_coefficients(b, c)
        s, _ = project_pohozaev(fc, params)
        svals.append(s)
        ratios.append(np.exp(4 * s) * fc.b / fc.d)
        comb.append(0.5 * np.exp(2 * s) * fc.b - mu * np.exp(2 * p * ex.gamma_p * s) / p * fc.d)
        fmax.append(fiber_energy(fc, s, params))
        gmax.append(g_eps_max(fc, N))
    eps0 = None
    if comb[-1] < 0:
        # largest eps below which every sampled combined term is negative
        k = len(comb) - 1
        while k > 0 and comb[k - 1] < 0:
            k -= 1
        eps0 = eps[k]
    return RatioReport(
        N,
        p,
        mu,
        c,
        eps,
        [float(s) for s in svals],
        [float(r) for r in ratios],
        [float(v) for v in comb],
        [float(v) for v in fmax],
        [float(v) for v in gmax],
        float(level),
        bool(np.all(np.diff(ratios) < 0)),
        bool(comb[-1] < 0),
        eps0,
    )


def default_bubble_grid(N: int, spec: BubbleSpec = BubbleSpec(1.0), M: int = 4000) -> RadialGrid:
    """Grid covering the cut-off support, graded toward the bubble core."""
    return make_grid(N, spec.outer, M, 2.0)
