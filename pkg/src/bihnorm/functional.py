"""Energy, Pohozaev functional, Euler-Lagrange gradient and fiber maps.

All quantities reduce to four scalar integrals

    a = ||Lap u||^2,  b = ||grad u||^2,  d = ||u||_p^p,  e = ||u||_{4*}^{4*},

so the energy along the mass-preserving dilation H(u, s) is a closed-form
function of s.  Gradients are exact derivatives of the discrete energy with
respect to the free nodal values.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import cached_property, lru_cache

import numpy as np
import scipy.sparse as sp

from .constants import ProblemParams, critical_exponents
from .grid import RadialField, RadialGrid

S_CAP = 50.0
S_START = 5.0
S_TOL = 1e-12


class FiberError(RuntimeError):
    """The fiber derivative has no root or more than one root."""


@dataclass(frozen=True)
class EnergyBreakdown:
    lap_term: float
    grad_term: float
    p_term: float
    crit_term: float
    I: float
    P: float
    lambda_est: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass(frozen=True)
class FiberCoefficients:
    a: float
    b: float
    d: float
    e: float

    def __post_init__(self):
        for k in ("a", "b", "d", "e"):
            v = getattr(self, k)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"fiber coefficient {k}={v} must be finite and nonnegative")


class DiscreteEnergy:
    """The discrete functional as a function of the free nodal values x.

    The full field is u = P x where P fills the origin and the boundary node.
    """

    def __init__(self, grid: RadialGrid, params: ProblemParams):
        if grid.N != params.N:
            raise ValueError(f"grid dimension {grid.N} != problem dimension {params.N}")
        self.grid = grid
        self.params = params
        ex = critical_exponents(params)
        self.p = params.p
        self.q = ex.four_star
        self.gamma = ex.gamma_p
        self.beta = 1.0 if params.include_gradient_term else 0.0
        self.w = grid.free_weights
        self.wfull = grid.weights
        self.P = grid.prolong
        self.PT = grid.prolong.T.tocsr()
        self.Lf = (grid.lap @ grid.prolong).tocsr()
        self.Df = (grid.deriv @ grid.prolong).tocsr()
        self.LfT = self.Lf.T.tocsr()
        self.DfT = self.Df.T.tocsr()

    @cached_property
    def stiffness(self) -> sp.csc_matrix:
        K = self.grid.lap_stiffness
        if self.beta:
            K = K + self.grid.grad_stiffness
        return K.tocsc()

    def coefficients(self, x: np.ndarray) -> FiberCoefficients:
        u = self.P @ x
        lu = self.Lf @ x
        du = self.Df @ x
        au = np.abs(u)
        return FiberCoefficients(
            float(self.wfull @ lu**2),
            float(self.wfull @ du**2),
            float(self.wfull @ au**self.p),
            float(self.wfull @ au**self.q),
        )

    def coefficient_gradients(self, x: np.ndarray):
        """Gradients of (a, b, d, e) with respect to x."""
        u = self.P @ x
        W = self.wfull
        ga = 2.0 * (self.LfT @ (W * (self.Lf @ x)))
        gb = 2.0 * (self.DfT @ (W * (self.Df @ x)))
        au = np.abs(u)
        gd = self.p * (self.PT @ (W * au ** (self.p - 2) * u))
        ge = self.q * (self.PT @ (W * au ** (self.q - 2) * u))
        return ga, gb, gd, ge

    def curvature_parts(self, x: np.ndarray):
        """Sparse Hessian pieces: (K_a, K_b, H_p, H_q) with

        grad a = 2 K_a x, grad b = 2 K_b x, and H_t = P^T diag(W |u|^{t-2}) P,
        so that the Hessian of ||u||_t^t is t (t - 1) H_t.
        """
        u = self.P @ x
        au = np.abs(u)
        W = self.wfull
        Hp = (self.PT @ sp.diags(W * au ** (self.p - 2)) @ self.P).tocsc()
        Hq = (self.PT @ sp.diags(W * au ** (self.q - 2)) @ self.P).tocsc()
        return self.grid.lap_stiffness, self.grid.grad_stiffness, Hp, Hq

    def value(self, fc: FiberCoefficients) -> float:
        mu = self.params.mu
        return 0.5 * fc.a + 0.5 * self.beta * fc.b - mu * fc.d / self.p - fc.e / self.q

    def pohozaev(self, fc: FiberCoefficients) -> float:
        mu = self.params.mu
        return fc.a + 0.5 * self.beta * fc.b - mu * self.gamma * fc.d - fc.e

    def fun_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        fc = self.coefficients(x)
        ga, gb, gd, ge = self.coefficient_gradients(x)
        mu = self.params.mu
        g = 0.5 * ga + 0.5 * self.beta * gb - mu * gd / self.p - ge / self.q
        return self.value(fc), g

    def fiber_fun_grad(self, x: np.ndarray, s: float) -> tuple[float, np.ndarray]:
        """Value and x-gradient of the fiber energy at fixed s."""
        ga, gb, gd, ge = self.coefficient_gradients(x)
        fc = self.coefficients(x)
        k = self._fiber_factors(s)
        mu = self.params.mu
        val = 0.5 * k[0] * fc.a + 0.5 * k[1] * fc.b - mu * k[2] * fc.d / self.p - k[3] * fc.e / self.q
        g = 0.5 * k[0] * ga + 0.5 * k[1] * gb - mu * k[2] * gd / self.p - k[3] * ge / self.q
        return val, g

    def _fiber_factors(self, s: float):
        return (
            np.exp(4 * s),
            self.beta * np.exp(2 * s),
            np.exp(2 * self.p * self.gamma * s),
            np.exp(2 * self.q * s),
        )

    def lagrange(self, x: np.ndarray, g: np.ndarray) -> float:
        return float(x @ g) / float(self.w @ (x * x))

    def residual_norm(self, x: np.ndarray, g: np.ndarray) -> float:
        """L2 norm of the constrained strong residual W^{-1} g - lambda x."""
        lam = self.lagrange(x, g)
        r = g / self.w - lam * x
        return float(np.sqrt(self.w @ (r * r)))

    def scale(self, x: np.ndarray) -> float:
        fc = self.coefficients(x)
        return float(np.sqrt(fc.a + fc.b + self.w @ (x * x)))

    def relative_residual(self, x: np.ndarray, g: np.ndarray) -> float:
        return self.residual_norm(x, g) / self.scale(x)


@lru_cache(maxsize=16)
def discrete_energy(grid: RadialGrid, params: ProblemParams) -> DiscreteEnergy:
    """Cached DiscreteEnergy for a (grid, params) pair."""
    return DiscreteEnergy(grid, params)


def _energy_of(u: RadialField, params: ProblemParams) -> DiscreteEnergy:
    return discrete_energy(u.grid, params)


def fiber_coefficients(u: RadialField, params: ProblemParams) -> FiberCoefficients:
    g = u.grid
    ex = critical_exponents(params)
    au = np.abs(u.values)
    return FiberCoefficients(
        g.integrate((g.lap @ u.values) ** 2),
        g.integrate((g.deriv @ u.values) ** 2),
        g.integrate(au**params.p),
        g.integrate(au**ex.four_star),
    )


def breakdown(fc: FiberCoefficients, c: float, params: ProblemParams) -> EnergyBreakdown:
    ex = critical_exponents(params)
    beta = 1.0 if params.include_gradient_term else 0.0
    lap = 0.5 * fc.a
    grad = 0.5 * beta * fc.b
    pt = params.mu * fc.d / params.p
    ct = fc.e / ex.four_star
    P = fc.a + 0.5 * beta * fc.b - params.mu * ex.gamma_p * fc.d - fc.e
    lam = (fc.a + beta * fc.b - params.mu * fc.d - fc.e) / c if c > 0 else 0.0
    return EnergyBreakdown(lap, grad, pt, ct, lap + grad - pt - ct, P, lam)


def energy(u: RadialField, params: ProblemParams) -> EnergyBreakdown:
    """Energy terms, Pohozaev value and multiplier estimate of ``u``.

    The multiplier uses the actual mass of ``u`` (equal to params.c for
    fields on the constraint sphere).
    """
    fc = fiber_coefficients(u, params)
    c = u.grid.integrate(u.values**2)
    return breakdown(fc, c, params)


def pohozaev(u: RadialField, params: ProblemParams) -> float:
    return energy(u, params).P


def euler_gradient(u: RadialField, params: ProblemParams) -> RadialField:
    """L2 gradient of the energy within the admissible discrete space.

    On interior nodes this is W^{-1} dE/dx; the origin value follows the
    same even extrapolation as admissible fields and the boundary value is 0.
    Pairing with an admissible direction v under the grid quadrature gives
    the directional derivative of ``energy(u).I``.
    """
    de = _energy_of(u, params)
    x = u.free()
    # evaluate on the admissible field so that pairing is exact
    _, g = de.fun_grad(x)
    return RadialField(u.grid, u.grid.from_free(g / de.w))


def constrained_residual(u: RadialField, params: ProblemParams) -> float:
    """L2 norm of euler_gradient(u) - lambda_est u."""
    de = _energy_of(u, params)
    x = u.free()
    _, g = de.fun_grad(x)
    return de.residual_norm(x, g)


# fiber map ------------------------------------------------------------------


def _exponents(params: ProblemParams):
    ex = critical_exponents(params)
    return ex.four_star, ex.gamma_p, (1.0 if params.include_gradient_term else 0.0)


def fiber_energy(fc: FiberCoefficients, s: float, params: ProblemParams) -> float:
    q, gam, beta = _exponents(params)
    p, mu = params.p, params.mu
    return (
        0.5 * np.exp(4 * s) * fc.a
        + 0.5 * beta * np.exp(2 * s) * fc.b
        - mu * np.exp(2 * p * gam * s) * fc.d / p
        - np.exp(2 * q * s) * fc.e / q
    )


def fiber_derivative(fc: FiberCoefficients, s: float, params: ProblemParams) -> float:
    q, gam, beta = _exponents(params)
    p, mu = params.p, params.mu
    return (
        2 * np.exp(4 * s) * fc.a
        + beta * np.exp(2 * s) * fc.b
        - 2 * mu * gam * np.exp(2 * p * gam * s) * fc.d
        - 2 * np.exp(2 * q * s) * fc.e
    )


def _scaled_derivative(fc: FiberCoefficients, s, params: ProblemParams):
    """fiber_derivative times a positive factor that keeps it finite.

    The derivative is divided by exp(k s) with k the largest (s > 0) or
    smallest (s < 0) exponent present, which leaves its sign unchanged.
    Vectorized over ``s``.
    """
    q, gam, beta = _exponents(params)
    p, mu = params.p, params.mu
    terms = [(4.0, 2 * fc.a), (2.0, beta * fc.b), (2 * p * gam, -2 * mu * gam * fc.d), (2 * q, -2 * fc.e)]
    terms = [(k, v) for k, v in terms if v != 0]
    s = np.asarray(s, dtype=float)
    if not terms:
        return np.zeros_like(s)
    ks = [k for k, _ in terms]
    k0 = np.where(s > 0, max(ks), min(ks))
    return sum(v * np.exp((k - k0) * s) for k, v in terms)


def project_pohozaev(u, params: ProblemParams, *, scan_points: int = 2001) -> tuple[float, float]:
    """Locate the unique maximizer s_u of the fiber energy.

    ``u`` may be a RadialField or precomputed FiberCoefficients.  Returns
    (s_u, fiber_energy(s_u)).  Raises FiberError when no sign change is found
    within |s| <= 50 or when the derivative changes sign more than once.
    """
    ex = critical_exponents(params)
    if ex.regime != "supercritical":
        raise ValueError("the fiber maximizer is unique only for mass-supercritical p")
    fc = u if isinstance(u, FiberCoefficients) else fiber_coefficients(u, params)
    if fc.a <= 0 or fc.e <= 0:
        raise FiberError("degenerate field: zero Laplacian or critical norm")
    f = lambda s: _scaled_derivative(fc, s, params)

    smax = S_START
    while True:
        grid_s = np.linspace(-smax, smax, scan_points)
        vals = f(grid_s)
        sg = np.sign(vals)
        nz = sg != 0
        changes = np.flatnonzero(np.diff(sg[nz]) != 0)
        if len(changes) > 1:
            raise FiberError(
                f"fiber derivative changes sign {len(changes)} times on [-{smax}, {smax}] "
                f"(a={fc.a:.6g}, b={fc.b:.6g}, d={fc.d:.6g}, e={fc.e:.6g})"
            )
        if len(changes) == 1:
            idx = np.flatnonzero(nz)
            lo, hi = grid_s[idx[changes[0]]], grid_s[idx[changes[0] + 1]]
            break
        if smax >= S_CAP:
            raise FiberError(f"no sign change of the fiber derivative within |s| <= {S_CAP}")
        smax = min(2 * smax, S_CAP)
    flo = f(lo)
    if flo < 0:
        raise FiberError("fiber derivative is negative at the lower bracket end")
    while hi - lo > S_TOL:
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            lo = mid
        else:
            hi = mid
    s = 0.5 * (lo + hi)
    return s, float(fiber_energy(fc, s, params))


def fiber_curve(fc: FiberCoefficients, params: ProblemParams, s_values) -> np.ndarray:
    """Fiber energy sampled at ``s_values`` (for data export)."""
    return np.array([fiber_energy(fc, s, params) for s in np.asarray(s_values, dtype=float)])
