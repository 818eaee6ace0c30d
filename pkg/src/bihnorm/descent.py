"""Preconditioned Riemannian gradient descent on a weighted L2 sphere.

The constraint set is {x : x^T W x = c} with W diagonal.  Search directions
are Riemannian gradients in the metric induced by an SPD preconditioner A,
steps are retracted back onto the sphere by rescaling, step lengths come
from a Barzilai-Borwein estimate and are safeguarded by Armijo backtracking.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import factorized

FunGrad = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass
class DescentResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    residual: float
    iters: int
    converged: bool
    message: str
    trace: list[float] = field(default_factory=list)
    rejected: int = 0


class SpherePreconditioner:
    """Factorized A = K + shift * W used as the descent metric."""

    def __init__(self, K: sp.spmatrix, w: np.ndarray, shift: float = 1.0):
        self.w = np.asarray(w, dtype=float)
        self.A = (K + shift * sp.diags(self.w)).tocsc()
        self.solve = factorized(self.A)


def retract(x: np.ndarray, w: np.ndarray, c: float) -> np.ndarray:
    m = float(w @ (x * x))
    if not m > 0:
        raise ValueError("cannot normalize a zero field onto the mass sphere")
    return x * np.sqrt(c / m)


def sphere_descent(
    fg: FunGrad,
    x0: np.ndarray,
    c: float,
    pre: SpherePreconditioner,
    residual: Callable[[np.ndarray, np.ndarray], float],
    *,
    tol: float,
    max_iters: int = 2000,
    step: float = 1.0,
    armijo: float = 1e-4,
    shrink: float = 0.5,
    max_backtracks: int = 60,
    accept: Callable[[np.ndarray], bool] | None = None,
    max_rejections: int = 20,
    noise: float = 1e-13,
) -> DescentResult:
    """Minimize f on the sphere x^T W x = c.

    ``residual(x, g)`` returns the convergence measure at x; iteration stops
    when it drops to ``tol``.  ``accept`` can veto trial points (for example
    when a constraint set must not be left); a vetoed trial is halved like an
    Armijo failure and counted in ``rejected``.
    """
    w = pre.w
    x = retract(np.asarray(x0, dtype=float), w, c)
    f, g = fg(x)
    trace = [f]
    tau = step
    prev = None
    rejected = 0
    for it in range(max_iters + 1):
        res = residual(x, g)
        if res <= tol:
            return DescentResult(x, f, g, res, it, True, "converged", trace, rejected)
        if it == max_iters:
            break
        wx = w * x
        pg = pre.solve(g)
        pw = pre.solve(wx)
        beta = (wx @ pg) / (wx @ pw)
        G = pg - beta * pw
        AG = g - beta * wx
        slope = G @ AG
        if not slope > 0:
            # direction lost in round-off: nothing left to gain at this precision
            return DescentResult(x, f, g, res, it, False, "round-off floor", trace, rejected)
        if prev is not None:
            s = x - prev[0]
            y = AG - prev[1]
            sAs = s @ (pre.A @ s)
            sAy = s @ y
            if sAy > 0 and np.isfinite(sAs):
                tau = sAs / sAy
        ok = False
        for _ in range(max_backtracks):
            xt = retract(x - tau * G, w, c)
            if accept is not None and not accept(xt):
                rejected += 1
                if rejected > max_rejections:
                    return DescentResult(x, f, g, res, it, False, "repeated constraint escape", trace, rejected)
                tau *= shrink
                continue
            ft, gt = fg(xt)
            if np.isfinite(ft) and ft <= f - armijo * tau * slope + noise * max(1.0, abs(f)):
                ok = True
                break
            tau *= shrink
        if not ok:
            return DescentResult(x, f, g, res, it, False, "line search stagnated", trace, rejected)
        prev = (x, AG)
        x, f, g = xt, ft, gt
        trace.append(f)
    return DescentResult(x, f, g, residual(x, g), max_iters, False, "iteration limit", trace, rejected)


def _solve_small(Mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    return np.linalg.lstsq(Mat, rhs, rcond=None)[0]


def manifold_descent(
    fg: FunGrad,
    cons: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    c: float,
    pre: SpherePreconditioner,
    residual: Callable[[np.ndarray, np.ndarray, np.ndarray], float],
    *,
    tol: float,
    max_iters: int = 2000,
    step: float = 1.0,
    armijo: float = 1e-4,
    shrink: float = 0.5,
    max_backtracks: int = 60,
    noise: float = 1e-13,
    cons_tol: float = 1e-13,
) -> DescentResult:
    """Minimize f on {x^T W x = c, h(x) = 0} for one extra scalar constraint h.

    ``cons(x)`` returns (h, grad h, magnitude) where magnitude sets the
    scale for the tolerance ``cons_tol`` on |h|.  Directions are projected onto the
    tangent space in the A-metric; trial points are put back on the mass
    sphere by rescaling and onto h = 0 by a scalar root search along the
    preconditioned constraint normal.  ``residual(x, g, grad_h)`` measures
    convergence.
    """
    w = pre.w

    def restore(y: np.ndarray):
        y = retract(y, w, c)
        h, gh, hs = cons(y)
        best = None
        for _ in range(30):
            if best is None or abs(h) < abs(best[1]):
                best = (y, h, gh)
            if abs(h) <= cons_tol * hs:
                return y, h, gh
            # Newton step along the constraint normal, kept tangent to the mass sphere
            wy = w * y
            pwy = pre.solve(wy)
            v = pre.solve(gh)
            v = v - (wy @ v) / (wy @ pwy) * pwy
            slope = gh @ v
            if slope == 0:
                break
            y = retract(y - (h / slope) * v, w, c)
            h, gh, hs = cons(y)
        # accept the best point when round-off prevents reaching cons_tol
        if best is not None and abs(best[1]) <= 1e3 * cons_tol * hs:
            return best
        return None

    start = restore(np.asarray(x0, dtype=float))
    if start is None:
        raise ValueError("could not place the starting point on the constraint set")
    x, h, gh = start
    f, g = fg(x)
    trace = [f]
    tau = step
    prev = None
    for it in range(max_iters + 1):
        res = residual(x, g, gh)
        if res <= tol:
            return DescentResult(x, f, g, res, it, True, "converged", trace)
        if it == max_iters:
            break
        Nmat = np.column_stack([w * x, gh])
        Y = np.column_stack([pre.solve(Nmat[:, 0]), pre.solve(Nmat[:, 1])])
        pg = pre.solve(g)
        coef = _solve_small(Nmat.T @ Y, Nmat.T @ pg)
        G = pg - Y @ coef
        AG = g - Nmat @ coef
        slope = G @ AG
        if not slope > 0:
            return DescentResult(x, f, g, res, it, False, "round-off floor", trace)
        if prev is not None:
            s = x - prev[0]
            yv = AG - prev[1]
            sAs = s @ (pre.A @ s)
            sAy = s @ yv
            if sAy > 0 and np.isfinite(sAs):
                tau = sAs / sAy
        ok = False
        for _ in range(max_backtracks):
            trial = restore(x - tau * G)
            if trial is not None:
                xt, ht, ght = trial
                ft, gt = fg(xt)
                if np.isfinite(ft) and ft <= f - armijo * tau * slope + noise * max(1.0, abs(f)):
                    ok = True
                    break
            tau *= shrink
        if not ok:
            return DescentResult(x, f, g, res, it, False, "line search stagnated", trace)
        prev = (x, AG)
        x, f, g, gh = xt, ft, gt, ght
        trace.append(f)
    return DescentResult(x, f, g, residual(x, g, gh), max_iters, False, "iteration limit", trace)
