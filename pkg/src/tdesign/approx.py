"""Best uniform approximation on an interval.

Two routes to the same minimax problem min_c sup_x |g(x) - sum_i c_i f_i(x)|:
a Remez exchange for Haar systems (monomials, the fast and sharp path) and a
grid linear program with refinement passes for arbitrary bases.  Both return
the coefficient vector, the achieved deviation, and the extremal points, so
callers can cross-check one against the other.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import linprog, minimize_scalar

from .core import ConvergenceFailure, DesignInterval

__all__ = ["MinimaxFit", "remez", "minimax_grid", "best_uniform_fit", "refined_abs_extrema"]

BasisFn = Callable[[np.ndarray], np.ndarray]  # x (n,) -> (n, p)


@dataclass(frozen=True)
class MinimaxFit:
    coeffs: np.ndarray
    deviation: float
    extremals: np.ndarray


def _refine_extremum(
    f: Callable[[float], float], lo: float, hi: float, xtol: float = 1e-13
) -> float:
    res = minimize_scalar(
        lambda x: -f(x), bounds=(lo, hi), method="bounded", options={"xatol": xtol}
    )
    return float(res.x)


def _local_maxima_brackets(xs: np.ndarray, vals: np.ndarray) -> list[tuple[int, int]]:
    """Index brackets around each local maximum of vals, endpoints included."""
    n = xs.size
    brackets = []
    for i in range(n):
        left = vals[i - 1] if i > 0 else -np.inf
        right = vals[i + 1] if i < n - 1 else -np.inf
        if vals[i] >= left and vals[i] >= right:
            brackets.append((max(i - 1, 0), min(i + 1, n - 1)))
    return brackets


def refined_abs_extrema(
    residual: Callable[[np.ndarray], np.ndarray],
    interval: DesignInterval,
    grid_size: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Locations and values of local maxima of |residual|, golden-refined."""
    xs = interval.grid(grid_size)
    vals = np.abs(residual(xs))
    pts = []
    for i0, i1 in _local_maxima_brackets(xs, vals):
        if i1 > i0:
            pts.append(_refine_extremum(lambda x: abs(float(residual(np.array([x]))[0])), xs[i0], xs[i1]))
        else:
            pts.append(float(xs[i0]))
    pts = np.unique(np.asarray(pts))
    return pts, np.abs(residual(pts))


def remez(
    target: Callable[[np.ndarray], np.ndarray],
    basis: BasisFn,
    n_funcs: int,
    interval: DesignInterval,
    rtol: float = 1e-10,
    max_iter: int = 100,
    scan_size: int = 2001,
) -> MinimaxFit:
    """Remez exchange for best approximation by a Haar system of ``n_funcs``
    functions.  Stops when the trial level and the measured deviation agree
    within ``rtol`` relative.
    """
    p = n_funcs
    mid, half = interval.midpoint, interval.halfwidth
    # One more Chebyshev extremum than needed, leftmost dropped: an
    # asymmetric start keeps the first trial level nonzero for symmetric
    # targets, where a symmetric reference collapses to a signless residual.
    ref = (mid + half * np.cos(np.pi * np.arange(p + 2) / (p + 1))[::-1])[1:]
    level = 0.0
    for _ in range(max_iter):
        A = np.empty((p + 1, p + 1))
        A[:, :p] = basis(ref)
        A[:, p] = (-1.0) ** np.arange(p + 1)
        try:
            sol = np.linalg.solve(A, target(ref))
        except np.linalg.LinAlgError as exc:
            raise ConvergenceFailure(f"degenerate reference in exchange step: {exc}")
        coeffs, level = sol[:p], abs(float(sol[p]))

        def residual(x: np.ndarray) -> np.ndarray:
            return target(x) - basis(x) @ coeffs

        pts, vals = refined_abs_extrema(residual, interval, scan_size)
        dev = float(vals.max())
        scale = max(dev, 1e-300)
        if dev - level <= rtol * scale:
            keep = vals >= dev * (1.0 - 1e-8)
            return MinimaxFit(coeffs, dev, pts[keep])
        ref = _exchange_reference(pts, residual(pts), p + 1)
    raise ConvergenceFailure(f"no equioscillation after {max_iter} exchanges")


def _exchange_reference(pts: np.ndarray, res: np.ndarray, size: int) -> np.ndarray:
    """Pick ``size`` alternating-sign extremal points including the largest."""
    order = np.argsort(pts)
    pts, res = pts[order], res[order]
    # Collapse runs of equal residual sign, keeping the largest magnitude.
    runs: list[tuple[float, float]] = []
    for x, r in zip(pts, res):
        if runs and np.sign(r) == np.sign(runs[-1][1]):
            if abs(r) > abs(runs[-1][1]):
                runs[-1] = (x, r)
        else:
            runs.append((x, r))
    while len(runs) > size:
        i = min(range(len(runs)), key=lambda k: abs(runs[k][1]))
        del runs[i]
        if 0 < i < len(runs) and np.sign(runs[i - 1][1]) == np.sign(runs[i][1]):
            keep = i - 1 if abs(runs[i - 1][1]) >= abs(runs[i][1]) else i
            del runs[i - 1 + (1 if keep == i - 1 else 0)]
    if len(runs) < size:
        raise ConvergenceFailure(
            f"only {len(runs)} alternations available, need {size}"
        )
    return np.array([x for x, _ in runs])


def minimax_grid(
    target: Callable[[np.ndarray], np.ndarray],
    basis: BasisFn,
    interval: DesignInterval,
    grid_size: int = 2001,
    passes: int = 3,
) -> MinimaxFit:
    """Grid LP for the minimax fit, refined by appending off-grid extremals.

    Works for any basis; each pass re-solves the LP with the golden-refined
    extremal locations of the current residual appended to the grid.
    """
    xs = interval.grid(grid_size)
    coeffs = np.zeros(0)
    for _ in range(passes):
        B = basis(xs)
        g = target(xs)
        n, p = B.shape
        # variables: c_1..c_p, t;  minimize t  s.t.  |B c - g| <= t
        A_ub = np.vstack([
            np.hstack([B, -np.ones((n, 1))]),
            np.hstack([-B, -np.ones((n, 1))]),
        ])
        b_ub = np.concatenate([g, -g])
        cost = np.zeros(p + 1)
        cost[p] = 1.0
        res = linprog(
            cost,
            A_ub=A_ub,
            b_ub=b_ub,
            bounds=[(None, None)] * p + [(0, None)],
            method="highs",
        )
        if not res.success:
            raise ConvergenceFailure(f"minimax LP failed: {res.message}")
        coeffs = res.x[:p]

        def residual(x: np.ndarray) -> np.ndarray:
            return target(x) - basis(x) @ coeffs

        pts, vals = refined_abs_extrema(residual, interval, grid_size)
        xs = np.unique(np.concatenate([xs, pts]))
    dev = float(vals.max())
    keep = vals >= dev * (1.0 - 1e-7)
    return MinimaxFit(coeffs, dev, pts[keep])


def best_uniform_fit(
    target: Callable[[np.ndarray], np.ndarray],
    basis: BasisFn,
    n_funcs: int,
    interval: DesignInterval,
) -> MinimaxFit:
    """Minimax fit by exchange, falling back to the grid LP when the
    exchange cannot maintain a full alternation set (non-Haar bases,
    degenerate targets)."""
    try:
        return remez(target, basis, n_funcs, interval)
    except ConvergenceFailure:
        return minimax_grid(target, basis, interval)
