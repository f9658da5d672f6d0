"""Closed-form robust designs for polynomial pairs differing in degree by 2.

For discriminating a polynomial of degree m-2 from one of degree m on a
symmetric interval [-r, r], the optimal designs under both the Bayesian and
the standardized maximin criterion belong to a one-parameter family
xi_{m,beta}: supported at the roots of (x^2-r^2)(U_{m-1} + beta U_{m-3}) of
the rescaled argument, with explicit weights.  This module builds that
family, maps priors to their beta (via the prior's second moment), solves
the maximin h* subproblem including its three-case closed form for the
quadratic pair, and provides the uniform-efficiency prior of which the
Bayesian designs have rational weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq, minimize_scalar

from .approx import best_uniform_fit
from .core import (
    AsymmetricPrior,
    BSet,
    Design,
    DesignInterval,
    Prior,
    RootBracketFailure,
    ValidationError,
)

__all__ = [
    "XiMBeta",
    "MaximinPolySolution",
    "chebyshev_u",
    "xi_m_beta",
    "beta_bayes",
    "rbar_quadratic",
    "rbar_monomial",
    "hstar_solve",
    "bayes_quadratic_uniform_eff",
    "prior_second_moment_uniform_eff",
    "uniform_eff_density",
    "uniform_eff_second_moment_quad",
    "uniform_efficiency_prior",
    "phi_p_beta",
]

ROOT_TOL = 1e-13

# Case boundaries of the quadratic maximin solution (unit half-width scale).
D_CASE_1 = 0.5
D_CASE_2 = 5.0 * math.sqrt(10.0) / 4.0
B_LIMIT = 2.0 * math.sqrt(5.0) - 4.0


def chebyshev_u(n: int, x: float | np.ndarray):
    """Chebyshev polynomial of the second kind by the three-term recurrence.

    U_{-1} is identically 0 by convention; arguments outside [-1, 1] follow
    the same recurrence.
    """
    if n < -1:
        raise ValidationError(f"chebyshev_u needs n >= -1, got {n}")
    x = np.asarray(x, dtype=float)
    if n == -1:
        out = np.zeros_like(x)
    elif n == 0:
        out = np.ones_like(x)
    else:
        prev = np.ones_like(x)
        cur = 2.0 * x
        for _ in range(n - 1):
            prev, cur = cur, 2.0 * x * cur - prev
        out = cur
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class XiMBeta:
    """A member of the design family, with the parameters that produced it."""

    m: int
    beta: float
    halfwidth: float
    design: Design


def _positive_roots(m: int, beta: float) -> np.ndarray:
    """Roots in (0, 1) of U_{m-1}(t) + beta U_{m-3}(t).

    The combination has the parity of m-1, so all interior roots come in
    pairs +-t (plus t=0 when m is even); brackets come from a Chebyshev-angle
    grid fine enough to separate the roots of any such quasi-polynomial.
    """
    expect = (m - 2) // 2 if m % 2 == 0 else (m - 1) // 2
    if expect == 0:
        return np.zeros(0)
    angles = np.pi * np.arange(10 * m + 1) / (10 * m)
    ts = np.cos(angles)[::-1]
    ts = ts[(ts >= 0.0) & (ts < 1.0)]

    def p(t: float) -> float:
        return float(chebyshev_u(m - 1, t) + beta * chebyshev_u(m - 3, t))

    vals = np.array([p(t) for t in ts])
    roots = []
    for i in range(ts.size - 1):
        a, b = ts[i], ts[i + 1]
        fa, fb = vals[i], vals[i + 1]
        if fa == 0.0 and a > 0.0:
            roots.append(a)
        elif fa * fb < 0.0:
            roots.append(brentq(p, a, b, xtol=ROOT_TOL))
    roots = [t for t in roots if t > ROOT_TOL]
    if len(roots) != expect:
        raise RootBracketFailure(
            f"found {len(roots)} positive roots for m={m}, beta={beta}, "
            f"expected {expect}"
        )
    return np.asarray(sorted(roots))


def xi_m_beta(m: int, beta: float, r: float = 1.0) -> XiMBeta:
    """The symmetric design family on [-r, r] indexed by beta in [0, 1].

    For beta < 1 the support consists of +-r together with the m-1 roots of
    U_{m-1} + beta U_{m-3} (rescaled); endpoint masses are
    (1+beta)/(2(m + beta(m-2))) and interior masses follow the reciprocal
    formula below.  beta = 1 is the degenerate member: masses 1/(2(m-1)) at
    +-r and 1/(m-1) at the roots of U_{m-2}; for m = 2 the interior weight
    vanishes and the design reduces to two points.
    """
    if m < 2:
        raise ValidationError(f"need m >= 2, got {m}")
    if not 0.0 <= beta <= 1.0:
        raise ValidationError(f"beta must lie in [0, 1], got {beta}")
    if r <= 0.0:
        raise ValidationError(f"halfwidth must be positive, got {r}")

    if beta == 1.0:
        if m == 2:
            pts = np.array([-1.0, 1.0])
            wts = np.array([0.5, 0.5])
        else:
            inner = _chebyshev_u_roots(m - 2)
            pts = np.concatenate([[-1.0], inner, [1.0]])
            wts = np.concatenate(
                [[0.5 / (m - 1)], np.full(inner.size, 1.0 / (m - 1)), [0.5 / (m - 1)]]
            )
    else:
        pos = _positive_roots(m, beta)
        interior = np.concatenate([-pos[::-1], [0.0], pos]) if m % 2 == 0 else np.concatenate([-pos[::-1], pos])
        w_end = (1.0 + beta) / (2.0 * (m + beta * (m - 2)))
        w_int = np.array([_interior_mass(m, beta, t) for t in interior])
        pts = np.concatenate([[-1.0], interior, [1.0]])
        wts = np.concatenate([[w_end], w_int, [w_end]])

    total = math.fsum(wts)
    if abs(total - 1.0) > 1e-12:
        raise RootBracketFailure(f"weights sum to {total!r}; root set is wrong")
    design = Design(r * pts, wts)
    return XiMBeta(m, float(beta), float(r), design)


def _chebyshev_u_roots(n: int) -> np.ndarray:
    return np.cos(np.pi * np.arange(n, 0, -1) / (n + 1))


def _interior_mass(m: int, beta: float, t: float) -> float:
    num = (1.0 + beta) * chebyshev_u(m - 2, t)
    den = chebyshev_u(m, t) + beta * chebyshev_u(m - 2, t)
    return 1.0 / (m - 1.0 - num / den)


def beta_bayes(prior: Prior, r: float = 1.0) -> float:
    """Family index of the Bayesian optimal design: min(1, E[b^2] / r^2).

    Requires a prior symmetric about 0.  A prior carrying the
    uniform-efficiency descriptor uses the exact second moment of that
    density rather than the quadrature atoms.
    """
    if not prior.is_symmetric():
        raise AsymmetricPrior("the closed form needs a symmetric prior")
    if prior.uniform_eff_halfwidth is not None:
        m2 = prior_second_moment_uniform_eff(prior.uniform_eff_halfwidth)
    else:
        m2 = prior.second_moment()
    return min(1.0, m2 / (r * r))


def rbar_quadratic(b: float, r: float = 1.0) -> float:
    """Worst-case criterion bound for the constant-vs-... quadratic-tail
    problem: the squared best sup-norm approximation of x^2 + b x by lower
    order terms on [-r, r].

    On the unit interval this is (1/4)(1+|b|/2)^4 for |b| <= 2 and b^2
    beyond; general half-widths rescale the argument and multiply by r^4.
    """
    u = abs(b) / r
    base = 0.25 * (1.0 + 0.5 * u) ** 4 if u <= 2.0 else u * u
    return r**4 * base


def rbar_monomial(b: float, r: float, m: int) -> float:
    """Squared minimax deviation of x^m + b x^{m-1} from polynomials of
    degree <= m-2 on [-r, r]; the m = 2 case delegates to the closed form."""
    if m == 2:
        return rbar_quadratic(b, r)
    interval = DesignInterval.symmetric(r)

    def target(x: np.ndarray) -> np.ndarray:
        return x**m + b * x ** (m - 1)

    def basis(x: np.ndarray) -> np.ndarray:
        return np.vander(x, m - 1, increasing=True)

    fit = best_uniform_fit(target, basis, m - 1, interval)
    return fit.deviation**2


@dataclass(frozen=True)
class MaximinPolySolution:
    """Solution of the maximin subproblem over the design family.

    ``hstar`` is the optimal interior mass parameter (the design is the
    family member with beta = 1 - 2 hstar), ``bstar`` the active reduced
    parameter at which the inner infimum is attained (an interval endpoint
    in the small-d case), and ``d`` echoes the input half-width (None when
    the parameter set is the whole line or a finite set).
    """

    d: float | None
    hstar: float
    bstar: float
    beta_m: float
    design: Design
    unbounded: bool = False


def kappa(h: float, b: float, r: float = 1.0, m: int = 2) -> float:
    """The inner function (b^2 + r^2 h)(1-h) / (r^2 Rbar(b, r)) whose
    infimum over b is maximized by hstar."""
    return (b * b + r * r * h) * (1.0 - h) / (r * r * rbar_monomial(b, r, m))


def _quartic_root(d: float) -> float:
    def q(x: float) -> float:
        return x**4 + 6 * x**3 + (12.0 - 2 * d * d) * x * x + (8.0 - 16 * d * d) * x + 8 * d * d

    lo, hi = B_LIMIT, 0.5
    if q(lo) * q(hi) > 0.0:
        raise RootBracketFailure(f"quartic not bracketed on [{lo}, {hi}] for d={d}")
    return brentq(q, lo, hi, xtol=1e-15)


def hstar_solve(bset: BSet, r: float = 1.0, m: int = 2) -> MaximinPolySolution:
    """Maximin-optimal member of the design family for parameter set B.

    For the quadratic pair on a symmetric interval the solution is in closed
    form with three regimes in d (after rescaling by the half-width): small
    d pins the infimum to the boundary b = +-d and hstar = (1-d^2)/2; then a
    plateau with hstar = 3/8 and active b* = 1/2; for large d the active b*
    solves a quartic and hstar = b* - b*^2/2, with the unbounded set taking
    the limiting root.  Other (m, B) combinations are solved numerically by
    golden-section on the concave inner infimum.
    """
    if m < 2:
        raise ValidationError(f"need m >= 2, got {m}")
    if r <= 0.0:
        raise ValidationError(f"halfwidth must be positive, got {r}")
    if bset.atoms is None and m == 2:
        return _hstar_quadratic(bset, r)
    return _hstar_numeric(bset, r, m)


def _hstar_quadratic(bset: BSet, r: float) -> MaximinPolySolution:
    if bset.unbounded:
        bs = B_LIMIT
        h = bs - 0.5 * bs * bs  # equals 10 sqrt(5) - 22
        return _finish(None, h, r * bs, r, unbounded=True)
    d = bset.d / r
    if d <= D_CASE_1:
        h = 0.5 * (1.0 - d * d)
        bs = d
    elif d <= D_CASE_2:
        h = 3.0 / 8.0
        bs = 0.5
    else:
        bs = _quartic_root(d)
        h = bs - 0.5 * bs * bs
    return _finish(bset.d, h, r * bs, r)


def _finish(
    d: float | None, h: float, bstar: float, r: float, unbounded: bool = False
) -> MaximinPolySolution:
    beta_m = 1.0 - 2.0 * h
    design = xi_m_beta(2, beta_m, r).design
    return MaximinPolySolution(d, h, bstar, beta_m, design, unbounded)


def _hstar_numeric(bset: BSet, r: float, m: int) -> MaximinPolySolution:
    if bset.unbounded:
        raise ValidationError(
            "an unbounded parameter set is only solved by the quadratic closed form"
        )
    if bset.atoms is not None:
        bs = np.array([a[0] for a in bset.atoms])
    else:
        bs = np.linspace(0.0, bset.d, 1001)
    rbars = np.array([rbar_monomial(b, r, m) for b in bs])

    def inner_inf(h: float) -> float:
        vals = (bs * bs + r * r * h) * (1.0 - h) / (r * r * rbars)
        return float(vals.min())

    res = minimize_scalar(
        lambda h: -inner_inf(h), bounds=(0.0, 0.5), method="bounded",
        options={"xatol": 1e-12},
    )
    h = float(res.x)
    vals = (bs * bs + r * r * h) * (1.0 - h) / (r * r * rbars)
    k = int(np.argmin(vals))
    bstar = float(bs[k])
    if bset.d is not None:
        # polish the active b within its grid bracket
        lo = bs[max(k - 1, 0)]
        hi = bs[min(k + 1, bs.size - 1)]
        polished = minimize_scalar(
            lambda b: kappa(h, b, r, m), bounds=(lo, hi), method="bounded",
            options={"xatol": 1e-12},
        )
        bstar = float(polished.x)
    return _finish(bset.d, h, bstar, r)


# ---------------------------------------------------------------------------
# Uniform-efficiency prior and its Bayesian designs (quadratic pair, r = 1)


def _uniform_eff_normalizer(a: float) -> float:
    if a <= 2.0:
        return 3.0 * (2.0 + a) ** 3 / (16.0 * a * (12.0 + 6.0 * a + a * a))
    return 3.0 * a / (17.0 * a - 6.0)


def uniform_eff_density(b: float | np.ndarray, a: float) -> np.ndarray:
    """Density on [-a, a] proportional to the reciprocal of the worst-case
    bound, so that every b is weighted by how hard it is to discriminate."""
    b = np.asarray(b, dtype=float)
    c = _uniform_eff_normalizer(a)
    vals = np.where(
        np.abs(b) <= a, c / np.vectorize(rbar_quadratic)(b), 0.0
    )
    return vals


def uniform_eff_second_moment_quad(a: float) -> float:
    """Second moment of the uniform-efficiency prior by adaptive quadrature,
    split at the density's kink; the independent oracle for the closed form."""
    c = _uniform_eff_normalizer(a)

    def integrand(b: float) -> float:
        return b * b * c / rbar_quadratic(b)

    pieces = [(0.0, min(a, 2.0))]
    if a > 2.0:
        pieces.append((2.0, a))
    total = 0.0
    for lo, hi in pieces:
        val, _ = quad(integrand, lo, hi, epsabs=1e-13, epsrel=1e-13)
        total += val
    return 2.0 * total


def prior_second_moment_uniform_eff(a: float) -> float:
    """Closed-form second moment of the uniform-efficiency prior.

    4a^2/(12+6a+a^2) below the kink at a=2 and (6a^2-4a)/(17a-6) beyond;
    the 6a^2 coefficient is confirmed against the quadrature oracle on
    every call (the two routes must agree to 1e-9).
    """
    if a <= 0.0:
        raise ValidationError(f"prior halfwidth must be positive, got {a}")
    if a <= 2.0:
        closed = 4.0 * a * a / (12.0 + 6.0 * a + a * a)
    else:
        closed = (6.0 * a * a - 4.0 * a) / (17.0 * a - 6.0)
    numeric = uniform_eff_second_moment_quad(a)
    if abs(closed - numeric) > 1e-9 * max(1.0, abs(closed)):
        raise ValidationError(
            f"second-moment routes disagree: closed {closed!r} vs quadrature {numeric!r}"
        )
    return closed


def bayes_quadratic_uniform_eff(a: float) -> Design:
    """Bayesian optimal design on [-1, 1] for the quadratic pair under the
    uniform-efficiency prior with half-width ``a``: rational weights in
    three regimes of a, two-point beyond the threshold where the prior's
    second moment reaches 1."""
    if a <= 0.0:
        raise ValidationError(f"prior halfwidth must be positive, got {a}")
    threshold = (7.0 + math.sqrt(33.0)) / 4.0
    if a <= 2.0:
        den = 12.0 + 6.0 * a + a * a
        end = (5.0 * a * a + 6.0 * a + 12.0) / (4.0 * den)
        mid = (-3.0 * a * a + 6.0 * a + 12.0) / (2.0 * den)
        return Design([-1.0, 0.0, 1.0], [end, mid, end])
    if a <= threshold:
        den = 17.0 * a - 6.0
        end = (6.0 * a * a + 13.0 * a - 6.0) / (4.0 * den)
        mid = (-6.0 * a * a + 21.0 * a - 6.0) / (2.0 * den)
        return Design([-1.0, 0.0, 1.0], [end, mid, end])
    return Design([-1.0, 1.0], [0.5, 0.5])


def uniform_efficiency_prior(a: float, n_nodes: int = 64) -> Prior:
    """Quadrature discretization of the uniform-efficiency prior.

    Gauss-Legendre nodes per smooth piece (the density has a kink where the
    bound switches branch), mirrored to keep the atoms exactly symmetric.
    """
    if a <= 0.0:
        raise ValidationError(f"prior halfwidth must be positive, got {a}")
    pieces = [(0.0, min(a, 2.0))]
    if a > 2.0:
        pieces.append((2.0, a))
    nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
    bs: list[float] = []
    ms: list[float] = []
    c = _uniform_eff_normalizer(a)
    for lo, hi in pieces:
        mid, half = 0.5 * (hi + lo), 0.5 * (hi - lo)
        x = mid + half * nodes
        w = half * weights * c / np.vectorize(rbar_quadratic)(x)
        bs.extend(x)
        ms.extend(w)
    bs = np.concatenate([-np.asarray(bs)[::-1], np.asarray(bs)])
    ms = np.concatenate([np.asarray(ms)[::-1], np.asarray(ms)])
    ms = ms / math.fsum(ms)
    return Prior.from_scalars(bs, ms, uniform_eff_halfwidth=float(a))


def phi_p_beta(p: float, r: float = 1.0) -> float:
    """Family index of the phi_p-optimal design: the root in [0, 1] of
    ((1-beta)/2)^(p+1) = beta / r^(2p), found by bisection to 1e-12.

    p ranges over (-1, inf]; the limiting p = inf case degenerates to
    max(0, 1 - 2/r^2).
    """
    if math.isinf(p):
        return max(0.0, 1.0 - 2.0 / (r * r))
    if p <= -1.0:
        raise ValidationError(f"need p > -1, got {p}")

    scale = r ** (-2.0 * p)

    def g(beta: float) -> float:
        return ((1.0 - beta) / 2.0) ** (p + 1.0) - scale * beta

    lo, hi = 0.0, 1.0
    while hi - lo > 1e-12:
        mid = 0.5 * (lo + hi)
        if g(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
