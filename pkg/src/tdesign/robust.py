"""Prior-averaged and worst-case criteria for nested linear pairs.

Both criteria are linear in the design's reduced information matrix once
the parameter uncertainty is folded into a moment matrix: averaging over a
prior gives the matrix of prior second moments, and the worst case over a
parameter set is certified by a least-favorable discrete prior whose
standardized moment matrix makes the candidate design optimal for the
induced linear criterion.
"""

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .chebdesign import beta_bayes, rbar_monomial, xi_m_beta
from .core import (
    BoundViolation,
    BSet,
    CertificateFailure,
    Design,
    DesignInterval,
    LinearModelPair,
    NotOptimal,
    Prior,
    SolverError,
    ValidationError,
)
from .moments import info_matrix, schur_complement, schur_quadratic_form
from .optimizer import OptimizerConfig, _run, bayes_context
from .tcrit import r_value

CERT_TOL = 1e-6
CROSS_CHECK_TOL = 1e-4
B_SCAN = 1001
CERT_GRID = 2001


def _require_scalar_reduction(pair: LinearModelPair) -> None:
    if pair.s != 2:
        raise ValidationError(
            f"closed forms cover a scalar reduced parameter (s=2), got s={pair.s}"
        )


def _symmetric_halfwidth(interval: DesignInterval) -> float:
    if abs(interval.midpoint) > 1e-14 * interval.halfwidth:
        raise ValidationError(
            "closed forms need an interval symmetric about the origin"
        )
    return interval.halfwidth


@dataclass(frozen=True)
class PriorMomentMatrix:
    """Moment matrix of a discrete prior on the reduced parameter.

    Plain second moments E[(b,1)(b,1)^T] for the prior-averaged criterion;
    the standardized variant divides each atom's outer product by its
    worst-case ceiling, so the corner entry is sum(mass/ceiling) instead of
    one.  An infinite atom is the limit direction: its outer product is
    e_1 e_1^T / tail_scale and it contributes nothing to the corner.
    """

    L: np.ndarray
    atoms: tuple[tuple[float, ...], ...]
    masses: tuple[float, ...]
    ceilings: tuple[float, ...] | None = None
    tail_scale: float | None = None

    def __post_init__(self) -> None:
        L = np.asarray(self.L, dtype=float)
        object.__setattr__(self, "L", L)
        if L.ndim != 2 or L.shape[0] != L.shape[1]:
            raise ValidationError("moment matrix must be square")
        scale = max(1.0, float(np.abs(L).max()))
        if np.abs(L - L.T).max() > 1e-12 * scale:
            raise ValidationError("moment matrix must be symmetric")
        if np.linalg.eigvalsh(L).min() < -1e-10 * scale:
            raise ValidationError("moment matrix must be positive semidefinite")
        corner = 0.0
        recon = np.zeros_like(L)
        for k, (b, m) in enumerate(zip(self.atoms, self.masses)):
            if any(math.isinf(v) for v in b):
                if self.tail_scale is None:
                    raise ValidationError("infinite atom needs a tail scale")
                recon[0, 0] += m / self.tail_scale
                continue
            v = np.concatenate([np.asarray(b, dtype=float), [1.0]])
            r = 1.0 if self.ceilings is None else self.ceilings[k]
            recon += m * np.outer(v, v) / r
            corner += m / r
        if np.abs(recon - L).max() > 1e-9 * scale:
            raise ValidationError("moment matrix does not match its atoms")
        if abs(L[-1, -1] - corner) > 1e-9 * max(1.0, abs(corner)):
            raise ValidationError("corner entry does not match the atom masses")

    @classmethod
    def from_prior(cls, prior: Prior) -> "PriorMomentMatrix":
        return cls(
            prior.moment_matrix(),
            tuple(b for b, _ in prior.atoms),
            tuple(m for _, m in prior.atoms),
        )

    @classmethod
    def standardized(
        cls,
        atoms: Sequence[float],
        masses: Sequence[float],
        ceilings: Sequence[float],
        tail_scale: float | None = None,
    ) -> "PriorMomentMatrix":
        L = np.zeros((2, 2))
        for b, m, r in zip(atoms, masses, ceilings):
            if math.isinf(b):
                L[0, 0] += m / tail_scale
                continue
            v = np.array([b, 1.0])
            L += m * np.outer(v, v) / r
        return cls(
            L,
            tuple((float(b),) for b in atoms),
            tuple(float(m) for m in masses),
            tuple(float(r) for r in ceilings),
            tail_scale,
        )


@dataclass(frozen=True)
class MaximinCertificate:
    """A worst-case optimal design together with its certificate.

    ``least_favorable`` holds the atoms (possibly including infinity) and
    masses of a discrete prior whose standardized linear criterion the
    design maximizes; ``directional_slack`` is the largest directional
    derivative of that criterion toward a one-point design, nonpositive up
    to tolerance exactly when optimality holds.
    """

    design: Design
    atoms: tuple[float, ...]
    masses: tuple[float, ...]
    value: float
    directional_slack: float
    moment_matrix: PriorMomentMatrix

    def __post_init__(self) -> None:
        m = np.asarray(self.masses)
        if np.any(m <= 0.0) or abs(m.sum() - 1.0) > 1e-9:
            raise ValidationError("certificate masses must be positive, sum 1")
        if not 0.0 <= self.value <= 1.0 + 1e-9:
            raise ValidationError(f"efficiency value {self.value} outside [0, 1]")


def bayes_value(design: Design, pair: LinearModelPair, prior: Prior) -> float:
    """Prior-averaged criterion value, computed two ways and cross-checked:
    atom-by-atom averaging and the trace form against the prior moment
    matrix are identical in exact arithmetic."""
    if prior.dim != pair.s - 1:
        raise ValidationError(
            f"prior atoms have {prior.dim} components, the pair needs {pair.s - 1}"
        )
    block = schur_complement(info_matrix(design, pair))
    Ms = block.require()
    direct = math.fsum(
        m * schur_quadratic_form(block, np.asarray(b)) for b, m in prior.atoms
    )
    linear = float(np.trace(PriorMomentMatrix.from_prior(prior).L @ Ms))
    if abs(direct - linear) > 1e-9 * max(1.0, abs(direct)):
        raise SolverError(
            f"averaged criterion {direct!r} disagrees with trace form {linear!r}"
        )
    return linear


def _ratio_coeffs(design: Design, pair: LinearModelPair) -> np.ndarray:
    block = schur_complement(info_matrix(design, pair))
    return block.require()


def _tb(Ms: np.ndarray, b: np.ndarray) -> np.ndarray:
    return Ms[0, 0] * b * b + 2.0 * Ms[0, 1] * b + Ms[1, 1]


def maximin_value(design: Design, pair: LinearModelPair, bset: BSet) -> float:
    """Worst standardized criterion value of a design over the parameter
    set: inf of T(xi, b) / Rbar(b)."""
    Ms = _ratio_coeffs(design, pair)
    r = pair.interval.halfwidth

    if bset.atoms is not None:
        vals = []
        for b in bset.atoms:
            t = schur_quadratic_form(
                schur_complement(info_matrix(design, pair)), np.asarray(b)
            )
            if len(b) == 1 and pair.monomial:
                ceil = rbar_monomial(b[0], r, pair.m)
            else:
                ceil = r_value(pair, b=np.asarray(b)).value
            vals.append(t / ceil)
        return float(min(vals))

    _require_scalar_reduction(pair)
    _symmetric_halfwidth(pair.interval)

    def ratio(b: float) -> float:
        if pair.monomial:
            ceil = rbar_monomial(b, r, pair.m)
        else:
            ceil = r_value(pair, b=b).value
        return float(_tb(Ms, np.array([b]))[0]) / ceil

    d = 2.5 * r if bset.unbounded else bset.d
    n = B_SCAN if pair.monomial and pair.m == 2 else 101
    bs = np.linspace(-d, d, n)
    if pair.monomial and pair.m == 2:
        u = np.abs(bs) / r
        ceils = r**4 * np.where(u <= 2.0, 0.25 * (1.0 + 0.5 * u) ** 4, u * u)
        vals = _tb(Ms, bs) / ceils
    else:
        vals = np.array([ratio(b) for b in bs])
    k = int(np.argmin(vals))
    lo, hi = bs[max(k - 1, 0)], bs[min(k + 1, bs.size - 1)]
    best = float(vals[k])
    if lo < hi:
        res = minimize_scalar(
            ratio, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12}
        )
        best = min(best, float(res.fun))
    if bset.unbounded:
        # beyond the knee the ceiling is b^2 r^2; the tail ratio approaches
        # Ms[0,0]/r^2 monotonically after at most one stationary point
        tail = Ms[0, 0] / (r * r)
        if Ms[0, 1] != 0.0:
            bhat = -Ms[1, 1] / Ms[0, 1]
            if abs(bhat) > 2.0 * r:
                tail = min(tail, ratio(bhat))
        best = min(best, tail, ratio(2.0 * r), ratio(-2.0 * r))
    return best


def optimize_bayes(
    pair: LinearModelPair,
    prior: Prior,
    interval: DesignInterval | None = None,
    config: OptimizerConfig | None = None,
    method: str = "auto",
) -> Design:
    """Design maximizing the prior-averaged criterion.

    For monomial pairs with a scalar reduced parameter and a symmetric
    prior the optimum is the closed-form family member indexed by the
    prior's second moment; ``auto`` returns it after cross-checking the
    numeric path against it, ``closed_form``/``numeric`` force one path.
    """
    if method not in ("auto", "closed_form", "numeric"):
        raise ValidationError(f"unknown method {method!r}")
    interval = interval or pair.interval
    closed = None
    if method != "numeric" and pair.monomial and pair.s == 2 and prior.is_symmetric():
        r = _symmetric_halfwidth(interval)
        closed = xi_m_beta(pair.m, beta_bayes(prior, r), r).design
    if method == "closed_form":
        if closed is None:
            raise ValidationError(
                "no closed form for this pair/prior; use the numeric method"
            )
        return closed

    ctx = bayes_context(pair, prior, interval, config)
    numeric, _ = _run(ctx)
    if closed is None:
        return numeric
    if (
        closed.support.size != numeric.support.size
        or np.abs(closed.support - numeric.support).max() > CROSS_CHECK_TOL
        or np.abs(closed.weights - numeric.weights).max() > CROSS_CHECK_TOL
    ):
        raise SolverError(
            f"numeric optimum {numeric} strays from the closed form {closed}"
        )
    return closed


def _active_atoms(
    bset: BSet, r: float, eff, eff_inf: float, v_min: float
) -> list[float]:
    """Parameters whose efficiency sits at the minimum, clustered."""
    cut = v_min * (1.0 + CERT_TOL) + 1e-12
    if bset.atoms is not None:
        return [b[0] for b in bset.atoms if eff(b[0]) <= cut]
    d = 2.5 * r if bset.unbounded else bset.d
    bs = np.linspace(-d, d, B_SCAN)
    vals = np.array([eff(b) for b in bs])
    # polish every discrete local minimum: the curve's flat bottom can be
    # narrower than the scan step, so thresholding raw scan values misses
    # active parameters that sit between grid points
    actives: list[float] = []
    for k in range(bs.size):
        if (k == 0 or vals[k] <= vals[k - 1]) and (
            k == bs.size - 1 or vals[k] <= vals[k + 1]
        ):
            lo = bs[max(k - 1, 0)]
            hi = bs[min(k + 1, bs.size - 1)]
            b = bs[k]
            if lo < hi:
                res = minimize_scalar(
                    eff, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12}
                )
                b = float(res.x)
            if eff(b) <= cut and all(abs(b - a) > 1e-6 * max(d, 1.0) for a in actives):
                actives.append(b)
    if bset.unbounded and eff_inf <= cut:
        actives.append(math.inf)
    return actives


def optimize_maximin(
    pair: LinearModelPair,
    bset: BSet,
    interval: DesignInterval | None = None,
) -> MaximinCertificate:
    """Worst-case optimal design with a verifiable certificate.

    The design comes from the closed-form family; the certificate collects
    the active parameters and solves a small linear program for
    least-favorable masses under which the design maximizes the induced
    linear criterion (directional derivatives nonpositive on a fine grid).
    """
    from .chebdesign import hstar_solve

    _require_scalar_reduction(pair)
    if not pair.monomial:
        raise ValidationError("the worst-case closed forms need a monomial pair")
    interval = interval or pair.interval
    r = _symmetric_halfwidth(interval)
    m = pair.m

    sol = hstar_solve(bset, r, m)
    design = sol.design
    value = maximin_value(design, pair, bset)

    Ms = _ratio_coeffs(design, pair)

    def eff(b: float) -> float:
        return float(_tb(Ms, np.array([b]))[0]) / rbar_monomial(b, r, m)

    actives = _active_atoms(bset, r, eff, Ms[0, 0] / (r * r), value)
    if not actives:
        raise CertificateFailure("no active parameters found at the minimum")

    # directional derivative rows of the standardized criterion at the
    # candidate grid, one per active parameter
    block = schur_complement(info_matrix(design, pair))
    X = block.X
    grid = np.unique(
        np.concatenate([interval.grid(CERT_GRID), design.support])
    )
    basis = pair.eval_basis(grid)
    psi = basis[:, pair.m1 :] - basis[:, : pair.m1] @ X
    tail_scale = r * r
    rows = []
    ceilings = []
    for b in actives:
        if math.isinf(b):
            rows.append(psi[:, 0] ** 2 / tail_scale)
            ceilings.append(math.inf)
        else:
            ceil = rbar_monomial(b, r, m)
            rows.append((psi @ np.array([b, 1.0])) ** 2 / ceil)
            ceilings.append(ceil)
    from scipy.optimize import linprog

    R = np.stack(rows)
    na = R.shape[0]
    res = linprog(
        np.concatenate([np.zeros(na), [1.0]]),
        A_ub=np.hstack([R.T, -np.ones((grid.size, 1))]),
        b_ub=np.zeros(grid.size),
        A_eq=np.concatenate([np.ones(na), [0.0]])[None, :],
        b_eq=[1.0],
        bounds=[(0, None)] * na + [(None, None)],
        method="highs",
    )
    if not res.success:
        raise CertificateFailure(f"mass program failed: {res.message}")
    masses = np.maximum(res.x[:na], 0.0)
    masses /= masses.sum()
    slack = float(res.x[na]) - value
    if slack > CERT_TOL:
        raise CertificateFailure(
            f"directional slack {slack:.3e} exceeds tolerance {CERT_TOL}"
        )

    # a mirror pair of active parameters certifies with averaged masses too;
    # report the symmetric representative
    out = {}
    for b, w in zip(actives, masses):
        out[b] = out.get(b, 0.0) + w
    for b in list(out):
        if not math.isinf(b) and -b in out:
            avg = 0.5 * (out[b] + out[-b])
            out[b] = out[-b] = avg
    atoms = tuple(sorted(out))
    weights = tuple(out[b] for b in atoms)
    keep = tuple(w > 1e-12 for w in weights)
    atoms = tuple(a for a, k in zip(atoms, keep) if k)
    weights = tuple(w for w, k in zip(weights, keep) if k)
    ceil_map = dict(zip(actives, ceilings))
    L = PriorMomentMatrix.standardized(
        atoms,
        weights,
        [ceil_map[a] for a in atoms],
        tail_scale,
    )
    return MaximinCertificate(design, atoms, weights, value, slack, L)


def efficiency_bound_check(cert: MaximinCertificate, pair: LinearModelPair) -> None:
    """Assert the universal lower bound on the worst-case efficiency of a
    certified optimum (1/s for s extra parameters)."""
    if cert.directional_slack > CERT_TOL:
        raise NotOptimal(
            f"certificate slack {cert.directional_slack:.3e} is not at an optimum"
        )
    bound = 1.0 / pair.s
    if cert.value < bound - 1e-9:
        raise BoundViolation(
            f"worst-case efficiency {cert.value} below the bound {bound}"
        )
