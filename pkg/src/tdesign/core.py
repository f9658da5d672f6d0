"""Shared domain types for discriminating-design computations.

A design is a finitely supported probability measure on a compact interval:
the support points are measurement locations and the weights are the
proportions of observations to be taken there.  The remaining types describe
the two competing regression models (a nested pair of linear models, or the
Michaelis-Menten / EMAX pair), priors and parameter regions for the robust
criteria, and the reduced parameter that the linear criteria actually depend
on.

Everything here is immutable after construction and safe to share between
threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "TDesignError",
    "ValidationError",
    "SolverError",
    "WeightSumError",
    "NonpositiveWeight",
    "PointOutOfRange",
    "DuplicatePoint",
    "DomainError",
    "InconsistentSystem",
    "UndefinedSchur",
    "InconsistentEfficiency",
    "AsymmetricPrior",
    "ConvergenceFailure",
    "IterationLimit",
    "RootBracketFailure",
    "CertificateFailure",
    "BoundViolation",
    "NotOptimal",
    "TooFewObservations",
    "SingularFit",
    "UsageError",
    "Design",
    "DesignInterval",
    "LinearModelPair",
    "NonlinearModelPair",
    "ReducedParameter",
    "Prior",
    "BSet",
    "validate_design",
    "model_difference",
    "design_to_json",
    "design_from_json",
]

WEIGHT_SUM_TOL = 1e-12
MERGE_TOL = 1e-10


# ---------------------------------------------------------------------------
# Errors


class TDesignError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(TDesignError):
    """Input violates a documented invariant (CLI exit code 2)."""


class SolverError(TDesignError):
    """A numeric routine failed to converge (CLI exit code 3)."""


class WeightSumError(ValidationError):
    pass


class NonpositiveWeight(ValidationError):
    pass


class PointOutOfRange(ValidationError):
    pass


class DuplicatePoint(ValidationError):
    pass


class DomainError(ValidationError):
    """A model denominator vanishes inside the design interval."""


class InconsistentSystem(ValidationError):
    """The block system M11 X = M12 has no solution."""


class UndefinedSchur(ValidationError):
    """A Schur complement was required but is not defined."""


class InconsistentEfficiency(ValidationError):
    """An efficiency exceeded 1 beyond tolerance, indicating a broken bound."""


class AsymmetricPrior(ValidationError):
    pass


class ConvergenceFailure(SolverError):
    pass


class IterationLimit(SolverError):
    pass


class RootBracketFailure(SolverError):
    pass


class CertificateFailure(SolverError):
    """No least-favorable weights pass the directional-derivative test."""


class BoundViolation(TDesignError):
    """The s-reciprocal efficiency bound failed, implying a bug upstream."""


class NotOptimal(ValidationError):
    """A certificate check was asked for on a non-optimal input."""


class TooFewObservations(ValidationError):
    pass


class SingularFit(ValidationError):
    pass


class UsageError(TDesignError):
    """Malformed command line (CLI exit code 1)."""


# ---------------------------------------------------------------------------
# Intervals and designs


@dataclass(frozen=True)
class DesignInterval:
    """Compact interval [lower, upper] on which observations may be taken."""

    lower: float
    upper: float

    def __post_init__(self) -> None:
        lo, hi = float(self.lower), float(self.upper)
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise ValidationError("design interval must have finite endpoints")
        if not lo < hi:
            raise ValidationError(f"design interval needs lower < upper, got [{lo}, {hi}]")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def halfwidth(self) -> float:
        return 0.5 * (self.upper - self.lower)

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.upper + self.lower)

    def contains(self, x: float, tol: float = 0.0) -> bool:
        return self.lower - tol <= x <= self.upper + tol

    def grid(self, n: int) -> np.ndarray:
        return np.linspace(self.lower, self.upper, n)

    @classmethod
    def symmetric(cls, halfwidth: float) -> "DesignInterval":
        return cls(-float(halfwidth), float(halfwidth))


def _frozen_array(values: Sequence[float]) -> np.ndarray:
    arr = np.asarray(values, dtype=float).reshape(-1).copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Design:
    """Finitely supported probability measure: support points and weights.

    The constructor sorts the support and merges points closer than 1e-10 by
    summing their weights (numerical optimizers routinely emit near
    duplicates); it does not check the probability invariants, which belong
    to :func:`validate_design` so that invalid candidate designs can be
    constructed and then rejected with a precise error.
    """

    support: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        pts = np.asarray(self.support, dtype=float).reshape(-1)
        wts = np.asarray(self.weights, dtype=float).reshape(-1)
        if pts.size == 0:
            raise ValidationError("design needs at least one support point")
        if pts.size != wts.size:
            raise ValidationError(
                f"support ({pts.size}) and weights ({wts.size}) differ in length"
            )
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(wts))):
            raise ValidationError("support and weights must be finite")
        order = np.argsort(pts, kind="stable")
        pts, wts = pts[order], wts[order]
        if pts.size > 1 and np.min(np.diff(pts)) < MERGE_TOL:
            pts, wts = _merge_close(pts, wts)
        object.__setattr__(self, "support", _frozen_array(pts))
        object.__setattr__(self, "weights", _frozen_array(wts))

    def __len__(self) -> int:
        return int(self.support.size)

    def trimmed(self, threshold: float) -> "Design":
        """Drop points with weight below ``threshold`` and renormalize."""
        keep = self.weights >= threshold
        if not np.any(keep):
            raise ValidationError("trimming removed every support point")
        w = self.weights[keep]
        return Design(self.support[keep], w / w.sum())

    def __repr__(self) -> str:
        pts = ", ".join(f"{x:.6g}" for x in self.support)
        wts = ", ".join(f"{w:.6g}" for w in self.weights)
        return f"Design([{pts}], [{wts}])"


def _merge_close(pts: np.ndarray, wts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Greedy left-to-right clustering; merged location is the weight mean.
    out_x: list[float] = []
    out_w: list[float] = []
    cx, cw = pts[0] * wts[0], wts[0]
    last = pts[0]
    for x, w in zip(pts[1:], wts[1:]):
        if x - last < MERGE_TOL:
            cx += x * w
            cw += w
        else:
            out_x.append(cx / cw if cw != 0.0 else last)
            out_w.append(cw)
            cx, cw = x * w, w
        last = x
    out_x.append(cx / cw if cw != 0.0 else last)
    out_w.append(cw)
    return np.asarray(out_x), np.asarray(out_w)


def validate_design(design: Design, interval: DesignInterval) -> None:
    """Check all design invariants on the given interval; raise on the first
    violation.

    Raises
    ------
    NonpositiveWeight, WeightSumError, PointOutOfRange, DuplicatePoint
        Each names the violated invariant.
    """
    w = design.weights
    if np.any(w <= 0.0):
        bad = float(w[np.argmin(w)])
        raise NonpositiveWeight(f"weight {bad} is not strictly positive")
    total = float(np.sum(w))
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        raise WeightSumError(f"weights sum to {total!r}, not 1")
    x = design.support
    if x[0] < interval.lower or x[-1] > interval.upper:
        raise PointOutOfRange(
            f"support must lie in [{interval.lower}, {interval.upper}]"
        )
    if x.size > 1 and float(np.min(np.diff(x))) < MERGE_TOL:
        raise DuplicatePoint("support points closer than the 1e-10 separation")


# ---------------------------------------------------------------------------
# Model pairs


@dataclass(frozen=True, eq=False)
class LinearModelPair:
    """Nested pair of linear regression models sharing a basis f_0..f_m.

    The smaller model spans the first ``m1`` basis functions, the larger all
    ``m2 = m + 1`` of them.  ``s = m2 - m1`` is the number of coefficients the
    criteria see after reduction; for a scalar reduced parameter s = 2.

    Basis functions are vectorized callables; for the canonical monomial
    instantiation use :meth:`monomial`, which tags the pair so closed-form
    fast paths apply.
    """

    basis: tuple[Callable[[np.ndarray], np.ndarray], ...]
    m1: int
    m2: int
    interval: DesignInterval
    monomial: bool = False

    def __post_init__(self) -> None:
        if not (self.m2 > self.m1 >= 1):
            raise ValidationError(f"need m2 > m1 >= 1, got m1={self.m1}, m2={self.m2}")
        if len(self.basis) != self.m2:
            raise ValidationError(
                f"basis needs m2={self.m2} functions, got {len(self.basis)}"
            )
        grid = self.interval.grid(201)
        gram = self.eval_basis(grid)
        gram = gram.T @ gram / grid.size
        if np.linalg.cond(gram) >= 1e12:
            raise ValidationError(
                "basis functions are numerically dependent on the interval"
            )

    @property
    def m(self) -> int:
        return self.m2 - 1

    @property
    def s(self) -> int:
        return self.m2 - self.m1

    def eval_basis(self, x: np.ndarray) -> np.ndarray:
        """Evaluate all basis functions; shape (..., m2)."""
        x = np.asarray(x, dtype=float)
        if self.monomial:
            return np.vander(np.atleast_1d(x).ravel(), self.m2, increasing=True).reshape(
                x.shape + (self.m2,)
            )
        return np.stack([np.broadcast_to(f(x), x.shape) for f in self.basis], axis=-1)

    def fixed_part(self, b: "ReducedParameter | float | Sequence[float]") -> Callable:
        """The target of the inner approximation: b_1 f_{m1} + ... + f_m.

        This is the part of the model difference the smaller model cannot
        absorb, normalized so the leading coefficient is 1.
        """
        bb = ReducedParameter.coerce(b, self.s).b
        coeff = np.concatenate([bb, [1.0]])

        def g(x: np.ndarray) -> np.ndarray:
            vals = self.eval_basis(np.asarray(x, dtype=float))
            return vals[..., self.m1:] @ coeff

        return g

    @classmethod
    def monomial_pair(
        cls, degree1: int, degree2: int, interval: DesignInterval
    ) -> "LinearModelPair":
        """Polynomial models of the two given degrees, monomial basis."""
        if degree2 <= degree1 or degree1 < 0:
            raise ValidationError(
                f"need degree2 > degree1 >= 0, got {degree1}, {degree2}"
            )
        funcs = tuple(_monomial(k) for k in range(degree2 + 1))
        return cls(funcs, degree1 + 1, degree2 + 1, interval, monomial=True)


def _monomial(k: int) -> Callable[[np.ndarray], np.ndarray]:
    def f(x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) ** k

    return f


@dataclass(frozen=True)
class NonlinearModelPair:
    """Michaelis-Menten family against a fixed EMAX model.

    eta1(x, t) = t11 x / (t12 + x) is the family fitted in the inner
    minimization; eta2(x) = t20 + t21 x / (t22 + x) is fixed at ``theta2``.
    ``theta12_bounds`` is the box for the nonlinear Michaelis-Menten
    parameter (the linear one is profiled out in closed form).
    """

    theta2: tuple[float, float, float]
    interval: DesignInterval
    theta12_bounds: tuple[float, float] = (1e-3, 1e3)

    def __post_init__(self) -> None:
        t20, t21, t22 = (float(v) for v in self.theta2)
        object.__setattr__(self, "theta2", (t20, t21, t22))
        lo, hi = self.interval.lower, self.interval.upper
        if -t22 >= lo - 1e-12 and -t22 <= hi + 1e-12:
            raise DomainError(f"theta22={t22} puts a pole inside [{lo}, {hi}]")
        b0, b1 = (float(v) for v in self.theta12_bounds)
        if not b0 < b1:
            raise ValidationError("theta12 bounds must satisfy lower < upper")
        # the pole of eta1 sits at x = -theta12; the whole box must keep it
        # off the design interval
        if max(-b1, lo) <= min(-b0, hi):
            raise DomainError("theta12 box puts a pole inside the design interval")
        object.__setattr__(self, "theta12_bounds", (b0, b1))

    @classmethod
    def full_family(
        cls, theta2: Sequence[float], interval: "DesignInterval"
    ) -> "NonlinearModelPair":
        """Pair with the widest pole-free box on the near side of the
        interval, so the inner fit ranges over essentially the whole
        Michaelis-Menten family admissible on [lo, hi].  Needs lo > 0."""
        lo = interval.lower
        if lo <= 0.0:
            raise DomainError(
                "the wide theta12 box needs a strictly positive interval"
            )
        return cls(tuple(theta2), interval, (-lo * (1.0 - 1e-3), 1e3))

    def eta2(self, x: np.ndarray) -> np.ndarray:
        t20, t21, t22 = self.theta2
        x = np.asarray(x, dtype=float)
        return t20 + t21 * x / (t22 + x)

    def eta1(self, x: np.ndarray, theta1: Sequence[float]) -> np.ndarray:
        t11, t12 = float(theta1[0]), float(theta1[1])
        x = np.asarray(x, dtype=float)
        return t11 * x / (t12 + x)

    def with_theta2(self, theta2: Sequence[float]) -> "NonlinearModelPair":
        return NonlinearModelPair(tuple(theta2), self.interval, self.theta12_bounds)


@dataclass(frozen=True)
class ReducedParameter:
    """Ratios of trailing coefficients that determine the linear criteria.

    For a nested pair with gap s the criterion depends on theta2 only through
    the s-1 ratios b_i of the coefficients the smaller model cannot match,
    each divided by the leading one.
    """

    b: tuple[float, ...]

    def __post_init__(self) -> None:
        vals = tuple(float(v) for v in self.b)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError("reduced parameter entries must be finite")
        object.__setattr__(self, "b", vals)

    @classmethod
    def coerce(
        cls, b: "ReducedParameter | float | Sequence[float]", s: int
    ) -> "ReducedParameter":
        if isinstance(b, ReducedParameter):
            rp = b
        elif np.isscalar(b):
            rp = cls((float(b),))
        else:
            rp = cls(tuple(float(v) for v in b))
        if len(rp.b) != s - 1:
            raise ValidationError(
                f"reduced parameter needs length s-1={s - 1}, got {len(rp.b)}"
            )
        return rp

    def __float__(self) -> float:
        if len(self.b) != 1:
            raise TypeError("only a scalar reduced parameter converts to float")
        return self.b[0]


@dataclass(frozen=True, eq=False)
class Prior:
    """Discrete prior over the reduced parameter (atoms and masses).

    Continuous priors enter as quadrature discretizations; the
    uniform-efficiency density keeps its half-width in
    ``uniform_eff_halfwidth`` so closed-form paths can recognize it.  Atoms
    are stored sorted, which makes prior-order invariance bit-exact.
    """

    atoms: tuple[tuple[tuple[float, ...], float], ...]
    uniform_eff_halfwidth: float | None = None

    def __post_init__(self) -> None:
        norm: list[tuple[tuple[float, ...], float]] = []
        for b, mass in self.atoms:
            bt = (float(b),) if np.isscalar(b) else tuple(float(v) for v in b)
            if not all(math.isfinite(v) for v in bt):
                raise ValidationError("prior atoms must be finite")
            m = float(mass)
            if m <= 0.0:
                raise NonpositiveWeight(f"prior mass {m} is not strictly positive")
            norm.append((bt, m))
        norm.sort(key=lambda a: a[0])
        for left, right in zip(norm, norm[1:]):
            if left[0] == right[0]:
                raise DuplicatePoint(f"duplicate prior atom {left[0]}")
        total = math.fsum(m for _, m in norm)
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            raise WeightSumError(f"prior masses sum to {total!r}, not 1")
        object.__setattr__(self, "atoms", tuple(norm))

    @classmethod
    def from_scalars(
        cls,
        bs: Sequence[float],
        masses: Sequence[float],
        uniform_eff_halfwidth: float | None = None,
    ) -> "Prior":
        if len(bs) != len(masses):
            raise ValidationError("atoms and masses differ in length")
        return cls(
            tuple(((float(b),), float(m)) for b, m in zip(bs, masses)),
            uniform_eff_halfwidth,
        )

    @classmethod
    def point(cls, b: float) -> "Prior":
        return cls.from_scalars([b], [1.0])

    @classmethod
    def symmetric_pair(cls, b: float) -> "Prior":
        if b == 0.0:
            return cls.point(0.0)
        return cls.from_scalars([-abs(b), abs(b)], [0.5, 0.5])

    @property
    def dim(self) -> int:
        return len(self.atoms[0][0])

    def scalar_atoms(self) -> tuple[np.ndarray, np.ndarray]:
        if self.dim != 1:
            raise ValidationError("prior atoms are not scalar")
        bs = np.array([b[0] for b, _ in self.atoms])
        ms = np.array([m for _, m in self.atoms])
        return bs, ms

    def second_moment(self) -> float:
        bs, ms = self.scalar_atoms()
        return float(np.sum(ms * bs * bs))

    def is_symmetric(self, tol: float = 1e-12) -> bool:
        """True if the prior is invariant under b -> -b within tol."""
        table = {b: m for b, m in self.atoms}
        for b, m in self.atoms:
            neg = tuple(-v for v in b)
            partner = table.get(neg)
            if partner is None:
                match = [
                    mm
                    for bb, mm in self.atoms
                    if all(abs(x + y) <= tol for x, y in zip(bb, b))
                ]
                if not match:
                    return False
                partner = match[0]
            if abs(partner - m) > tol:
                return False
        return True

    def moment_matrix(self) -> np.ndarray:
        """The s x s matrix E[(b, 1)(b, 1)^T]; bottom-right entry is 1."""
        s = self.dim + 1
        out = np.zeros((s, s))
        for b, m in self.atoms:
            v = np.concatenate([np.asarray(b, dtype=float), [1.0]])
            out += m * np.outer(v, v)
        return out


@dataclass(frozen=True)
class BSet:
    """Compact set of reduced parameters for the maximin criteria.

    Either a symmetric interval [-d, d] for a scalar b (s = 2), the whole
    compactified real line (``unbounded``, supported only where a closed
    form covers the limit), or a finite list of b vectors.
    """

    d: float | None = None
    unbounded: bool = False
    atoms: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self) -> None:
        kinds = (self.d is not None) + self.unbounded + (self.atoms is not None)
        if kinds != 1:
            raise ValidationError("BSet needs exactly one of d, unbounded, atoms")
        if self.d is not None:
            dv = float(self.d)
            if not (math.isfinite(dv) and dv > 0.0):
                raise ValidationError(f"interval half-width must be positive, got {dv}")
            object.__setattr__(self, "d", dv)
        if self.atoms is not None:
            norm = tuple(
                ((float(b),) if np.isscalar(b) else tuple(float(v) for v in b))
                for b in self.atoms
            )
            if not norm:
                raise ValidationError("finite BSet must be nonempty")
            object.__setattr__(self, "atoms", norm)

    @classmethod
    def interval(cls, d: float) -> "BSet":
        return cls(d=d)

    @classmethod
    def real_line(cls) -> "BSet":
        return cls(unbounded=True)

    @classmethod
    def finite(cls, bs: Sequence[float | Sequence[float]]) -> "BSet":
        return cls(atoms=tuple(bs))


# ---------------------------------------------------------------------------
# Model difference


def model_difference(
    pair: LinearModelPair | NonlinearModelPair,
    theta1: Sequence[float],
    theta2: Sequence[float],
    x: float | np.ndarray,
):
    """eta1(x, theta1) - eta2(x, theta2) for either model pair."""
    xv = np.asarray(x, dtype=float)
    if isinstance(pair, LinearModelPair):
        t1 = np.asarray(theta1, dtype=float)
        t2 = np.asarray(theta2, dtype=float)
        if t1.size != pair.m1 or t2.size != pair.m2:
            raise ValidationError(
                f"expected {pair.m1} and {pair.m2} coefficients, "
                f"got {t1.size} and {t2.size}"
            )
        vals = pair.eval_basis(xv)
        diff = vals[..., : pair.m1] @ t1 - vals @ t2
    else:
        t11, t12 = (float(v) for v in theta1)
        t20, t21, t22 = (float(v) for v in theta2)
        if np.any(t12 + xv == 0.0) or np.any(t22 + xv == 0.0):
            raise DomainError("model denominator vanishes at a requested point")
        diff = t11 * xv / (t12 + xv) - (t20 + t21 * xv / (t22 + xv))
    if np.ndim(x) == 0:
        return float(diff)
    return diff


# ---------------------------------------------------------------------------
# JSON serialization (the CLI lingua franca)


def _fmt(x: float) -> str:
    # 17 significant digits round-trip any double exactly.
    return format(float(x), ".17g")


def design_to_json(design: Design, interval: DesignInterval) -> str:
    support = ",".join(_fmt(x) for x in design.support)
    weights = ",".join(_fmt(w) for w in design.weights)
    return (
        f'{{"interval":[{_fmt(interval.lower)},{_fmt(interval.upper)}],'
        f'"support":[{support}],"weights":[{weights}]}}'
    )


def design_from_json(text: str) -> tuple[Design, DesignInterval]:
    try:
        obj = json.loads(text)
        lo, hi = obj["interval"]
        design = Design(obj["support"], obj["weights"])
        interval = DesignInterval(float(lo), float(hi))
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ValidationError(f"malformed design JSON: {exc}") from exc
    validate_design(design, interval)
    return design, interval
