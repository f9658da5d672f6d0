"""Monte-Carlo power of the F-test for a constant against a quadratic.

Candidate designs enter as realized observation counts.  Each replication
draws errors from a counter-based stream, so a (grid point, replication,
observation) triple always consumes the same random slots no matter how
the work is split: curves are reproducible bit for bit for a fixed seed,
and the compiled and plain-numpy samplers agree on every rejection count.
The F statistic never needs an explicit fit per replication; with the
design fixed, both residual sums reduce to quadratic forms in per-design
accumulators.
"""

import csv
import math
import os
import warnings
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np
from scipy.stats import f as f_dist
from scipy.stats import ncf

from .core import (
    Design,
    SingularFit,
    TooFewObservations,
    ValidationError,
)

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN64 = 0x9E3779B97F4A7C15
SLOTS = 4  # per observation: two for the normal, one Bernoulli, one Cauchy
U53 = 2.0**-53


def _mix64(z: int) -> int:
    """Finalizer scrambling a 64-bit counter into an independent word."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class RealizedDesign:
    """Integer observation counts at fixed support points."""

    points: np.ndarray
    counts: np.ndarray

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float)
        cts = np.asarray(self.counts)
        if pts.ndim != 1 or cts.shape != pts.shape or pts.size == 0:
            raise ValidationError("points and counts must be matching 1-d arrays")
        if not np.all(np.isfinite(pts)) or np.any(np.diff(pts) <= 0.0):
            raise ValidationError("support points must be finite and increasing")
        if not np.issubdtype(cts.dtype, np.integer) or np.any(cts < 1):
            raise ValidationError("counts must be positive integers")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "counts", cts.astype(np.int64))

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def expand(self) -> np.ndarray:
        """All observation locations, one entry per count."""
        return np.repeat(self.points, self.counts)


@dataclass(frozen=True)
class TruthModel:
    """Quadratic data-generating mean with curvature swept by vartheta.

    eta(x) = intercept + (slope + slope_per_curvature * vartheta) x
             + vartheta x^2
    """

    intercept: float = 3.0
    slope: float = 0.0
    slope_per_curvature: float = 0.0

    @classmethod
    def slope_tied(cls) -> "TruthModel":
        """Slope locked to half the curvature; the coefficient ratio stays
        1/2 along the whole sweep."""
        return cls(intercept=3.0, slope=0.0, slope_per_curvature=0.5)

    @classmethod
    def slope_fixed(cls) -> "TruthModel":
        """Slope pinned at 1/8 while the curvature sweeps; the coefficient
        ratio runs away as vartheta crosses zero."""
        return cls(intercept=3.0, slope=0.125, slope_per_curvature=0.0)

    def coefficients(self, vartheta: float) -> tuple[float, float, float]:
        return (
            self.intercept,
            self.slope + self.slope_per_curvature * vartheta,
            vartheta,
        )

    def eta(self, x: np.ndarray, vartheta: float) -> np.ndarray:
        c0, c1, c2 = self.coefficients(vartheta)
        x = np.asarray(x, dtype=float)
        return c0 + c1 * x + c2 * x * x


@dataclass(frozen=True)
class SimulationSpec:
    """One power-curve run: truth, curvature grid, noise and budget."""

    truth: TruthModel
    vartheta_grid: Sequence[float]
    sigma2: float = 0.5
    contamination: float = 0.0
    cauchy_scale: float = 1.0
    level: float = 0.05
    replications: int = 50000
    seed: int = 0

    def __post_init__(self) -> None:
        grid = np.asarray(self.vartheta_grid, dtype=float)
        if grid.ndim != 1 or grid.size == 0 or not np.all(np.isfinite(grid)):
            raise ValidationError("vartheta grid must be a finite 1-d array")
        object.__setattr__(self, "vartheta_grid", grid)
        if not 0.0 < self.level < 1.0:
            raise ValidationError(f"level must lie in (0,1), got {self.level}")
        if self.sigma2 <= 0.0:
            raise ValidationError("noise variance must be positive")
        if not 0.0 <= self.contamination < 1.0:
            raise ValidationError("contamination fraction must lie in [0,1)")
        if self.cauchy_scale <= 0.0:
            raise ValidationError("Cauchy scale must be positive")
        if self.replications < 1:
            raise ValidationError("need at least one replication")


@dataclass(frozen=True)
class PowerCurve:
    """Rejection frequencies over the curvature grid, with binomial SE."""

    vartheta: np.ndarray
    power: np.ndarray
    stderr: np.ndarray
    design_id: str
    contamination: float
    replications: int

    def write_csv(self, fp: IO[str]) -> None:
        writer = csv.writer(fp)
        writer.writerow(["vartheta2", "power", "stderr", "design_id", "contamination"])
        for v, p, se in zip(self.vartheta, self.power, self.stderr):
            writer.writerow(
                [f"{v:.17g}", f"{p:.17g}", f"{se:.17g}", self.design_id,
                 f"{self.contamination:.17g}"]
            )


def efficient_round(design: Design, n: int) -> RealizedDesign:
    """Apportion n observations to the design weights.

    Start from ceil((n - l/2) w_i), then move single observations by the
    quotient rule until the total is exact; ties keep the first index.
    """
    length = design.support.size
    if n < length:
        raise TooFewObservations(
            f"{n} observations cannot cover {length} support points"
        )
    w = design.weights
    counts = np.ceil((n - 0.5 * length) * w).astype(np.int64)
    counts = np.maximum(counts, 1)
    while counts.sum() > n:
        counts[np.argmax((counts - 1) / w)] -= 1
    while counts.sum() < n:
        counts[np.argmin(counts / w)] += 1
    return RealizedDesign(design.support, counts)


def _quadratic_gram_inverse(x: np.ndarray) -> np.ndarray:
    if np.unique(x).size < 3:
        raise SingularFit(
            "fitting a quadratic needs at least three distinct locations"
        )
    a = np.vander(x, 3, increasing=True)
    return np.linalg.inv(a.T @ a)


def f_test(x: np.ndarray, y: np.ndarray, level: float = 0.05) -> tuple[float, bool]:
    """Nested-model F statistic for a constant null against a quadratic.

    A zero quadratic residual with signal left under the null maps to an
    infinite statistic; both residuals zero mean the data are exactly
    constant and the statistic is zero.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError("x and y must be matching 1-d arrays")
    n = x.size
    if n <= 3:
        raise TooFewObservations("the quadratic fit leaves no residual df")
    g = _quadratic_gram_inverse(x)
    a = np.vander(x, 3, increasing=True)
    v = a.T @ y
    rss0 = float(np.sum((y - y.mean()) ** 2))
    rss1 = float(y @ y - v @ g @ v)
    rss1 = max(rss1, 0.0)
    diff = max(rss0 - rss1, 0.0)
    if rss1 > 0.0:
        statistic = 0.5 * diff * (n - 3) / rss1
    else:
        statistic = math.inf if diff > 0.0 else 0.0
    fcrit = float(f_dist.ppf(1.0 - level, 2, n - 3))
    return statistic, statistic > fcrit


def noncentral_power_oracle(
    realized: RealizedDesign,
    truth: TruthModel,
    vartheta: float,
    sigma2: float = 0.5,
    level: float = 0.05,
) -> float:
    """Exact normal-theory power of the F-test at one curvature value.

    The truth lies in the quadratic span, so the noncentrality is the
    count-weighted squared distance between the mean curve and its best
    constant fit, over the noise variance.
    """
    if sigma2 <= 0.0:
        raise ValidationError("noise variance must be positive")
    eta = truth.eta(realized.points, vartheta)
    n = realized.n
    resid = eta - float(realized.counts @ eta) / n
    lam = float(realized.counts @ (resid * resid)) / sigma2
    fcrit = float(f_dist.ppf(1.0 - level, 2, n - 3))
    if lam == 0.0:
        return level
    return float(ncf.sf(fcrit, 2, n - 3, lam))


# --- samplers ---------------------------------------------------------------
#
# Slot layout per observation: (u1, u2) feed a Box-Muller normal, u3 the
# contamination Bernoulli, u4 the Cauchy replacement.  The slot counter is
# ((t_index * replications + replication) * n + observation) * SLOTS + slot,
# hashed against a key derived from the seed.


def _count_rejections_numpy(
    key, t_index, replications, x, c0, c1, c2, sigma, frac, scale, g, nc3, fcrit
):
    n = x.size
    key = np.uint64(key)
    golden = np.uint64(GOLDEN64)
    reps = np.arange(replications, dtype=np.uint64)
    base = (np.uint64(t_index) * np.uint64(replications) + reps) * np.uint64(n)
    s1 = np.zeros(replications)
    s2 = np.zeros(replications)
    v1 = np.zeros(replications)
    v2 = np.zeros(replications)
    shift30, shift27, shift31, shift11 = (
        np.uint64(30), np.uint64(27), np.uint64(31), np.uint64(11),
    )
    m1 = np.uint64(0xBF58476D1CE4E5B9)
    m2 = np.uint64(0x94D049BB133111EB)

    def mix(z):
        z = (z ^ (z >> shift30)) * m1
        z = (z ^ (z >> shift27)) * m2
        return z ^ (z >> shift31)

    def unit(slot_offset, slot):
        h = mix(key + (slot_offset + np.uint64(slot)) * golden)
        return ((h >> shift11).astype(np.float64) + 0.5) * U53

    for j in range(n):
        slot = (base + np.uint64(j)) * np.uint64(SLOTS)
        u1 = unit(slot, 1)
        u2 = unit(slot, 2)
        u3 = unit(slot, 3)
        u4 = unit(slot, 4)
        eps = sigma * np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        if frac > 0.0:
            cauchy = scale * np.tan(np.pi * (u4 - 0.5))
            eps = np.where(u3 < frac, cauchy, eps)
        xj = float(x[j])
        y = c0 + (c1 + c2 * xj) * xj + eps
        s1 += y
        s2 += y * y
        v1 += xj * y
        v2 += xj * xj * y
    q = (
        g[0, 0] * s1 * s1
        + g[1, 1] * v1 * v1
        + g[2, 2] * v2 * v2
        + 2.0 * (g[0, 1] * s1 * v1 + g[0, 2] * s1 * v2 + g[1, 2] * v1 * v2)
    )
    rss0 = s2 - s1 * s1 / n
    rss1 = s2 - q
    return int(np.count_nonzero((rss0 - rss1) * nc3 > 2.0 * fcrit * rss1))


_JIT_KERNEL = None


def _compiled_kernel():
    global _JIT_KERNEL
    if _JIT_KERNEL is None:
        import numba

        golden = np.uint64(GOLDEN64)
        m1 = np.uint64(0xBF58476D1CE4E5B9)
        m2 = np.uint64(0x94D049BB133111EB)
        s30, s27, s31, s11 = (
            np.uint64(30), np.uint64(27), np.uint64(31), np.uint64(11),
        )

        @numba.njit(inline="always")
        def mix(z):
            z = (z ^ (z >> s30)) * m1
            z = (z ^ (z >> s27)) * m2
            return z ^ (z >> s31)

        @numba.njit(parallel=True, cache=False)
        def kernel(
            key, t_index, replications, x, c0, c1, c2, sigma, frac, scale, g,
            nc3, fcrit,
        ):
            n = x.size
            count = 0
            for r in numba.prange(replications):
                base = (t_index * replications + r) * n
                s1 = 0.0
                s2 = 0.0
                v1 = 0.0
                v2 = 0.0
                for j in range(n):
                    slot = np.uint64((base + j) * SLOTS)
                    h1 = mix(key + (slot + np.uint64(1)) * golden)
                    h2 = mix(key + (slot + np.uint64(2)) * golden)
                    h3 = mix(key + (slot + np.uint64(3)) * golden)
                    h4 = mix(key + (slot + np.uint64(4)) * golden)
                    u1 = ((h1 >> s11) + 0.5) * U53
                    u2 = ((h2 >> s11) + 0.5) * U53
                    u3 = ((h3 >> s11) + 0.5) * U53
                    u4 = ((h4 >> s11) + 0.5) * U53
                    if u3 < frac:
                        eps = scale * math.tan(math.pi * (u4 - 0.5))
                    else:
                        eps = sigma * math.sqrt(-2.0 * math.log(u1)) * math.cos(
                            2.0 * math.pi * u2
                        )
                    xj = x[j]
                    y = c0 + (c1 + c2 * xj) * xj + eps
                    s1 += y
                    s2 += y * y
                    v1 += xj * y
                    v2 += xj * xj * y
                q = (
                    g[0, 0] * s1 * s1
                    + g[1, 1] * v1 * v1
                    + g[2, 2] * v2 * v2
                    + 2.0
                    * (g[0, 1] * s1 * v1 + g[0, 2] * s1 * v2 + g[1, 2] * v1 * v2)
                )
                rss0 = s2 - s1 * s1 / n
                rss1 = s2 - q
                if (rss0 - rss1) * nc3 > 2.0 * fcrit * rss1:
                    count += 1
            return count

        _JIT_KERNEL = kernel
    return _JIT_KERNEL


def active_backend() -> str:
    """Which sampler a simulation will run on: 'numba' unless the
    TDESIGN_NO_NUMBA environment flag is set or the import fails."""
    if os.environ.get("TDESIGN_NO_NUMBA", ""):
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        return "numpy"
    return "numba"


def simulate_power(
    spec: SimulationSpec,
    realized: RealizedDesign,
    design_id: str | None = None,
) -> PowerCurve:
    """Rejection frequency of the level-0.05 F-test along the curvature
    grid.  Deterministic for a fixed seed regardless of backend or thread
    count: every draw is tied to its (grid, replication, observation) slot.
    """
    if spec.replications < 1000:
        warnings.warn(
            "fewer than 1000 replications: binomial noise dominates the curve",
            stacklevel=2,
        )
    x = realized.expand()
    n = x.size
    if n <= 3:
        raise TooFewObservations("the quadratic fit leaves no residual df")
    g = _quadratic_gram_inverse(x)
    fcrit = float(f_dist.ppf(1.0 - spec.level, 2, n - 3))
    key = _mix64(spec.seed)
    sigma = math.sqrt(spec.sigma2)
    backend = active_backend()
    if backend == "numba":
        threads = os.environ.get("TDESIGN_THREADS", "")
        if threads:
            import numba

            numba.set_num_threads(max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS)))
        kernel = _compiled_kernel()
        key_arg = np.uint64(key)
    else:
        kernel = _count_rejections_numpy
        key_arg = key
    power = np.empty(spec.vartheta_grid.size)
    stderr = np.empty_like(power)
    for t_index, vartheta in enumerate(spec.vartheta_grid):
        c0, c1, c2 = spec.truth.coefficients(float(vartheta))
        count = kernel(
            key_arg, t_index, spec.replications, x, c0, c1, c2, sigma,
            spec.contamination, spec.cauchy_scale, g, float(n - 3), fcrit,
        )
        p = count / spec.replications
        power[t_index] = p
        stderr[t_index] = math.sqrt(p * (1.0 - p) / spec.replications)
    if design_id is None:
        design_id = "-".join(str(int(c)) for c in realized.counts)
    return PowerCurve(
        vartheta=np.asarray(spec.vartheta_grid, dtype=float),
        power=power,
        stderr=stderr,
        design_id=design_id,
        contamination=spec.contamination,
        replications=spec.replications,
    )
