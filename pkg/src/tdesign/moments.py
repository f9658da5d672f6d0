"""Moment matrices of designs and the Schur complement behind the linear
criteria.

For a nested linear pair the inner least-squares minimization over the small
model collapses into a quadratic form: with the moment matrix M(xi) split
into blocks for the shared functions f_0..f_{m-s} and the trailing ones,
the criterion equals (b^T, 1) Ms (b^T, 1)^T where Ms = M22 - X^T M11 X and X
solves M11 X = M12.  This module computes M, its blocks, and Ms, with a
deterministic rank decision so the "undefined" branch never flickers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    Design,
    InconsistentSystem,
    LinearModelPair,
    ReducedParameter,
    UndefinedSchur,
    ValidationError,
)

__all__ = ["InfoMatrix", "SchurBlock", "info_matrix", "schur_complement", "schur_quadratic_form"]

RANK_RTOL = 1e-12
CONSISTENCY_RTOL = 1e-9


@dataclass(frozen=True, eq=False)
class InfoMatrix:
    """Symmetric moment matrix of a design with its block split sizes."""

    M: np.ndarray
    n_shared: int  # rows/cols of the M11 block, m - s + 1
    s: int

    def __post_init__(self) -> None:
        M = np.asarray(self.M, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise ValidationError("moment matrix must be square")
        if self.n_shared + self.s != M.shape[0] or self.n_shared < 1 or self.s < 1:
            raise ValidationError("block sizes do not partition the matrix")
        if np.max(np.abs(M - M.T)) > 1e-12 * max(1.0, np.max(np.abs(M))):
            raise ValidationError("moment matrix is not symmetric")
        tr = float(np.trace(M))
        min_eig = float(np.linalg.eigvalsh(M)[0])
        if min_eig < -1e-10 * max(tr, 1.0):
            raise ValidationError(f"moment matrix has eigenvalue {min_eig}, not PSD")
        Mc = M.copy()
        Mc.setflags(write=False)
        object.__setattr__(self, "M", Mc)

    @property
    def M11(self) -> np.ndarray:
        k = self.n_shared
        return self.M[:k, :k]

    @property
    def M12(self) -> np.ndarray:
        k = self.n_shared
        return self.M[:k, k:]

    @property
    def M22(self) -> np.ndarray:
        k = self.n_shared
        return self.M[k:, k:]


@dataclass(frozen=True, eq=False)
class SchurBlock:
    """Schur complement Ms = M22 - X^T M11 X with the solving X.

    ``defined`` is False when M11 X = M12 is inconsistent at the rank
    tolerance; the criterion then has no quadratic-form representation and
    consumers must fall back to direct least squares.
    """

    Ms: np.ndarray | None
    X: np.ndarray | None
    defined: bool

    def require(self) -> np.ndarray:
        if not self.defined or self.Ms is None:
            raise UndefinedSchur("Schur complement is undefined for this matrix")
        return self.Ms


def info_matrix(design: Design, pair: LinearModelPair) -> InfoMatrix:
    """Moment matrix with entries sum_k w_k f_i(x_k) f_j(x_k)."""
    vals = pair.eval_basis(design.support)  # (n_points, m2)
    M = (vals * design.weights[:, None]).T @ vals
    M = 0.5 * (M + M.T)
    return InfoMatrix(M, pair.m1, pair.s)


def schur_complement(M: InfoMatrix, strict: bool = False) -> SchurBlock:
    """Solve M11 X = M12 (minimum-norm) and form M22 - X^T M11 X.

    Singular values of M11 below 1e-12 of the largest are treated as zero.
    The result is invariant to which solution X is taken whenever the system
    is consistent; inconsistency yields ``defined=False``, or
    InconsistentSystem when ``strict``.
    """
    M11, M12, M22 = M.M11, M.M12, M.M22
    U, sv, Vt = np.linalg.svd(M11, full_matrices=False)
    cutoff = RANK_RTOL * (sv[0] if sv.size and sv[0] > 0.0 else 1.0)
    inv = np.where(sv > cutoff, 1.0 / np.where(sv > cutoff, sv, 1.0), 0.0)
    X = Vt.T @ (inv[:, None] * (U.T @ M12))
    residual = float(np.max(np.abs(M11 @ X - M12))) if M12.size else 0.0
    scale = 1.0 + float(np.max(np.abs(M12))) if M12.size else 1.0
    if residual > CONSISTENCY_RTOL * scale:
        if strict:
            raise InconsistentSystem(
                f"M11 X = M12 residual {residual:.3e} exceeds tolerance"
            )
        return SchurBlock(None, None, False)
    Ms = M22 - X.T @ M11 @ X
    Ms = 0.5 * (Ms + Ms.T)
    return SchurBlock(Ms, X, True)


def schur_quadratic_form(
    block: SchurBlock, b: ReducedParameter | float | "np.ndarray"
) -> float:
    """(b^T, 1) Ms (b^T, 1)^T, the criterion value at reduced parameter b."""
    Ms = block.require()
    s = Ms.shape[0]
    bb = ReducedParameter.coerce(b, s).b
    v = np.concatenate([np.asarray(bb, dtype=float), [1.0]])
    return float(v @ Ms @ v)
