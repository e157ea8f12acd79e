"""Compound-matrix and exterior-power linear algebra.

All sectional-expansion observables reduce to minors and singular values of
small dense matrices, so plain numpy is used throughout.  Wedge bases are
ordered lexicographically over k-element index subsets.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SingularMatrixError",
    "SubspaceBasis",
    "multi_indices",
    "multiplicative_compound",
    "additive_compound",
    "wedge_inv_norm",
    "det_on_subspace",
    "qr_renormalize",
]

# conditioning floor: smallest singular value relative to largest
_SV_FLOOR = 1e-12


class SingularMatrixError(ValueError):
    pass


def _check_square(M):
    M = np.asarray(M, dtype=float) if not np.iscomplexobj(M) else np.asarray(M)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    return M


def _check_k(d, k):
    if not 1 <= k <= d:
        raise ValueError(f"compound order k={k} out of range for dimension {d}")


def multi_indices(d, k):
    """Lexicographic k-subsets of {0..d-1}; the wedge basis ordering."""
    return list(itertools.combinations(range(d), k))


def multiplicative_compound(M, k):
    """k-th multiplicative compound: matrix of all k-by-k minors of M."""
    M = _check_square(M)
    d = M.shape[0]
    _check_k(d, k)
    idx = multi_indices(d, k)
    n = len(idx)
    out = np.empty((n, n), dtype=M.dtype)
    for r, rows in enumerate(idx):
        sub = M[np.ix_(rows, range(d))]
        for c, cols in enumerate(idx):
            out[r, c] = np.linalg.det(sub[:, cols])
    return out


def additive_compound(A, k):
    """k-th additive compound: generator of the wedge action of exp(tA).

    Entry rules on k-subsets I, J:
      I == J                -> sum of a_ii over i in I
      |I & J| == k-1        -> (-1)^(pos_I(i)+pos_J(j)) * a_ij, where
                               {i} = I - J and {j} = J - I
      otherwise             -> 0
    """
    A = _check_square(A)
    d = A.shape[0]
    _check_k(d, k)
    idx = multi_indices(d, k)
    n = len(idx)
    out = np.zeros((n, n), dtype=A.dtype)
    for r, I in enumerate(idx):
        for c, J in enumerate(idx):
            if I == J:
                out[r, c] = sum(A[i, i] for i in I)
                continue
            inter = set(I) & set(J)
            if len(inter) != k - 1:
                continue
            (i,) = set(I) - inter
            (j,) = set(J) - inter
            sign = (-1) ** (I.index(i) + J.index(j))
            out[r, c] = sign * A[i, j]
    return out


def wedge_inv_norm(M, p):
    """Operator norm of the p-th wedge power of M^{-1}.

    Equals the reciprocal of the product of the p smallest singular values
    of M, which is the sectional-contraction observable.
    """
    M = _check_square(M)
    d = M.shape[0]
    _check_k(d, p)
    sv = np.linalg.svd(M, compute_uv=False)
    if sv[0] == 0.0 or sv[-1] <= _SV_FLOOR * sv[0]:
        raise SingularMatrixError(
            f"matrix is singular to working precision (sv ratio "
            f"{0.0 if sv[0] == 0.0 else sv[-1] / sv[0]:.3e})"
        )
    # sv is sorted descending; take the p smallest
    return 1.0 / float(np.prod(sv[d - p:]))


@dataclass
class SubspaceBasis:
    """Spanning vectors of a linear subspace, one vector per row."""

    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=float))
        r, d = self.vectors.shape
        if r > d:
            raise ValueError(f"{r} vectors cannot be independent in dimension {d}")
        g = self.vectors @ self.vectors.T
        if np.linalg.det(g) <= _SV_FLOOR ** 2:
            raise ValueError("basis vectors are linearly dependent")

    @property
    def matrix(self):
        """Column matrix, shape (ambient_dim, rank)."""
        return self.vectors.T

    @property
    def rank(self):
        return self.vectors.shape[0]


def det_on_subspace(M, basis):
    """Volume expansion factor of M restricted to span(basis).

    Gram-ratio form: sqrt(det G(M B) / det G(B)); independent of the choice
    of spanning set for the same subspace.
    """
    M = _check_square(M)
    B = basis.matrix
    if B.shape[0] != M.shape[0]:
        raise ValueError("basis ambient dimension does not match matrix")
    MB = M @ B
    g0 = np.linalg.det(B.T @ B)
    g1 = np.linalg.det(MB.T @ MB)
    if g1 < 0:
        g1 = 0.0
    return math.sqrt(g1 / g0)


def qr_renormalize(F):
    """QR factorization with positive diagonal; returns (Q, log diag R).

    Used to renormalize evolving frames: Q replaces the frame and the log
    diagonal accumulates per-column growth.
    """
    F = np.asarray(F, dtype=float)
    if F.ndim != 2:
        raise ValueError("frame must be a 2-d array of column vectors")
    q, r = np.linalg.qr(F)
    diag = np.diag(r).copy()
    if np.any(np.abs(diag) <= _SV_FLOOR * np.max(np.abs(diag), initial=0.0)):
        raise SingularMatrixError("frame has collapsed to a degenerate set")
    flip = np.sign(diag)
    q = q * flip[np.newaxis, :]
    r = r * flip[:, np.newaxis]
    return q, np.log(np.diag(r))
