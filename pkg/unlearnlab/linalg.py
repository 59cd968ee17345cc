"""
Dense symmetric linear algebra for dimensional alignment.

Everything here is a pure function of its inputs. A ``DenseMatrix`` is a 2-D
float64 ``numpy.ndarray``; feature matrices are stored C x n (one column per
sample), so a covariance is ``F @ F.T``.
"""

import logging
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from unlearnlab import config
from unlearnlab.errors import (
    AllZero,
    InvalidSpectrum,
    KOutOfRange,
    NoConvergence,
    NonFinite,
    NonSquare,
    NonSymmetric,
)

logger = logging.getLogger(__name__)

DenseMatrix = np.ndarray


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenvalues sorted descending; column i of ``eigenvectors`` pairs with eigenvalue i."""

    eigenvalues: np.ndarray
    eigenvectors: DenseMatrix

    @property
    def size(self) -> int:
        return int(self.eigenvalues.shape[0])


def as_matrix(m) -> DenseMatrix:
    """Coerce to a finite 2-D float64 array."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise NonSquare(f"expected a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFinite("matrix contains NaN or Inf")
    return arr


def frobenius_norm(m: DenseMatrix) -> float:
    arr = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFinite("matrix contains NaN or Inf")
    return float(np.sqrt(np.sum(arr * arr)))


def sym_eig(a: DenseMatrix,
            tol: float = config.JACOBI_OFF_DIAGONAL_TOL,
            max_sweeps: int = config.JACOBI_MAX_SWEEPS) -> EigenDecomposition:
    """
    Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Sweeps over all (p, q) pairs, annihilating a[p, q] with a plane rotation,
    until the off-diagonal Frobenius norm drops below ``tol * ||A||_F``.
    Eigenvectors are sign-normalised so that their largest-magnitude entry is
    positive, which keeps the output deterministic.

    Raises:
        NonSquare, NonFinite, NonSymmetric, NoConvergence
    """
    a = np.array(as_matrix(a), dtype=np.float64, order="C")
    n, cols = a.shape
    if n != cols or n < 1:
        raise NonSquare(f"expected a square matrix, got {a.shape}")

    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.T)) > config.SYMMETRY_TOL * scale:
        raise NonSymmetric("matrix is not symmetric within tolerance")
    a = 0.5 * (a + a.T)

    threshold = tol * frobenius_norm(a)
    v = np.eye(n)

    for sweep in range(max_sweeps + 1):
        off = math.sqrt(2.0 * float(np.sum(np.triu(a, 1) ** 2)))
        if off <= threshold:
            break
        if sweep == max_sweeps:
            raise NoConvergence(f"Jacobi did not converge in {max_sweeps} sweeps (off={off:.3e})")

        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta >= 0.0:
                    t = 1.0 / (theta + math.sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c

                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q

                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = 0.0
                a[q, p] = 0.0

                vec_p = v[:, p].copy()
                vec_q = v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q

    eigenvalues = np.diag(a).copy()
    order = np.argsort(-eigenvalues, kind="stable")
    eigenvalues = eigenvalues[order]
    v = v[:, order]

    pivots = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[pivots, np.arange(n)])
    signs[signs == 0] = 1.0
    v = v * signs

    logger.debug(f"sym_eig converged: n={n}, sweeps={sweep}")
    return EigenDecomposition(eigenvalues=eigenvalues, eigenvectors=v)


def clamp_spectrum(eigenvalues: np.ndarray) -> np.ndarray:
    """Clamp tiny negative eigenvalues of a PSD matrix to zero."""
    return np.maximum(np.asarray(eigenvalues, dtype=np.float64), 0.0)


def effective_rank(eigenvalues: np.ndarray) -> float:
    """
    exp of the Shannon entropy of the normalised spectrum.

    Entries in [-1e-12, 0) are treated as zero; the result lies in
    [1, number of positive entries] and is invariant to scaling.
    """
    lam = np.asarray(eigenvalues, dtype=np.float64).ravel()
    if not np.all(np.isfinite(lam)):
        raise NonFinite("eigenvalues contain NaN or Inf")
    if np.any(lam < -config.SPECTRUM_NEGATIVE_TOL):
        raise InvalidSpectrum(f"eigenvalue below tolerance: {lam.min():.3e}")
    positive = lam[lam > 0.0]
    if positive.size == 0:
        raise AllZero("no strictly positive eigenvalue")

    p = positive / positive.sum()
    entropy = -float(np.sum(p * np.log(p)))
    return float(min(max(math.exp(entropy), 1.0), float(positive.size)))


def select_k(eigenvalues: np.ndarray) -> int:
    """k = ceil(effective rank), clamped to [1, C]."""
    lam = clamp_spectrum(eigenvalues)
    erank = effective_rank(lam)
    k = int(math.ceil(erank - config.EFFECTIVE_RANK_CEIL_EPS))
    return min(max(k, 1), lam.shape[0])


def top_k_projector(decomp: EigenDecomposition, k: int) -> DenseMatrix:
    """Orthogonal projector U_k U_k^T onto the top-k eigenvectors."""
    if not 1 <= k <= decomp.size:
        raise KOutOfRange(f"k={k} outside [1, {decomp.size}]")
    u = decomp.eigenvectors[:, :k]
    return u @ u.T


def principal_projector(features: DenseMatrix) -> Tuple[DenseMatrix, int, EigenDecomposition]:
    """
    Projector onto the effective-rank principal subspace of ``features @ features.T``.

    ``features`` is C x n (uncentered). Returns (P, k, decomposition).
    Raises AllZero when the covariance has no positive eigenvalue.
    """
    f = as_matrix(features)
    decomp = sym_eig(f @ f.T)
    k = select_k(decomp.eigenvalues)
    return top_k_projector(decomp, k), k, decomp
