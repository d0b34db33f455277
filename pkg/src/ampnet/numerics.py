"""Dense float64 linear algebra, decompositions, and seeded random streams.

Conventions used throughout the package: vectors are 1-D float64 arrays,
matrices are 2-D float64 arrays, and batches of vectors are stored as the
columns of a 2-D array.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

RANK_TOL = 1e-12          # relative cutoff s_i > RANK_TOL * s_1 for the economy SVD
ORTH_TOL = 1e-10          # max-abs tolerance on U'U - I and V'V - I
RECON_TOL = 1e-9          # relative Frobenius tolerance on U diag(s) V' - A


class SvdError(np.linalg.LinAlgError):
    """Raised when a factorization fails to converge or violates its contract."""


@dataclass
class SvdFactors:
    """Economy-sized SVD A = U @ diag(s) @ V.T with rank-R factors.

    U is M x R and V is N x R, both with orthonormal columns; s holds the R
    positive singular values sorted in non-increasing order.
    """

    U: np.ndarray
    s: np.ndarray
    V: np.ndarray

    @property
    def rank(self):
        return self.s.size

    def reconstruct(self):
        return (self.U * self.s) @ self.V.T


@dataclass
class RngStream:
    """Deterministic random stream: one seed, one reproducible sequence.

    Identical seeds give byte-identical sequences (PCG64 keyed by a
    SeedSequence).  Use spawn() to derive independent child streams for
    parallel workers.
    """

    seed: int
    _spawn_key: tuple = ()
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        ss = np.random.SeedSequence(self.seed, spawn_key=self._spawn_key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def spawn(self, key):
        """Independent child stream number `key` of this stream."""
        return RngStream(self.seed, self._spawn_key + (int(key),))

    @property
    def gen(self):
        return self._gen


def matmul(A, B):
    """Matrix product A @ B with an explicit inner-dimension check."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape[-1] != B.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ ({A.shape} vs {B.shape})")
    return A @ B


def svd(A):
    """Economy-sized SVD of A, truncated at rank s_i > 1e-12 * s_1.

    Returns SvdFactors and asserts the orthonormality / reconstruction
    contract (raises SvdError if LAPACK fails to converge or the factors do
    not reproduce A).
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or min(A.shape) < 1:
        raise ValueError("svd expects a 2-D matrix with at least one row and column")
    if not np.all(np.isfinite(A)):
        raise ValueError("svd: input has non-finite entries")
    try:
        U, s, Vt = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError as e:  # non-convergence in LAPACK
        raise SvdError(f"svd did not converge: {e}") from e
    if s[0] == 0.0:
        raise SvdError("svd: zero matrix has no positive singular values")
    r = int(np.sum(s > RANK_TOL * s[0]))
    f = SvdFactors(U=np.ascontiguousarray(U[:, :r]), s=s[:r].copy(),
                   V=np.ascontiguousarray(Vt[:r].T))
    _check_svd(A, f)
    return f


def _check_svd(A, f):
    r = f.rank
    if np.max(np.abs(f.U.T @ f.U - np.eye(r))) > ORTH_TOL:
        raise SvdError("svd: U columns not orthonormal to tolerance")
    if np.max(np.abs(f.V.T @ f.V - np.eye(r))) > ORTH_TOL:
        raise SvdError("svd: V columns not orthonormal to tolerance")
    if np.any(np.diff(f.s) > 0) or np.any(f.s <= 0):
        raise SvdError("svd: singular values not positive and non-increasing")
    err = np.linalg.norm(f.reconstruct() - A) / max(np.linalg.norm(A), 1e-300)
    if err > RECON_TOL:
        raise SvdError(f"svd: reconstruction error {err:.3e} above tolerance")


def spectral_norm(A):
    """Largest singular value of A."""
    return float(np.linalg.svd(np.asarray(A, dtype=np.float64), compute_uv=False)[0])


def solve_spd(C, b):
    """Solve C x = b for symmetric positive definite C (Cholesky).

    Raises np.linalg.LinAlgError when the factorization detects a non-SPD
    matrix.
    """
    C = np.asarray(C, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError("solve_spd expects a square matrix")
    if C.shape[0] != b.shape[0]:
        raise ValueError("solve_spd: dimension mismatch between C and b")
    try:
        c, low = scipy.linalg.cho_factor(C, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as e:
        raise np.linalg.LinAlgError(f"solve_spd: matrix is not SPD ({e})") from e
    return scipy.linalg.cho_solve((c, low), b, check_finite=False)


def gaussian(rng, n, mean=0.0, variance=1.0):
    """n i.i.d. normal samples with the given mean and variance."""
    if variance < 0:
        raise ValueError("gaussian: variance must be non-negative")
    if variance == 0.0:
        return np.full(n, float(mean))
    return rng.gen.normal(mean, np.sqrt(variance), size=n)
