"""Seeded random streams, exact samplers, and the dense linear-algebra kernels.

All samplers take a :class:`numpy.random.Generator`.  Chains get their own
generator from :func:`rng_stream`, which derives independent streams from a
single seed through :class:`numpy.random.SeedSequence` spawn keys, so chains
can run in any order or concurrently without coupling their draws.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg

JITTER_START = 1e-10
JITTER_CAP = 1e-4


class CholeskyError(np.linalg.LinAlgError):
    """Matrix not positive definite even after the maximum jitter."""


def rng_stream(seed, *stream):
    """Generator for stream ``stream`` of ``seed``.

    The same ``(seed, stream)`` always yields the same sequence; distinct
    streams are statistically independent.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(ss))


def pseudo_inverse(a, tol=None):
    """Moore-Penrose pseudoinverse through the SVD.

    Singular values below ``tol * sigma_max`` are treated as zero; the default
    ``tol`` is ``eps * max(a.shape)``.
    """
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return a.T.copy()
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if tol is None:
        tol = np.finfo(float).eps * max(a.shape)
    keep = s > tol * (s[0] if s.size else 0.0)
    inv_s = np.zeros_like(s)
    inv_s[keep] = 1.0 / s[keep]
    return (vt.T * inv_s) @ u.T


class CholeskyFactor:
    """Lower-triangular ``L`` with ``A + jitter * I = L L^T``."""

    __slots__ = ("L", "jitter")

    def __init__(self, L, jitter=0.0):
        self.L = L
        self.jitter = float(jitter)

    @property
    def dim(self):
        return self.L.shape[0]

    def __repr__(self):
        return f"CholeskyFactor(dim={self.dim}, jitter={self.jitter:g})"


def jittered_cholesky(a):
    """Cholesky factor of a symmetric PSD matrix, adding diagonal jitter if needed.

    Jitter starts at ``1e-10 * trace/p`` and grows tenfold up to
    ``1e-4 * trace/p``; past that a :class:`CholeskyError` is raised.
    """
    a = np.asarray(a, dtype=float)
    a = 0.5 * (a + a.T)
    p = a.shape[0]
    if p == 0:
        return CholeskyFactor(np.zeros((0, 0)))
    try:
        return CholeskyFactor(linalg.cholesky(a, lower=True, check_finite=False))
    except linalg.LinAlgError:
        pass
    if not np.all(np.isfinite(a)):
        raise CholeskyError("matrix has non-finite entries")
    base = np.trace(a) / p
    if base <= 0:
        base = 1.0
    jitter = JITTER_START * base
    while jitter <= JITTER_CAP * base * (1 + 1e-12):
        try:
            L = linalg.cholesky(a + jitter * np.eye(p), lower=True, check_finite=False)
            return CholeskyFactor(L, jitter)
        except linalg.LinAlgError:
            jitter *= 10.0
    raise CholeskyError(
        f"matrix is not positive definite after jitter {JITTER_CAP:g}*trace/p"
    )


def spd_inverse(a):
    """Inverse of a symmetric positive definite matrix and a flag for fallback.

    Falls back to the pseudoinverse when the matrix is numerically singular;
    the flag is True in that case.
    """
    a = 0.5 * (a + a.T)
    try:
        c = linalg.cho_factor(a, lower=True, check_finite=False)
        inv = linalg.cho_solve(c, np.eye(a.shape[0]), check_finite=False)
        if np.all(np.isfinite(inv)) and np.linalg.cond(a) < 1e12:
            return 0.5 * (inv + inv.T), False
    except linalg.LinAlgError:
        pass
    inv = pseudo_inverse(a)
    return 0.5 * (inv + inv.T), True


def _chol(c):
    if c is None:
        return None
    if isinstance(c, CholeskyFactor):
        return c.L
    return np.asarray(c, dtype=float)


def sample_mvn(mean, cov_chol, rng):
    """One draw ``mean + L z`` with ``z`` standard normal."""
    mean = np.asarray(mean, dtype=float)
    L = _chol(cov_chol)
    if L.shape != (mean.size, mean.size):
        raise ValueError("covariance factor does not match the mean")
    return mean + L @ rng.standard_normal(mean.size)


def sample_matrix_normal(mean, row_chol, col_chol, rng):
    """Draw ``M + L_row Z L_col^T``.

    ``None`` for a factor means identity.  The vectorized draw (column-major)
    has covariance ``col ⊗ row``.
    """
    mean = np.asarray(mean, dtype=float)
    p, q = mean.shape
    z = rng.standard_normal((p, q))
    Lr = _chol(row_chol)
    Lc = _chol(col_chol)
    if Lr is not None:
        if Lr.shape != (p, p):
            raise ValueError("row covariance factor has the wrong shape")
        z = Lr @ z
    if Lc is not None:
        if Lc.shape != (q, q):
            raise ValueError("column covariance factor has the wrong shape")
        z = z @ Lc.T
    return mean + z


def sample_inverse_gamma(shape, rate, rng, size=None):
    """Inverse-gamma draw with density proportional to ``x^(-shape-1) exp(-rate/x)``."""
    if not (shape > 0 and rate > 0):
        raise ValueError(f"inverse-gamma needs shape > 0 and rate > 0, got {shape}, {rate}")
    return rate / rng.gamma(shape, 1.0, size=size)


def sample_inverse_wishart(scale, dof, rng):
    """Inverse-Wishart draw by the Bartlett decomposition.

    If ``A`` is the Bartlett lower-triangular factor (``A A^T ~ W(I, dof)``)
    and ``C C^T = scale``, then ``(C A^{-T})(C A^{-T})^T ~ IW(scale, dof)``.
    The mean is ``scale / (dof - p - 1)`` for ``dof > p + 1``.
    """
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    p = scale.shape[0]
    if scale.shape != (p, p):
        raise ValueError("scale matrix must be square")
    if not dof > p - 1:
        raise ValueError(f"degrees of freedom {dof} must exceed p - 1 = {p - 1}")
    try:
        C = linalg.cholesky(0.5 * (scale + scale.T), lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise ValueError("inverse-Wishart scale matrix is not positive definite") from exc
    A = np.zeros((p, p))
    A[np.diag_indices(p)] = np.sqrt(rng.chisquare(dof - np.arange(p)))
    rows, cols = np.tril_indices(p, -1)
    A[rows, cols] = rng.standard_normal(rows.size)
    # G = C A^{-T}, i.e. solve A G^T = C^T
    G = linalg.solve_triangular(A, C.T, lower=True, check_finite=False).T
    out = G @ G.T
    return 0.5 * (out + out.T)


def symmetric_power(a, power):
    """``a^power`` for a symmetric positive definite matrix via its eigendecomposition."""
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    if np.any(w <= 0):
        raise CholeskyError("matrix is not positive definite")
    return (v * w**power) @ v.T
