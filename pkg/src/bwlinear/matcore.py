"""Dense matrix kernels.

Spectral decompositions, matrix square roots, thin SVDs, polar factors,
Kronecker/vec utilities and seeded Haar-random orthogonal matrices.
Vectorization is column-major throughout, so that
``vec(A @ B @ C) == kron(C.T, A) @ vec(B)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import InputError, NotPsdError, SingularityError

SYM_TOL = 1e-10
CLAMP_TOL = 1e-12
RANK_TOL = 1e-10

__all__ = [
    "SymEig",
    "ThinSvd",
    "PsdMatrix",
    "spectral_decompose",
    "sqrtm_psd",
    "invsqrtm_pd",
    "psd_power",
    "thin_svd",
    "polar_orthogonal",
    "random_orthogonal",
    "kron",
    "vec",
    "unvec",
    "commutation",
]


@dataclass(frozen=True)
class SymEig:
    """Eigendecomposition ``S = eigvecs @ diag(eigvals) @ eigvecs.T``.

    Eigenvalues are sorted in descending order.
    """

    eigvecs: NDArray[np.float64]
    eigvals: NDArray[np.float64]

    def reconstruct(self) -> NDArray[np.float64]:
        return (self.eigvecs * self.eigvals) @ self.eigvecs.T


@dataclass(frozen=True)
class ThinSvd:
    """Thin SVD ``A = left @ diag(singvals) @ right.T`` truncated at the numerical rank."""

    left: NDArray[np.float64]
    singvals: NDArray[np.float64]
    right: NDArray[np.float64]

    @property
    def rank(self) -> int:
        return int(self.singvals.size)

    def reconstruct(self) -> NDArray[np.float64]:
        return (self.left * self.singvals) @ self.right.T


def _as_finite(a: ArrayLike, ndim: int = 2) -> NDArray[np.float64]:
    arr = np.asarray(a, dtype=float)
    if arr.ndim != ndim:
        raise InputError(f"expected a {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError("non-finite entries")
    return arr


def _as_symmetric(s: ArrayLike) -> NDArray[np.float64]:
    s = _as_finite(s)
    if s.shape[0] != s.shape[1]:
        raise InputError(f"expected a square matrix, got shape {s.shape}")
    nrm = np.linalg.norm(s)
    if np.linalg.norm(s - s.T) > SYM_TOL * max(nrm, 1.0):
        raise InputError("matrix is not symmetric")
    return 0.5 * (s + s.T)


def _fix_signs(vecs: NDArray[np.float64], mode: str) -> NDArray[np.float64]:
    """Flip columns so that a reference entry of each is positive."""
    if vecs.size == 0:
        return vecs
    if mode == "first":
        nz = np.abs(vecs) > 1e-14
        idx = np.where(nz.any(axis=0), nz.argmax(axis=0), 0)
    else:
        idx = np.abs(vecs).argmax(axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def spectral_decompose(s: ArrayLike) -> SymEig:
    """Symmetric eigendecomposition with descending eigenvalues.

    Parameters
    ----------
    s : array_like, shape (n, n)
        Symmetric matrix; symmetrized before decomposition.

    Returns
    -------
    SymEig
        Eigenpairs with the first nonzero component of every eigenvector
        made positive, so the output is deterministic.
    """
    s = _as_symmetric(s)
    w, v = np.linalg.eigh(s)
    w = w[::-1].copy()
    v = _fix_signs(v[:, ::-1].copy(), "first")
    return SymEig(v, w)


class PsdMatrix:
    """Symmetric positive semidefinite matrix with a cached eigendecomposition.

    Parameters
    ----------
    mat : array_like, shape (n, n)
        Symmetric matrix. PSD-ness is checked lazily (on first spectral use).
    factor : array_like, shape (n, r), optional
        A factor ``F`` with ``mat = F @ F.T``. When present, trace-of-root
        quantities are evaluated through singular values of ``F``, which is
        accurate at rank-deficient points.
    """

    def __init__(self, mat: ArrayLike, factor: ArrayLike | None = None):
        self.mat = _as_symmetric(mat)
        self.factor = None if factor is None else _as_finite(factor)

    @classmethod
    def from_factor(cls, f: ArrayLike) -> "PsdMatrix":
        f = _as_finite(f)
        return cls(f @ f.T, factor=f)

    @classmethod
    def coerce(cls, s: "ArrayLike | PsdMatrix") -> "PsdMatrix":
        return s if isinstance(s, PsdMatrix) else cls(s)

    @property
    def n(self) -> int:
        return self.mat.shape[0]

    @cached_property
    def eig(self) -> SymEig:
        return spectral_decompose(self.mat)

    @cached_property
    def clamped_eigvals(self) -> NDArray[np.float64]:
        """Eigenvalues with round-off negatives and numerical zeros set to 0."""
        return _clamp(self.eig.eigvals)

    @property
    def lambda_max(self) -> float:
        return float(self.eig.eigvals[0])

    @property
    def lambda_min(self) -> float:
        return float(self.eig.eigvals[-1])

    @property
    def trace(self) -> float:
        return float(np.trace(self.mat))

    def __array__(self, dtype=None, copy=None):
        return self.mat if dtype is None else self.mat.astype(dtype)

    def __repr__(self) -> str:
        return f"PsdMatrix(n={self.n})"


def _clamp(w: NDArray[np.float64]) -> NDArray[np.float64]:
    """Clamp eigenvalues of a PSD matrix.

    Values below ``-CLAMP_TOL * lambda_max`` are an error. Values within
    ``n * eps * lambda_max`` of zero are treated as exact zeros so that square
    roots of rank-deficient matrices do not pick up ``sqrt(eps)`` noise.
    """
    if w.size == 0:
        return w
    top = float(np.max(np.abs(w)))
    if w.min() < -CLAMP_TOL * max(top, np.finfo(float).tiny):
        raise NotPsdError(f"matrix has eigenvalue {w.min():.3e} < 0")
    zero = w.size * np.finfo(float).eps * top
    return np.where(w > zero, w, 0.0)


def psd_power(s: "ArrayLike | PsdMatrix", p: float) -> NDArray[np.float64]:
    """Fractional power ``S**p`` of a PSD matrix (``p >= 0``; ``S**0 = I``)."""
    s = PsdMatrix.coerce(s)
    if p == 0:
        return np.eye(s.n)
    if p < 0:
        raise InputError("use invsqrtm_pd for negative powers")
    w = s.clamped_eigvals
    v = s.eig.eigvecs
    out = (v * w**p) @ v.T
    return 0.5 * (out + out.T)


def sqrtm_psd(s: "ArrayLike | PsdMatrix") -> NDArray[np.float64]:
    """Principal square root of a PSD matrix via its eigendecomposition.

    Raises
    ------
    NotPsdError
        If an eigenvalue is below ``-1e-12 * lambda_max``.
    """
    return psd_power(s, 0.5)


def invsqrtm_pd(s: "ArrayLike | PsdMatrix", floor: float = 1e-12) -> NDArray[np.float64]:
    """Inverse principal square root of a positive definite matrix.

    Raises
    ------
    SingularityError
        If the smallest eigenvalue is below ``floor``.
    """
    s = PsdMatrix.coerce(s)
    w = s.eig.eigvals
    if w[-1] < floor:
        raise SingularityError(f"smallest eigenvalue {w[-1]:.3e} below floor {floor:.1e}")
    v = s.eig.eigvecs
    out = (v / np.sqrt(w)) @ v.T
    return 0.5 * (out + out.T)


def thin_svd(a: ArrayLike, rank_tol: float = RANK_TOL) -> ThinSvd:
    """Thin SVD truncated at numerical rank ``#{s_i > rank_tol * s_1}``.

    The largest-magnitude entry of each left singular vector is made
    positive (the matching right vector is flipped with it).
    """
    a = _as_finite(a)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    k = 0 if s.size == 0 or s[0] == 0 else int(np.sum(s > rank_tol * s[0]))
    u, s, v = u[:, :k], s[:k], vt[:k].T
    if k:
        idx = np.abs(u).argmax(axis=0)
        signs = np.sign(u[idx, np.arange(k)])
        u = u * signs
        v = v * signs
    return ThinSvd(u.copy(), s.copy(), v.copy())


def polar_orthogonal(a: ArrayLike) -> NDArray[np.float64]:
    """Orthogonal polar factor ``U @ V.T`` of a square matrix ``A = U S V.T``."""
    a = _as_finite(a)
    if a.shape[0] != a.shape[1]:
        raise InputError("polar factor needs a square matrix")
    u, _, vt = np.linalg.svd(a)
    return u @ vt


def random_orthogonal(n: int, seed: int | np.random.Generator) -> NDArray[np.float64]:
    """Haar-distributed orthogonal matrix from QR with sign correction."""
    if n < 1:
        raise InputError("n must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    return q * d


def kron(a: ArrayLike, b: ArrayLike) -> NDArray[np.float64]:
    return np.kron(_as_finite(a), _as_finite(b))


def vec(a: ArrayLike) -> NDArray[np.float64]:
    """Stack the columns of ``a`` into a vector."""
    return _as_finite(a).reshape(-1, order="F")


def unvec(v: ArrayLike, shape: tuple[int, int]) -> NDArray[np.float64]:
    v = _as_finite(v, ndim=1)
    if v.size != shape[0] * shape[1]:
        raise InputError(f"cannot reshape {v.size} entries to {shape}")
    return v.reshape(shape, order="F")


def commutation(p: int, q: int) -> NDArray[np.float64]:
    """Commutation matrix ``K`` with ``K @ vec(X) = vec(X.T)`` for ``X`` of shape (p, q)."""
    if p < 1 or q < 1:
        raise InputError("commutation sizes must be positive")
    k = np.zeros((p * q, p * q))
    i, j = np.meshgrid(np.arange(p), np.arange(q), indexing="ij")
    # X[i, j] sits at j*p + i in vec(X) and at i*q + j in vec(X.T)
    k[(i * q + j).ravel(), (j * p + i).ravel()] = 1.0
    return k
