"""Bures-Wasserstein losses and their gradients.

Covariance space::

    L(S) = B^2(S, S0) = tr(S) + tr(S0) - 2 tr((S0^{1/2} S S0^{1/2})^{1/2})

Function space, for an end-to-end matrix ``W`` of shape (n, m)::

    L1(W)     = L(W W^T)
    L1_tau(W) = L(W W^T + tau I)

The smoothing parameter ``tau`` lives on :class:`Target`, so ``tau = 0`` and
``tau > 0`` share code paths.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import ConsistencyError, InputError, RankError, SingularityError
from .matcore import (
    PsdMatrix,
    SymEig,
    _clamp,
    invsqrtm_pd,
    polar_orthogonal,
    sqrtm_psd,
)

GRAD_FLOOR = 1e-12
NEG_CLAMP = 1e-10

__all__ = [
    "Target",
    "LossEval",
    "bw_squared",
    "bw_variational",
    "sqrt_space_loss",
    "loss_fn",
    "loss_fn_tau",
    "loss",
    "grad_cov",
    "gap_bound",
    "mdm_margin",
    "trace_floor",
]


class Target:
    """Target covariance with cached spectral data.

    Parameters
    ----------
    sigma0 : array_like, shape (n, n)
        Target covariance, symmetric PSD.
    tau : float, default 0
        Smoothing parameter of the perturbed loss.
    eig : SymEig, optional
        Known eigendecomposition of ``sigma0``; when given it is used as is
        (and ``sigma0`` is rebuilt from it), which keeps closed-form
        constructions exact.
    """

    def __init__(self, sigma0: ArrayLike | None = None, tau: float = 0.0, eig: SymEig | None = None):
        if tau < 0 or not np.isfinite(tau):
            raise InputError("tau must be a finite nonnegative number")
        self.tau = float(tau)
        if eig is not None:
            order = np.argsort(-eig.eigvals, kind="stable")
            eig = SymEig(np.asarray(eig.eigvecs, float)[:, order], np.asarray(eig.eigvals, float)[order])
            self.sigma0 = PsdMatrix(eig.reconstruct())
            self.sigma0.__dict__["eig"] = eig
        elif sigma0 is not None:
            self.sigma0 = PsdMatrix.coerce(sigma0)
        else:
            raise InputError("need sigma0 or eig")
        _clamp(self.sigma0.eig.eigvals)  # raises NotPsdError

    @classmethod
    def from_spectrum(cls, eigvals: ArrayLike, eigvecs: ArrayLike, tau: float = 0.0) -> "Target":
        return cls(tau=tau, eig=SymEig(np.asarray(eigvecs, float), np.asarray(eigvals, float)))

    def with_tau(self, tau: float) -> "Target":
        out = Target(tau=tau, eig=self.eig)
        for key in ("sqrt", "inv_sqrt"):
            if key in self.__dict__:
                out.__dict__[key] = self.__dict__[key]
        return out

    @property
    def n(self) -> int:
        return self.sigma0.n

    @property
    def mat(self) -> NDArray[np.float64]:
        return self.sigma0.mat

    @property
    def eig(self) -> SymEig:
        return self.sigma0.eig

    @property
    def eigvals(self) -> NDArray[np.float64]:
        return self.sigma0.eig.eigvals

    @cached_property
    def sqrt(self) -> NDArray[np.float64]:
        return sqrtm_psd(self.sigma0)

    @cached_property
    def inv_sqrt(self) -> NDArray[np.float64]:
        if not self.full_rank:
            raise SingularityError("target covariance is rank deficient")
        return invsqrtm_pd(self.sigma0, floor=0.0)

    @property
    def lambda_max(self) -> float:
        return float(self.eigvals[0])

    @property
    def lambda_min(self) -> float:
        return float(max(self.eigvals[-1], 0.0))

    @property
    def sigma_min_sqrt(self) -> float:
        return float(np.sqrt(self.lambda_min))

    @property
    def trace(self) -> float:
        return float(np.sum(self.eigvals))

    @property
    def full_rank(self) -> bool:
        lam = self.eigvals
        return bool(lam[-1] > 1e-10 * lam[0])

    @property
    def distinct(self) -> bool:
        lam = self.eigvals
        return bool(lam.size < 2 or np.min(-np.diff(lam)) >= 1e-10 * lam[0])

    def __repr__(self) -> str:
        return f"Target(n={self.n}, tau={self.tau:g})"


@dataclass(frozen=True)
class LossEval:
    """Loss value with optional gradient.

    ``gradient`` is ``None`` when it is not defined at the evaluation point.
    ``min_eig_arg`` is the smallest eigenvalue of ``S0^{1/2} S S0^{1/2}``.
    """

    value: float
    gradient: NDArray[np.float64] | None
    min_eig_arg: float


def _target(t: "Target | ArrayLike") -> Target:
    return t if isinstance(t, Target) else Target(t)


def _trace_sqrt_middle(sigma: PsdMatrix, target: Target) -> tuple[float, float]:
    """``tr((S0^{1/2} S S0^{1/2})^{1/2})`` and the smallest eigenvalue inside."""
    if sigma.factor is not None:
        s = np.linalg.svd(target.sqrt @ sigma.factor, compute_uv=False)
        if s.size < sigma.n:
            s = np.concatenate([s, np.zeros(sigma.n - s.size)])
        return float(np.sum(s)), float(s[-1] ** 2)
    mid = PsdMatrix(target.sqrt @ sigma.mat @ target.sqrt)
    w = mid.clamped_eigvals
    return float(np.sum(np.sqrt(w))), float(mid.lambda_min)


def _finish(value: float) -> float:
    if value < -NEG_CLAMP:
        raise ConsistencyError(f"squared distance evaluated to {value:.3e}")
    return max(value, 0.0)


def bw_squared(sigma: "PsdMatrix | ArrayLike", target: "Target | ArrayLike") -> float:
    """Squared Bures-Wasserstein distance ``B^2(sigma, sigma0)``.

    Parameters
    ----------
    sigma : PsdMatrix or array_like, shape (n, n)
        Model covariance. A :class:`PsdMatrix` built with
        :meth:`PsdMatrix.from_factor` is evaluated through the singular
        values of ``S0^{1/2} F``.
    target : Target or array_like
        Target covariance. ``target.tau`` is ignored here.

    Returns
    -------
    float
        ``tr(S + S0 - 2 (S0^{1/2} S S0^{1/2})^{1/2})``, clamped at 0.
    """
    sigma = PsdMatrix.coerce(sigma)
    target = _target(target)
    if sigma.n != target.n:
        raise InputError(f"shape mismatch: {sigma.n} vs {target.n}")
    if sigma.factor is None:
        _clamp(sigma.eig.eigvals)
    tr_root, _ = _trace_sqrt_middle(sigma, target)
    return _finish(sigma.trace + target.trace - 2.0 * tr_root)


def bw_variational(sigma: "PsdMatrix | ArrayLike", target: "Target | ArrayLike") -> tuple[float, NDArray[np.float64]]:
    """Procrustes form ``min_U ||S^{1/2} - S0^{1/2} U||_F^2``.

    The minimizer is the orthogonal polar factor of ``S0^{1/2} S^{1/2}``
    (the transpose of the polar factor of ``S^{1/2} S0^{1/2}``).

    Returns
    -------
    value : float
    u_bar : ndarray, shape (n, n)
    """
    sigma = PsdMatrix.coerce(sigma)
    target = _target(target)
    root = sqrtm_psd(sigma)
    u_bar = polar_orthogonal(target.sqrt @ root)
    value = float(np.sum((root - target.sqrt @ u_bar) ** 2))
    return value, u_bar


def sqrt_space_loss(x: ArrayLike, y: ArrayLike) -> float:
    """Loss on square-root factors, ``E(X, Y) = B^2(X X^T, Y Y^T)``."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    mid = PsdMatrix(y.T @ x @ x.T @ y)
    root = np.sum(np.sqrt(mid.clamped_eigvals))
    return _finish(float(np.sum(x * x) + np.sum(y * y) - 2.0 * root))


def loss_fn(w: ArrayLike, target: Target, *, require_grad: bool = False, grad_floor: float = GRAD_FLOOR) -> LossEval:
    """Unperturbed function-space loss ``L1(W) = B^2(W W^T, S0)``.

    The gradient ``2 W - 2 S0^{1/2} U V^T`` (with ``U S V^T`` the SVD of
    ``S0^{1/2} W``) is returned only if the smallest eigenvalue of
    ``S0^{1/2} W W^T S0^{1/2}`` is at least ``grad_floor``.

    Raises
    ------
    SingularityError
        If ``require_grad`` and the gradient is not defined.
    """
    w = np.asarray(w, float)
    if w.ndim != 2 or w.shape[0] != target.n:
        raise InputError(f"W must have {target.n} rows, got shape {w.shape}")
    b = target.sqrt @ w
    u, s, vt = np.linalg.svd(b, full_matrices=False)
    value = _finish(float(np.sum(w * w)) + target.trace - 2.0 * float(np.sum(s)))
    min_eig = float(s[-1] ** 2) if s.size == target.n else 0.0
    if min_eig < grad_floor:
        if require_grad:
            raise SingularityError(f"gradient undefined: min eigenvalue {min_eig:.3e}")
        return LossEval(value, None, min_eig)
    grad = 2.0 * w - 2.0 * target.sqrt @ (u @ vt)
    return LossEval(value, grad, min_eig)


def loss_fn_tau(w: ArrayLike, target: Target) -> LossEval:
    """Perturbed function-space loss ``L1_tau(W) = B^2(W W^T + tau I, S0)``."""
    if target.tau <= 0:
        raise InputError("loss_fn_tau needs target.tau > 0")
    w = np.asarray(w, float)
    if w.ndim != 2 or w.shape[0] != target.n:
        raise InputError(f"W must have {target.n} rows, got shape {w.shape}")
    n = target.n
    sig = w @ w.T + target.tau * np.eye(n)
    mid = PsdMatrix(target.sqrt @ sig @ target.sqrt)
    lam = mid.eig.eigvals
    if lam[-1] <= 0:
        raise SingularityError("target is singular; perturbed gradient undefined")
    value = _finish(float(np.trace(sig)) + target.trace - 2.0 * float(np.sum(np.sqrt(lam))))
    v = mid.eig.eigvecs
    t_map = target.sqrt @ ((v / np.sqrt(lam)) @ v.T) @ target.sqrt
    grad = 2.0 * (w - t_map @ w)
    return LossEval(value, grad, float(lam[-1]))


def loss(w: ArrayLike, target: Target) -> LossEval:
    """Loss actually optimized: ``L1_tau`` if ``tau > 0``, else ``L1`` with gradient required."""
    if target.tau > 0:
        return loss_fn_tau(w, target)
    return loss_fn(w, target, require_grad=True)


def grad_cov(sigma: "PsdMatrix | ArrayLike", target: Target, grad_floor: float = GRAD_FLOOR) -> NDArray[np.float64]:
    """Covariance-space gradient ``I - S0^{1/2} (S0^{1/2} S S0^{1/2})^{-1/2} S0^{1/2}``.

    ``sigma`` is the argument of ``L`` itself; pass ``W W^T + tau I`` for the
    perturbed loss.
    """
    sigma = PsdMatrix.coerce(sigma)
    mid = PsdMatrix(target.sqrt @ sigma.mat @ target.sqrt)
    g = np.eye(target.n) - target.sqrt @ invsqrtm_pd(mid, grad_floor) @ target.sqrt
    return 0.5 * (g + g.T)


def gap_bound(target: Target, tau: float, n: int | None = None) -> float:
    """Uniform bound on ``|L1_tau(W) - L1(W)|``.

    ``n sqrt(tau) (sqrt(tau) + 2 lambda_max(S0^{1/2}) / lambda_min(S0^{1/2}))``

    Raises
    ------
    RankError
        If ``sigma0`` is rank deficient.
    """
    if not target.full_rank:
        raise RankError("gap bound needs a full-rank target")
    n = target.n if n is None else n
    ratio = np.sqrt(target.lambda_max) / target.sigma_min_sqrt
    return float(n * np.sqrt(tau) * (np.sqrt(tau) + 2.0 * ratio))


def mdm_margin(w: ArrayLike, target: Target) -> float:
    """Modified deficiency margin of ``W`` (positive means the margin holds).

    ``c = sigma_min(S0^{1/2}) - min_U ||(W W^T)^{1/2} - S0^{1/2} U||_F``
    """
    w = np.asarray(w, float)
    dist2, _ = bw_variational(w @ w.T, target)
    return target.sigma_min_sqrt - float(np.sqrt(dist2))


def trace_floor(sigma: "PsdMatrix | ArrayLike", target: Target) -> bool:
    """Check ``L(S) >= tr(S) / 2 - tr(S0)``."""
    sigma = PsdMatrix.coerce(sigma)
    return bw_squared(sigma, target) >= 0.5 * sigma.trace - target.trace - 1e-12
