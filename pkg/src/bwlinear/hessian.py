"""Dense Hessians of the Frobenius and Bures-Wasserstein losses.

All matrices act on column-major ``vec`` coordinates. Three spaces are
covered: covariance (``S``), function space (``W`` with ``S = W W^T``) and
parameter space (the layers of a deep linear network).

Loss kinds
----------
``"frobenius"``
    ``L_F(S) = ||S - S0||_F^2 / 2``.
``"bw"``
    ``L(S + tau I)`` with ``tau = target.tau`` (plain BW loss when ``tau = 0``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .bwloss import GRAD_FLOOR, Target, bw_squared, grad_cov, loss_fn, loss_fn_tau
from .errors import DimensionLimitError, InputError, SingularityError
from .matcore import PsdMatrix, commutation
from .network import NetParams, compose, partial_products

MAX_PARAM_DIM = 5000
KINDS = ("frobenius", "bw")

__all__ = [
    "HessianMatrix",
    "ConditionReport",
    "function_loss",
    "hess_cov_frobenius",
    "hess_cov_bw",
    "g_operator",
    "hess_fn",
    "hess_param",
    "param_loss",
    "condition_report",
    "fd_quadratic_check",
    "g_tau_bounds",
    "h_tau_bound",
]


@dataclass(frozen=True)
class HessianMatrix:
    """Symmetrized Hessian with its space and loss kind."""

    mat: NDArray[np.float64]
    space: str
    loss_kind: str

    def __post_init__(self):
        m = np.asarray(self.mat, float)
        object.__setattr__(self, "mat", 0.5 * (m + m.T))

    @property
    def dim(self) -> int:
        return self.mat.shape[0]

    def eigvalsh(self) -> NDArray[np.float64]:
        return np.linalg.eigvalsh(self.mat)


@dataclass(frozen=True)
class ConditionReport:
    lambda_max: float
    lambda_min: float
    lambda_min_abs_nonzero: float
    kappa_rel: float
    kappa_abs: float
    zero_tol: float


def _kind(kind: str) -> str:
    k = {"bwtau": "bw", "bw_tau": "bw", "tau_bw": "bw"}.get(kind.lower(), kind.lower())
    if k not in KINDS:
        raise InputError(f"unknown loss kind {kind!r}")
    return k


def function_loss(w: ArrayLike, target: Target, kind: str) -> tuple[float, NDArray[np.float64]]:
    """Function-space loss value and gradient for a loss kind."""
    kind = _kind(kind)
    w = np.asarray(w, float)
    if kind == "frobenius":
        r = w @ w.T - target.mat
        return 0.5 * float(np.sum(r * r)), 2.0 * r @ w
    ev = loss_fn_tau(w, target) if target.tau > 0 else loss_fn(w, target, require_grad=True)
    return ev.value, ev.gradient


def hess_cov_frobenius(sigma: ArrayLike, target: Target) -> HessianMatrix:
    """Hessian ``I_n (x) I_n`` of ``L_F``; the gradient is ``S - S0``."""
    n = target.n
    return HessianMatrix(np.eye(n * n), "covariance", "frobenius")


def _middle(sigma: ArrayLike, target: Target):
    s = np.asarray(sigma, float)
    mid = PsdMatrix(target.sqrt @ s @ target.sqrt)
    q = mid.eig.eigvals
    if q[-1] < GRAD_FLOOR:
        raise SingularityError(f"Hessian undefined: min eigenvalue {q[-1]:.3e}")
    return mid.eig.eigvecs, q


def hess_cov_bw(sigma: ArrayLike, target: Target) -> HessianMatrix:
    """Hessian of ``L`` at ``sigma`` (pass ``S + tau I`` for the perturbed loss).

    With ``Gamma Q Gamma^T = S0^{1/2} S S0^{1/2}`` and the symmetric matrix
    ``P_ij = 1 / (sqrt(q_i) + sqrt(q_j)) = sum_k s_k u_k u_k^T``, the Hessian
    is ``sum_k s_k B_k (x) B_k`` with
    ``B_k = S0^{1/2} Gamma Q^{-1/2} diag(u_k) Gamma^T S0^{1/2}``.
    The ``s_k`` may be negative.
    """
    gamma, q = _middle(sigma, target)
    rq = np.sqrt(q)
    p = 1.0 / (rq[:, None] + rq[None, :])
    s, u = np.linalg.eigh(p)
    left = target.sqrt @ gamma / rq
    right = gamma.T @ target.sqrt
    n = target.n
    h = np.zeros((n * n, n * n))
    for sk, uk in zip(s, u.T):
        b = (left * uk) @ right
        h += sk * np.kron(b.T, b)
    return HessianMatrix(h, "covariance", "bw")


def g_operator(sigma: ArrayLike, target: Target, y: ArrayLike) -> NDArray[np.float64]:
    """Operator form ``S0^{1/2} Gamma Q^{-1/2} D(Y) Q^{-1/2} Gamma^T S0^{1/2}`` of the BW Hessian.

    ``D(Y)_ij = (Gamma^T S0^{1/2} Y S0^{1/2} Gamma)_ij / (sqrt(q_i) + sqrt(q_j))``.
    """
    gamma, q = _middle(sigma, target)
    rq = np.sqrt(q)
    inner = gamma.T @ target.sqrt @ np.asarray(y, float) @ target.sqrt @ gamma
    d = inner / (rq[:, None] + rq[None, :])
    left = target.sqrt @ gamma / rq
    return left @ d @ left.T


def _cov_parts(w: NDArray[np.float64], target: Target, kind: str):
    n = target.n
    if kind == "frobenius":
        sig = w @ w.T
        return hess_cov_frobenius(sig, target).mat, sig - target.mat
    sig = w @ w.T + target.tau * np.eye(n)
    return hess_cov_bw(sig, target).mat, grad_cov(sig, target)


def hess_fn(w: ArrayLike, target: Target, kind: str) -> HessianMatrix:
    """Function-space Hessian through ``S = W W^T``.

    ``((W^T (x) I) K + W^T (x) I) H_f (K (W (x) I) + W (x) I) + 2 I_m (x) grad f``
    """
    kind = _kind(kind)
    w = np.asarray(w, float)
    n, m = w.shape
    h_f, g_f = _cov_parts(w, target, kind)
    jac = (commutation(n, n) + np.eye(n * n)) @ np.kron(w, np.eye(n))
    h = jac.T @ h_f @ jac + 2.0 * np.kron(np.eye(m), g_f)
    return HessianMatrix(h, "function", kind)


def hess_param(params: NetParams, target: Target, kind: str) -> HessianMatrix:
    """Parameter-space Hessian of ``L1(W_N ... W_1)``.

    Block ``(i, i)`` is ``J_i^T H1 J_i`` with
    ``J_i = W_{i-1:1}^T (x) W_{N:i+1}``; block ``(i, j)``, ``i < j``, adds
    ``((W_{i-1:1} G^T W_{N:j+1}) (x) W_{j-1:i+1}^T) K_{d_j d_{j-1}}`` to
    ``J_i^T H1 J_j``, where ``G`` is the function-space gradient.

    Raises
    ------
    DimensionLimitError
        If the parameter count exceeds 5000.
    """
    kind = _kind(kind)
    if params.size > MAX_PARAM_DIM:
        raise DimensionLimitError(f"{params.size} parameters exceed the dense limit {MAX_PARAM_DIM}")
    w = compose(params)
    h1 = hess_fn(w, target, kind).mat
    _, g = function_loss(w, target, kind)
    below, above = partial_products(params)
    dims = params.dims
    n_layers = params.depth
    jacs = [np.kron(below[i].T, above[i + 1]) for i in range(n_layers)]
    offs = np.concatenate([[0], np.cumsum([dims[i + 1] * dims[i] for i in range(n_layers)])])
    h = np.zeros((offs[-1], offs[-1]))
    for i in range(n_layers):
        for j in range(i, n_layers):
            blk = jacs[i].T @ h1 @ jacs[j]
            if j > i:
                mid = np.eye(dims[i + 1])
                for k in range(i + 1, j):
                    mid = params.layers[k] @ mid
                outer = below[i] @ g.T @ above[j + 1]
                blk = blk + np.kron(outer, mid.T) @ commutation(dims[j + 1], dims[j])
            h[offs[i] : offs[i + 1], offs[j] : offs[j + 1]] = blk
            h[offs[j] : offs[j + 1], offs[i] : offs[i + 1]] = blk.T
    return HessianMatrix(h, "parameter", kind)


def param_loss(params_or_theta, target: Target, kind: str, dims: tuple[int, ...] | None = None) -> float:
    """Parameter-space loss; accepts :class:`NetParams` or a flat vector with ``dims``."""
    params = params_or_theta if isinstance(params_or_theta, NetParams) else NetParams.unflatten(params_or_theta, dims)
    return function_loss(compose(params), target, kind)[0]


def condition_report(h: "HessianMatrix | ArrayLike", zero_tol: float | None = None) -> ConditionReport:
    """Extremal eigenvalues and condition numbers.

    ``kappa_rel = lambda_max / lambda_min`` (signed) and
    ``kappa_abs = lambda_max / min{|lambda| : |lambda| > zero_tol}`` with
    ``zero_tol`` defaulting to ``1e-8 |lambda_max|``.
    """
    mat = h.mat if isinstance(h, HessianMatrix) else np.asarray(h, float)
    lam = np.linalg.eigvalsh(0.5 * (mat + mat.T))
    lmax, lmin = float(lam[-1]), float(lam[0])
    tol = 1e-8 * abs(lmax) if zero_tol is None else zero_tol
    nz = np.abs(lam)[np.abs(lam) > tol]
    lnz = float(nz.min()) if nz.size else float("nan")
    return ConditionReport(lmax, lmin, lnz, lmax / lmin if lmin != 0 else float("inf"), lmax / lnz, tol)


def fd_quadratic_check(
    loss: Callable[[NDArray[np.float64]], float],
    point: ArrayLike,
    h: "HessianMatrix | ArrayLike",
    trials: int = 20,
    seed: int = 0,
    project: Callable[[NDArray[np.float64]], NDArray[np.float64]] | None = None,
    rel_step: float | None = None,
    richardson: bool = True,
) -> float:
    """Largest relative error of ``v^T H v`` against second differences.

    ``D(s) = (L(x + s v) - 2 L(x) + L(x - s v)) / s^2`` along random unit
    directions ``v`` with ``s = rel_step (1 + ||x||)``. With ``richardson``
    the estimate is ``(4 D(s/2) - D(s)) / 3``, which cancels the ``O(s^2)``
    truncation term; ``rel_step`` then defaults to ``1e-3``, otherwise to
    ``1e-4``. The error is normalized by ``max(|v^T H v|, 1e-6 ||H||_2)``.
    ``project`` maps raw Gaussian directions into an admissible subspace
    (e.g. vec of symmetric matrices for the covariance Hessian) before
    normalization.
    """
    x = np.asarray(point, float).ravel()
    mat = h.mat if isinstance(h, HessianMatrix) else np.asarray(h, float)
    rng = np.random.default_rng(seed)
    if rel_step is None:
        rel_step = 1e-3 if richardson else 1e-4
    step = rel_step * (1.0 + np.linalg.norm(x))
    f0 = loss(x)

    def second(v, s):
        return (loss(x + s * v) - 2.0 * f0 + loss(x - s * v)) / s**2

    scale = 1e-6 * np.linalg.norm(mat, 2)
    worst = 0.0
    for _ in range(trials):
        v = rng.standard_normal(x.size)
        if project is not None:
            v = np.asarray(project(v), float).ravel()
        v /= np.linalg.norm(v)
        fd = (4.0 * second(v, 0.5 * step) - second(v, step)) / 3.0 if richardson else second(v, step)
        exact = float(v @ mat @ v)
        worst = max(worst, abs(fd - exact) / max(abs(exact), scale))
    return worst


def g_tau_bounds(sigma_tau: ArrayLike, target: Target, big_c: float | None = None) -> tuple[float, float]:
    """Lower and upper bounds on the spectrum of the BW Hessian at ``S_tau``.

    ``sqrt(tau lambda_min(S0)) / (2 C^2)`` and ``sqrt(C lambda_max(S0)) / (2 tau^2)``
    with ``C = 2 (L(S_tau) + tr S0)`` unless given.
    """
    if target.tau <= 0:
        raise InputError("bounds need tau > 0")
    if big_c is None:
        big_c = 2.0 * (bw_squared(sigma_tau, target) + target.trace)
    lo = np.sqrt(target.tau * target.lambda_min) / (2.0 * big_c**2)
    hi = np.sqrt(big_c * target.lambda_max) / (2.0 * target.tau**2)
    return float(lo), float(hi)


def h_tau_bound(w: ArrayLike, target: Target, big_c: float | None = None) -> float:
    """Upper bound on the largest eigenvalue of the function-space BW Hessian.

    ``lambda_max(A)^{1/2} 2 C^2 / tau^2 + 2 (1 - lambda_min(S0^{1/2} A^{-1/2} S0^{1/2}))``
    with ``A = S0^{1/2} S_tau S0^{1/2}``.
    """
    w = np.asarray(w, float)
    sig = w @ w.T + target.tau * np.eye(target.n)
    if big_c is None:
        big_c = 2.0 * (bw_squared(sig, target) + target.trace)
    gamma, q = _middle(sig, target)
    t_map = target.sqrt @ (gamma / np.sqrt(q)) @ gamma.T @ target.sqrt
    t_min = float(np.linalg.eigvalsh(0.5 * (t_map + t_map.T))[0])
    return float(np.sqrt(q.max()) * 2.0 * big_c**2 / target.tau**2 + 2.0 * (1.0 - t_min))
