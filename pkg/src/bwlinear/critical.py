"""Closed-form critical points on fixed-rank manifolds.

With ``S0 = Omega diag(lam) Omega^T`` (eigenvalues descending) and an index
set ``J`` of size ``k``, the points

    W* = Omega_J diag(lam_J)^{1/2} V^T              (unperturbed)
    W* = Omega_J diag(lam_J - tau)^{1/2} V^T        (perturbed)

are critical for ``L1`` restricted to rank-``k`` matrices, resp. for
``L1_tau``, with values ``sum_{i not in J} lam_i`` and
``sum_{i not in J} (sqrt(lam_i) - sqrt(tau))^2``. Index sets are 0-based.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import combinations
from math import comb
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .bwloss import Target, loss_fn_tau
from .errors import (
    CombinatorialLimitError,
    InputError,
    NonDistinctSpectrumError,
    RankError,
    TauTooLargeError,
)
from .matcore import PsdMatrix, random_orthogonal, thin_svd

MAX_ENUM_N = 20

__all__ = [
    "CriticalPoint",
    "make_critical",
    "critical_value",
    "restricted_gradient",
    "enumerate_critical_values",
    "best_rank_k",
    "critical_table",
    "write_critical_csv",
]


@dataclass(frozen=True)
class CriticalPoint:
    index_set: tuple[int, ...]
    right_factor: NDArray[np.float64]
    w: NDArray[np.float64]
    loss_value: float
    perturbed: bool

    @property
    def rank(self) -> int:
        return len(self.index_set)


def _check_index_set(index_set, n: int) -> tuple[int, ...]:
    idx = tuple(sorted(int(i) for i in index_set))
    if len(set(idx)) != len(idx) or any(i < 0 or i >= n for i in idx):
        raise InputError(f"invalid index set {index_set} for n={n}")
    return idx


def critical_value(target: Target, index_set, perturbed: bool = False) -> float:
    """Closed-form loss at the critical point indexed by ``index_set``."""
    lam = target.eigvals
    rest = np.setdiff1d(np.arange(lam.size), np.asarray(index_set, dtype=int))
    if perturbed:
        return float(np.sum((np.sqrt(lam[rest]) - np.sqrt(target.tau)) ** 2))
    return float(np.sum(lam[rest]))


def make_critical(
    target: Target,
    index_set,
    v: ArrayLike | None = None,
    perturbed: bool = False,
    m: int | None = None,
    seed: int = 0,
) -> CriticalPoint:
    """Construct the critical point for ``index_set``.

    Parameters
    ----------
    target : Target
        Needs distinct positive eigenvalues; ``target.tau`` is used when
        ``perturbed``.
    index_set : iterable of int
        0-based eigen-indices (0 is the largest eigenvalue).
    v : array_like, shape (m, k), optional
        Right factor with orthonormal columns. Defaults to the first ``k``
        columns of ``random_orthogonal(m, seed)``.
    perturbed : bool
    m : int, optional
        Input dimension when ``v`` is not given (default ``n``).

    Raises
    ------
    NonDistinctSpectrumError
    TauTooLargeError
    """
    n = target.n
    lam = target.eigvals
    if not target.distinct or lam[-1] <= 0:
        raise NonDistinctSpectrumError("critical points need distinct positive eigenvalues")
    idx = _check_index_set(index_set, n)
    k = len(idx)
    if v is None:
        m = n if m is None else m
        if k > m:
            raise RankError(f"rank {k} exceeds input dimension {m}")
        v = random_orthogonal(m, seed)[:, :k]
    v = np.asarray(v, float)
    if v.ndim != 2 or v.shape[1] != k:
        raise InputError(f"right factor must have shape (m, {k})")
    if not np.allclose(v.T @ v, np.eye(k), atol=1e-12):
        raise InputError("right factor must have orthonormal columns")
    lam_j = lam[list(idx)]
    if perturbed:
        if k and target.tau > lam_j.min():
            raise TauTooLargeError(f"tau={target.tau} exceeds eigenvalue {lam_j.min():.6g}")
        scale = np.sqrt(lam_j - target.tau)
    else:
        scale = np.sqrt(lam_j)
    w = (target.eig.eigvecs[:, list(idx)] * scale) @ v.T
    return CriticalPoint(idx, v, w, critical_value(target, idx, perturbed), perturbed)


def restricted_gradient(w: ArrayLike, target: Target, k: int | None = None) -> NDArray[np.float64]:
    """Gradient of ``L1`` restricted to the rank-``k`` manifold through ``W``.

    ``2 W - 2 S0^{1/2} U V^T`` with ``U S V^T`` the thin SVD of ``S0^{1/2} W``.

    Raises
    ------
    RankError
        If ``k`` is given and differs from the numerical rank of ``W``.
    """
    w = np.asarray(w, float)
    svd = thin_svd(target.sqrt @ w)
    if k is not None and svd.rank != k:
        raise RankError(f"numerical rank {svd.rank} differs from declared rank {k}")
    return 2.0 * w - 2.0 * target.sqrt @ (svd.left @ svd.right.T)


def enumerate_critical_values(target: Target, k: int, perturbed: bool = False) -> list[tuple[tuple[int, ...], float]]:
    """All ``C(n, k)`` index sets with their closed-form values, ascending.

    Raises
    ------
    CombinatorialLimitError
        If ``n > 20``.
    """
    n = target.n
    if n > MAX_ENUM_N:
        raise CombinatorialLimitError(f"n={n} exceeds enumeration limit {MAX_ENUM_N} ({comb(n, k)} sets)")
    if not 0 <= k <= n:
        raise InputError(f"k={k} out of range")
    rows = [(idx, critical_value(target, idx, perturbed)) for idx in combinations(range(n), k)]
    rows.sort(key=lambda r: r[1])
    return rows


def best_rank_k(
    target: Target, k: int, perturbed: bool = False, m: int | None = None, seed: int = 0
) -> tuple[CriticalPoint, PsdMatrix]:
    """Optimal rank-``k`` point and the covariance it generates.

    The covariance is ``w w^T`` (plus ``tau I`` when perturbed), i.e. the
    truncated eigendecomposition of the target, resp.
    ``Omega diag(lam_1..lam_k, tau, ..., tau) Omega^T``.
    """
    cp = make_critical(target, range(k), perturbed=perturbed, m=m, seed=seed)
    cov = cp.w @ cp.w.T
    if perturbed:
        cov = cov + target.tau * np.eye(target.n)
    return cp, PsdMatrix(cov)


CSV_HEADER = ("index_set", "value", "grad_norm", "value_tau", "grad_norm_tau")


def critical_table(target: Target, k: int) -> list[tuple]:
    """Rows of :data:`CSV_HEADER` for every rank-``k`` index set.

    ``grad_norm`` is the norm of the restricted gradient at the unperturbed
    point; ``grad_norm_tau`` the norm of the ambient ``L1_tau`` gradient at
    the perturbed point. Perturbed columns are ``None`` when ``tau = 0`` or
    when ``tau`` exceeds an eigenvalue in the set. Rows are sorted by
    unperturbed value.
    """
    rows = []
    for idx, value in enumerate_critical_values(target, k):
        cp = make_critical(target, idx)
        g = float(np.linalg.norm(restricted_gradient(cp.w, target, k))) if k else float(np.linalg.norm(cp.w))
        value_tau = grad_tau = None
        if target.tau > 0 and (not idx or target.tau <= target.eigvals[list(idx)].min()):
            cpt = make_critical(target, idx, perturbed=True)
            value_tau = cpt.loss_value
            grad_tau = float(np.linalg.norm(loss_fn_tau(cpt.w, target).gradient))
        rows.append((idx, value, g, value_tau, grad_tau))
    return rows


def write_critical_csv(rows: list[tuple], path: str | Path) -> None:
    """Write :func:`critical_table` rows; index sets are printed 1-based, ``;``-separated."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CSV_HEADER)
        for idx, *vals in rows:
            label = ";".join(str(i + 1) for i in idx)
            wr.writerow([label] + ["" if x is None else f"{x:.17g}" for x in vals])
