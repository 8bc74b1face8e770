"""Experiment building blocks shared by the CLI and the acceptance run."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from .bwloss import Target, mdm_margin
from .critical import make_critical
from .errors import InputError, MdmFailedError, NotPsdError
from .hessian import condition_report, hess_param
from .matcore import PsdMatrix, random_orthogonal, sqrtm_psd
from .network import NetParams, balanced_init
from .optimize import FlowConfig, GdConfig, Trajectory, estimate_rate, flow_run, gd_run, optimal_value

__all__ = [
    "zipf_spectrum",
    "zipf_target",
    "InitResult",
    "perturbed_init",
    "RateCell",
    "simulate_cell",
    "run_rate_cell",
    "HessianRecord",
    "hessian_records",
    "hessian_study",
]


def zipf_spectrum(n: int, lambda_min: float) -> NDArray[np.float64]:
    """Eigenvalues ``lam_j = (n / j) lambda_min`` for ``j = 1..n``."""
    if n < 1 or not lambda_min > 0:
        raise InputError("need n >= 1 and lambda_min > 0")
    return n / np.arange(1, n + 1) * lambda_min


def zipf_target(n: int, lambda_min: float, seed: int, tau: float = 0.0) -> Target:
    """Target ``Omega diag(zipf) Omega^T`` with Haar-random ``Omega``."""
    omega = random_orthogonal(n, seed)
    return Target.from_spectrum(zipf_spectrum(n, lambda_min), omega, tau=tau)


@dataclass(frozen=True)
class InitResult:
    params: NetParams
    sigma_init: NDArray[np.float64]
    margin: float


def perturbed_init(
    target: Target,
    depth: int,
    perturb_scale: float,
    seed: int,
    width: int | None = None,
    m: int | None = None,
) -> InitResult:
    """Balanced network with ``W W^T = (S0 - tau I) + Gamma D Gamma^T``.

    ``D`` is diagonal with entries drawn uniformly from
    ``[0, perturb_scale]`` and ``Gamma`` is Haar-random; both come from
    ``seed``. The end-to-end matrix is ``S(0)^{1/2} V^T`` with ``V`` of
    orthonormal columns (``V = I`` when ``m = n``).

    Raises
    ------
    MdmFailedError
        If the deficiency margin of the initialization is not positive.
    """
    n = target.n
    m = n if m is None else m
    width = n if width is None else width
    if m < n:
        raise InputError("input dimension m must be at least n")
    rng = np.random.default_rng(seed)
    gamma = random_orthogonal(n, rng)
    d = perturb_scale * rng.uniform(0.0, 1.0, size=n)
    sigma = target.mat - target.tau * np.eye(n) + (gamma * d) @ gamma.T
    sigma = 0.5 * (sigma + sigma.T)
    try:
        root = sqrtm_psd(PsdMatrix(sigma))
    except NotPsdError as exc:
        raise MdmFailedError(f"initial covariance is not PSD: {exc}") from exc
    w0 = root if m == n else root @ random_orthogonal(m, rng)[:, :n].T
    margin = mdm_margin(w0, target)
    if not margin > 0:
        raise MdmFailedError(f"deficiency margin {margin:.6g} is not positive", margin=margin)
    dims = (m,) + (width,) * (depth - 1) + (n,)
    params = balanced_init(w0, dims, seed=int(rng.integers(2**31)))
    return InitResult(params, sigma, margin)


@dataclass(frozen=True)
class RateCell:
    """One cell of a convergence-rate sweep."""

    depth: int
    sigma_min: float
    slope: float
    r2: float
    margin: float
    max_balance_residual: float
    min_sigma_gap: float
    samples: int


def simulate_cell(
    n: int,
    depth: int,
    sigma_min: float,
    tau: float,
    perturb_scale: float,
    seed: int,
    t_end: float = 50.0,
    tol: float = 1e-8,
    record_dt: float = 0.05,
    target_loss: float = 1e-10,
    mode: str = "flow",
    eta: float = 1e-3,
) -> tuple[Trajectory, float, float]:
    """Train one sweep cell from a perturbed balanced init.

    The target uses ``lambda_min = sigma_min^2`` and seed ``seed``; the
    initialization uses ``seed + 1``.

    Returns
    -------
    traj : Trajectory
    optimum : float
        Optimal value of the trained loss.
    margin : float
        Deficiency margin ``c`` of the initialization.
    """
    target = zipf_target(n, sigma_min**2, seed, tau=tau)
    init = perturbed_init(target, depth, perturb_scale, seed + 1)
    if mode == "flow":
        cfg = FlowConfig(t_end=t_end, tol=tol, record_dt=record_dt, target_loss=target_loss)
        _, traj = flow_run(init.params, target, cfg)
    elif mode == "gd":
        every = max(1, int(round(record_dt / eta)))
        cfg = GdConfig(eta=eta, max_iters=int(np.ceil(t_end / eta)), target_loss=target_loss, record_every=every)
        _, traj = gd_run(init.params, target, cfg)
    else:
        raise InputError(f"unknown mode {mode!r}")
    return traj, optimal_value(target, min(init.params.dims)), init.margin


def run_rate_cell(
    n: int,
    depth: int,
    sigma_min: float,
    tau: float,
    perturb_scale: float,
    seed: int,
    t_end: float = 50.0,
    tol: float = 1e-8,
    record_dt: float = 0.05,
    target_loss: float = 1e-10,
    trim_fraction: float = 0.5,
    mode: str = "flow",
    eta: float = 1e-3,
    simulate: Callable[..., tuple[Trajectory, float, float]] | None = None,
) -> RateCell:
    """Simulate a cell and regress the asymptotic rate.

    ``simulate`` replaces :func:`simulate_cell` (same signature), e.g. with a
    synthetic trajectory. ``min_sigma_gap`` is ``min_t sigma_min(W(t)) - c``.
    """
    sim = simulate_cell if simulate is None else simulate
    traj, optimum, margin = sim(n, depth, sigma_min, tau, perturb_scale, seed, t_end, tol, record_dt, target_loss, mode, eta)
    slope, r2 = estimate_rate(traj, optimum, trim_fraction)
    return RateCell(
        depth,
        sigma_min,
        slope,
        r2,
        margin,
        max(traj.balance_residual),
        min(traj.sigma_min) - margin,
        len(traj),
    )


@dataclass(frozen=True)
class HessianRecord:
    seed: int
    tau: float
    index: int
    loss: str
    lambda_max: float
    lambda_min: float
    kappa_rel: float
    kappa_abs: float


def hessian_records(n: int, depth: int, tau: float, indices: int, lambda_min: float, seed: int) -> list[HessianRecord]:
    """Condition reports at the first ``indices`` critical points for one target.

    For index ``i`` the end-to-end matrices keep the top ``n - i``
    eigen-directions of the target: with their full eigenvalues for the
    Frobenius loss and with eigenvalues reduced by ``tau`` for the BW loss.
    Each is lifted to a balanced network of width ``n``.
    """
    out = []
    dims = (n,) * (depth + 1)
    target = zipf_target(n, lambda_min, seed, tau=tau)
    for i in range(indices):
        for kind, perturbed in (("frobenius", False), ("bw", True)):
            cp = make_critical(target, range(n - i), perturbed=perturbed, seed=seed)
            params = balanced_init(cp.w, dims, seed=seed)
            rep = condition_report(hess_param(params, target, kind))
            out.append(HessianRecord(seed, tau, i, kind, rep.lambda_max, rep.lambda_min, rep.kappa_rel, rep.kappa_abs))
    return out


def hessian_study(
    n: int = 8,
    depth: int = 3,
    taus: tuple[float, ...] = (0.1, 0.001),
    indices: int = 5,
    seeds: int = 7,
    lambda_min: float = 0.5,
    seed: int = 0,
) -> list[HessianRecord]:
    """:func:`hessian_records` over ``seeds`` consecutive target seeds per ``tau``."""
    out = []
    for tau in taus:
        for s in range(seeds):
            out.extend(hessian_records(n, depth, tau, indices, lambda_min, seed + s))
    return out
