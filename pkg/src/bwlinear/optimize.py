"""Gradient descent and gradient flow on deep linear networks.

The loss optimized is ``L1_tau`` composed with the network when
``target.tau > 0`` and ``L1`` otherwise. Flows are integrated with the
Dormand-Prince 5(4) embedded pair.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.stats import linregress

from .bwloss import Target, loss, loss_fn, mdm_margin
from .errors import (
    DivergenceError,
    InputError,
    InsufficientDataError,
    MdmFailedError,
    StepSizeUnderflowError,
)
from .network import NetParams, balance_report, compose

__all__ = [
    "GdConfig",
    "FlowConfig",
    "Trajectory",
    "CertifiedConstants",
    "gd_constants",
    "certified_constants",
    "gd_run",
    "flow_run",
    "estimate_rate",
    "optimal_value",
]

CSV_FIELDS = ("index", "t", "loss", "grad_norm_sq", "sigma_min", "balance_residual", "w_norm")


@dataclass(frozen=True)
class GdConfig:
    eta: float
    max_iters: int = 100_000
    target_loss: float = 0.0
    record_every: int = 1
    divergence_factor: float = 1e3

    def __post_init__(self):
        if not self.eta > 0:
            raise InputError("eta must be positive")
        if self.target_loss < 0 or self.record_every < 1 or self.max_iters < 0:
            raise InputError("invalid gradient descent configuration")


@dataclass(frozen=True)
class FlowConfig:
    """Gradient-flow integration settings.

    ``tol`` bounds the local error estimate of every accepted step, measured
    as ``max_i |err_i| / (1 + |y_i|)``. With ``fixed_step`` set, the
    integrator takes classical fixed steps of the 5th order formula instead.
    ``record_dt`` forces samples on a uniform time grid (steps are shortened
    to land on it); otherwise every ``record_every``-th accepted step is
    recorded. Integration stops at ``t_end`` or once the loss drops to
    ``target_loss``.
    """

    t_end: float
    tol: float = 1e-8
    fixed_step: float | None = None
    record_every: int = 1
    record_dt: float | None = None
    target_loss: float = 0.0
    h0: float | None = None
    max_steps: int = 1_000_000

    def __post_init__(self):
        if not self.t_end > 0 or not self.tol > 0 or self.record_every < 1:
            raise InputError("invalid flow configuration")
        if self.fixed_step is not None and not self.fixed_step > 0:
            raise InputError("fixed_step must be positive")


@dataclass
class Trajectory:
    """Recorded samples, one row per entry of :data:`CSV_FIELDS`."""

    index: list[int] = field(default_factory=list)
    t: list[float] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    grad_norm_sq: list[float] = field(default_factory=list)
    sigma_min: list[float] = field(default_factory=list)
    balance_residual: list[float] = field(default_factory=list)
    w_norm: list[float] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.index)

    def append(self, index: int, t: float, layers, value: float, grad: NDArray[np.float64]) -> None:
        params = NetParams(tuple(layers)) if not isinstance(layers, NetParams) else layers
        w = compose(params)
        s = np.linalg.svd(w, compute_uv=False)
        self.index.append(int(index))
        self.t.append(float(t))
        self.loss.append(float(value))
        self.grad_norm_sq.append(float(np.sum(grad * grad)))
        self.sigma_min.append(float(s[w.shape[0] - 1]) if w.shape[0] <= w.shape[1] else 0.0)
        self.balance_residual.append(balance_report(params).max_residual)
        self.w_norm.append(float(np.linalg.norm(w)))

    def column(self, name: str) -> NDArray[np.float64]:
        return np.asarray(getattr(self, name), dtype=float)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(CSV_FIELDS)
            for row in zip(*(getattr(self, f) for f in CSV_FIELDS)):
                wr.writerow([row[0]] + [f"{x:.17g}" for x in row[1:]])

    @classmethod
    def from_csv(cls, path: str | Path) -> "Trajectory":
        out = cls()
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                out.index.append(int(rec["index"]))
                for name in CSV_FIELDS[1:]:
                    getattr(out, name).append(float(rec[name]))
        return out


@dataclass(frozen=True)
class CertifiedConstants:
    """Constants of the convergence certificates.

    Attributes
    ----------
    c : float
        Deficiency margin of the initialization.
    loss0 : float
        Initial value of the optimized loss.
    M, delta, eta_max : float
        Norm bound, smoothness constant and admissible step size for
        gradient descent.
    big_c : float
        ``2 (L(S(0)) + tr S0)``, a bound on ``tr S`` along the flow.
    kappa : float
        Strong convexity constant ``sqrt(s lambda_min(S0)) / (2 C^2)`` with
        ``s = tau`` (or ``c^2`` when ``tau = 0``).
    flow_rate : float
        Exponent ``8 N c^{2(2N-1)/N} kappa`` of the flow bound.
    depth : int
    """

    c: float
    loss0: float
    M: float
    delta: float
    eta_max: float
    big_c: float
    kappa: float
    flow_rate: float
    depth: int

    @property
    def gd_rate(self) -> float:
        """``N c^{2(N-1)/N}``; one GD step contracts the loss by ``1 - 2 eta gd_rate``."""
        return self.depth * self.c ** (2.0 * (self.depth - 1) / self.depth)

    def contraction(self, eta: float | None = None) -> float:
        eta = self.eta_max if eta is None else eta
        return 1.0 - 2.0 * eta * self.gd_rate

    def iter_bound(self, eps: float, eta: float | None = None) -> int:
        """Iterations after which gradient descent has reached loss ``eps``."""
        eta = self.eta_max if eta is None else eta
        if eps >= self.loss0:
            return 0
        return int(math.ceil(math.log(self.loss0 / eps) / (2.0 * eta * self.gd_rate)))


def gd_constants(c: float, M: float, depth: int, lambda_max: float, sqrt_fro: float, loss0: float) -> tuple[float, float]:
    """Smoothness constant ``Delta`` and step-size bound ``eta_max``.

    Parameters
    ----------
    c : float
        Deficiency margin.
    M : float
        Frobenius bound on the end-to-end matrix.
    depth : int
    lambda_max : float
        Largest eigenvalue of the target.
    sqrt_fro : float
        ``||S0^{1/2}||_F``.
    loss0 : float
        Initial loss.
    """
    n_ = depth
    delta = (2.0 ** (n_ + 1) / c ** (2 * n_)) * n_**2 * M ** ((4 * n_ - 3) / n_) * math.sqrt(lambda_max)
    delta += 8.0 * n_ * (n_ - 1) * M ** ((3 * n_ - 4) / n_) * (M ** (1.0 / n_) + sqrt_fro)
    rate = n_ * c ** (2.0 * (n_ - 1) / n_)
    first = c**2 / (8.0 * M * math.sqrt(loss0)) if loss0 > 0 else math.inf
    return delta, min(first, rate / (2.0 * delta), 1.0 / (4.0 * rate))


def certified_constants(params0: NetParams, target: Target) -> CertifiedConstants:
    """Evaluate the certified constants at a (balanced) initialization.

    Raises
    ------
    MdmFailedError
        If the deficiency margin is not positive.
    """
    w0 = compose(params0)
    c = mdm_margin(w0, target)
    if not c > 0:
        raise MdmFailedError(f"deficiency margin {c:.6g} is not positive", margin=c)
    depth = params0.depth
    loss0 = loss(w0, target).value if target.tau > 0 else loss_fn(w0, target).value
    tr0 = target.trace
    m_bound = math.sqrt(2.0 * (loss0 + tr0))
    delta, eta_max = gd_constants(c, m_bound, depth, target.lambda_max, math.sqrt(tr0), loss0)
    big_c = 2.0 * (loss0 + tr0)
    s = target.tau if target.tau > 0 else c**2
    kappa = math.sqrt(s * target.lambda_min) / (2.0 * big_c**2)
    flow_rate = 8.0 * depth * c ** (2.0 * (2 * depth - 1) / depth) * kappa
    return CertifiedConstants(c, loss0, m_bound, delta, eta_max, big_c, kappa, flow_rate, depth)


def optimal_value(target: Target, width: int) -> float:
    """Minimum of the optimized loss over end-to-end matrices of rank ``<= width``.

    For ``tau > 0`` the optimum keeps the top ``width`` eigen-directions at
    ``lam - tau`` (directions with ``lam < tau`` are switched off); the rest
    contribute ``(sqrt(lam) - sqrt(tau))^2``.
    """
    lam = target.eigvals
    k = min(width, lam.size)
    tau = target.tau
    if tau > 0:
        kept = lam[:k]
        head = np.sum(np.where(kept < tau, (np.sqrt(kept) - np.sqrt(tau)) ** 2, 0.0))
        return float(head + np.sum((np.sqrt(lam[k:]) - np.sqrt(tau)) ** 2))
    return float(np.sum(lam[k:]))


def _compose_list(layers) -> NDArray[np.float64]:
    out = layers[0]
    for w in layers[1:]:
        out = w @ out
    return out


def _layer_grads(layers, g) -> list[NDArray[np.float64]]:
    n_layers = len(layers)
    below = [None] * n_layers
    acc = np.eye(layers[0].shape[1])
    for j in range(n_layers):
        below[j] = acc
        acc = layers[j] @ acc
    out = [None] * n_layers
    acc = g
    for j in range(n_layers - 1, -1, -1):
        out[j] = acc @ below[j].T
        acc = layers[j].T @ acc
    return out


def gd_run(params0: NetParams, target: Target, cfg: GdConfig, start_index: int = 0) -> tuple[NetParams, Trajectory]:
    """Full-batch gradient descent ``W_j <- W_j - eta grad_j`` on all layers.

    ``start_index`` offsets the iteration counter (for resumed runs);
    ``max_iters`` and ``record_every`` refer to the global counter.

    Raises
    ------
    SingularityError
        If ``tau = 0`` and an iterate loses rank.
    DivergenceError
        If the loss exceeds ``divergence_factor`` times its initial value.
    """
    layers = [np.array(w, dtype=float) for w in params0.layers]
    ev = loss(_compose_list(layers), target)
    loss0 = ev.value
    ceiling = cfg.divergence_factor * max(loss0, 1e-300)
    traj = Trajectory(meta={"kind": "gd", "eta": cfg.eta})
    k = start_index
    while True:
        done = ev.value <= cfg.target_loss or k >= cfg.max_iters
        if k % cfg.record_every == 0 or done:
            traj.append(k, k * cfg.eta, layers, ev.value, ev.gradient)
        if done:
            break
        grads = _layer_grads(layers, ev.gradient)
        layers = [w - cfg.eta * g for w, g in zip(layers, grads)]
        ev = loss(_compose_list(layers), target)
        k += 1
        if not np.isfinite(ev.value) or ev.value > ceiling:
            raise DivergenceError(f"loss {ev.value:.3e} at iteration {k} exceeds {ceiling:.3e}")
    traj.meta["iterations"] = k
    traj.meta["reached_target"] = bool(ev.value <= cfg.target_loss)
    return NetParams(tuple(layers)), traj


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


class _Field:
    """Vector field ``-grad L^N`` on the flattened parameters."""

    def __init__(self, dims: tuple[int, ...], target: Target):
        self.dims = dims
        self.target = target
        self.shapes = [(dims[j + 1], dims[j]) for j in range(len(dims) - 1)]
        self.splits = np.cumsum([a * b for a, b in self.shapes])[:-1]

    def layers(self, y: NDArray[np.float64]) -> list[NDArray[np.float64]]:
        return [p.reshape(s) for p, s in zip(np.split(y, self.splits), self.shapes)]

    def __call__(self, y: NDArray[np.float64]):
        layers = self.layers(y)
        ev = loss(_compose_list(layers), self.target)
        grads = _layer_grads(layers, ev.gradient)
        return -np.concatenate([g.ravel() for g in grads]), ev


def flow_run(params0: NetParams, target: Target, cfg: FlowConfig) -> tuple[NetParams, Trajectory]:
    """Integrate the gradient flow ``dW_j/dt = -grad_j L^N``.

    Raises
    ------
    SingularityError
        If ``tau = 0`` and the end-to-end matrix loses rank.
    StepSizeUnderflowError
        If the adaptive step collapses.
    """
    fld = _Field(params0.dims, target)
    y = np.concatenate([np.asarray(w, float).ravel() for w in params0.layers])
    f0, ev = fld(y)
    traj = Trajectory(meta={"kind": "flow", "tol": cfg.tol})
    traj.append(0, 0.0, fld.layers(y), ev.value, ev.gradient)
    t = 0.0
    adaptive = cfg.fixed_step is None
    if adaptive:
        h = cfg.h0 if cfg.h0 is not None else _initial_step(fld, y, f0, cfg.tol)
    else:
        h = cfg.fixed_step
    next_grid = cfg.record_dt if cfg.record_dt else math.inf
    steps = rejected = 0
    truncated = False
    while t < cfg.t_end and ev.value > cfg.target_loss:
        if steps >= cfg.max_steps:
            truncated = True
            break
        stop = min(cfg.t_end, next_grid)
        h_try = min(h, stop - t)
        landing = h_try >= stop - t
        k = [f0]
        for i in range(1, 7):
            yi = y + h_try * sum(a * kj for a, kj in zip(_A[i], k))
            ki, evi = fld(yi)
            k.append(ki)
        y_new = y + h_try * sum(b * kj for b, kj in zip(_B5, k) if b)
        if adaptive:
            err_vec = h_try * sum(e * kj for e, kj in zip(_E, k) if e)
            err = float(np.max(np.abs(err_vec) / (1.0 + np.maximum(np.abs(y), np.abs(y_new)))))
            err_ratio = err / cfg.tol
            if err_ratio > 1.0:
                rejected += 1
                h = h_try * max(0.2, 0.9 * err_ratio ** -0.2)
                if h < 1e-14 * max(1.0, abs(t)):
                    raise StepSizeUnderflowError(f"step size {h:.3e} at t={t:.6g}")
                continue
            h_next = h_try * min(5.0, max(0.2, 0.9 * err_ratio ** -0.2)) if err_ratio > 0 else 5.0 * h_try
            # keep the unclipped proposal when the step was shortened to hit a grid point
            h = max(h_next, h) if landing else h_next
        t = stop if landing else t + h_try
        y, f0, ev = y_new, k[6], evi
        steps += 1
        on_grid = landing and stop == next_grid
        if on_grid:
            next_grid += cfg.record_dt
        if on_grid or (not cfg.record_dt and steps % cfg.record_every == 0) or t >= cfg.t_end or ev.value <= cfg.target_loss:
            traj.append(steps, t, fld.layers(y), ev.value, ev.gradient)
    if traj.index[-1] != steps:
        traj.append(steps, t, fld.layers(y), ev.value, ev.gradient)
    traj.meta.update(steps=steps, rejected=rejected, t_final=t, truncated=truncated)
    return NetParams(tuple(fld.layers(y))), traj


def _initial_step(fld: _Field, y, f0, tol: float) -> float:
    """Starting step from the usual two-evaluation heuristic (order 5)."""
    scale = 1.0 + np.abs(y)
    d0 = float(np.max(np.abs(y) / scale))
    d1 = float(np.max(np.abs(f0) / scale))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    f1, _ = fld(y + h0 * f0)
    d2 = float(np.max(np.abs(f1 - f0) / scale)) / h0
    top = max(d1, d2)
    h1 = max(1e-6, h0 * 1e-3) if top <= 1e-15 else (tol / top) ** 0.2 * 0.1
    return min(100.0 * h0, h1)


def estimate_rate(traj: Trajectory, optimum: float = 0.0, trim_fraction: float = 0.5, floor: float = 1e-14) -> tuple[float, float]:
    """Slope of ``log(loss - optimum)`` against ``t`` over the tail of a run.

    Samples with ``loss - optimum <= floor`` are dropped, then the first
    ``trim_fraction`` of the remainder is discarded and an ordinary least
    squares line is fitted.

    Returns
    -------
    slope : float
    r2 : float
        Coefficient of determination of the fit.

    Raises
    ------
    InsufficientDataError
        Fewer than 10 usable samples.
    """
    t = traj.column("t")
    gap = traj.column("loss") - optimum
    keep = gap > floor
    if keep.sum() < 10:
        raise InsufficientDataError(f"only {int(keep.sum())} samples above the optimum")
    t, y = t[keep], np.log(gap[keep])
    start = int(math.floor(trim_fraction * t.size))
    t, y = t[start:], y[start:]
    if t.size < 2:
        raise InsufficientDataError("trimmed window is too short")
    if np.ptp(y) == 0.0:
        return 0.0, 1.0
    fit = linregress(t, y)
    return float(fit.slope), float(fit.rvalue**2)
