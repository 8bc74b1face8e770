"""Deep linear networks ``W = W_N ... W_1``.

Layer ``j`` (1-based in the docs, 0-based in ``layers``) has shape
``(d_j, d_{j-1})``, so the end-to-end matrix maps ``R^{d_0}`` to ``R^{d_N}``.
Empty products are identities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import InputError, RankError
from .matcore import PsdMatrix, psd_power, random_orthogonal, thin_svd

__all__ = [
    "NetParams",
    "BalanceReport",
    "compose",
    "partial_products",
    "layer_gradients",
    "balanced_init",
    "balance_report",
    "end_to_end_velocity",
    "balanced_velocity",
]


@dataclass(frozen=True)
class NetParams:
    """Immutable tuple of layer weights ``(W_1, ..., W_N)``."""

    layers: tuple[NDArray[np.float64], ...]

    def __post_init__(self):
        layers = tuple(np.array(w, dtype=float) for w in self.layers)
        if not layers:
            raise InputError("a network needs at least one layer")
        for w in layers:
            if w.ndim != 2:
                raise InputError("layers must be 2-d")
            w.setflags(write=False)
        for j in range(1, len(layers)):
            if layers[j].shape[1] != layers[j - 1].shape[0]:
                raise InputError(f"layer {j + 1} has {layers[j].shape[1]} columns, expected {layers[j - 1].shape[0]}")
        object.__setattr__(self, "layers", layers)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def dims(self) -> tuple[int, ...]:
        """Widths ``(d_0, ..., d_N)``."""
        return (self.layers[0].shape[1],) + tuple(w.shape[0] for w in self.layers)

    @property
    def size(self) -> int:
        return int(sum(w.size for w in self.layers))

    def flatten(self) -> NDArray[np.float64]:
        """Concatenate column-major ``vec`` of every layer."""
        return np.concatenate([w.reshape(-1, order="F") for w in self.layers])

    @classmethod
    def unflatten(cls, theta: ArrayLike, dims: tuple[int, ...]) -> "NetParams":
        theta = np.asarray(theta, float)
        layers, pos = [], 0
        for j in range(1, len(dims)):
            k = dims[j] * dims[j - 1]
            layers.append(theta[pos : pos + k].reshape((dims[j], dims[j - 1]), order="F"))
            pos += k
        if pos != theta.size:
            raise InputError("parameter vector length does not match dims")
        return cls(tuple(layers))

    def to_json(self) -> dict:
        return {"dims": list(self.dims), "layers": [w.tolist() for w in self.layers]}

    @classmethod
    def from_json(cls, doc: dict) -> "NetParams":
        out = cls(tuple(np.array(w, dtype=float) for w in doc["layers"]))
        if "dims" in doc and list(out.dims) != list(doc["dims"]):
            raise InputError(f"dims header {doc['dims']} disagrees with layers {out.dims}")
        return out

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        doc = self.to_json()
        if extra:
            doc.update(extra)
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path: str | Path) -> "NetParams":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class BalanceReport:
    """Residuals ``||W_j W_j^T - W_{j+1}^T W_{j+1}||_F`` for ``j = 1..N-1``."""

    residuals: tuple[float, ...]

    @property
    def max_residual(self) -> float:
        return max(self.residuals, default=0.0)


def compose(params: NetParams) -> NDArray[np.float64]:
    """End-to-end matrix ``W_N ... W_1``."""
    out = params.layers[0]
    for w in params.layers[1:]:
        out = w @ out
    return out


def partial_products(params: NetParams) -> tuple[list[NDArray[np.float64]], list[NDArray[np.float64]]]:
    """Prefix and suffix products.

    Returns
    -------
    below : list
        ``below[j] = W_{j:1}`` for ``j = 0..N`` (``below[0] = I_{d_0}``).
    above : list
        ``above[j] = W_{N:j+1}`` for ``j = 0..N`` (``above[N] = I_{d_N}``).
    """
    ws = params.layers
    n_layers = len(ws)
    dims = params.dims
    below = [np.eye(dims[0])]
    for w in ws:
        below.append(w @ below[-1])
    above = [None] * (n_layers + 1)
    above[n_layers] = np.eye(dims[-1])
    for j in range(n_layers - 1, -1, -1):
        above[j] = above[j + 1] @ ws[j]
    return below, above


def layer_gradients(params: NetParams, end_grad: ArrayLike) -> list[NDArray[np.float64]]:
    """Per-layer gradients ``W_{N:j+1}^T G W_{j-1:1}^T`` of ``L(W_N ... W_1)``."""
    g = np.asarray(end_grad, float)
    dims = params.dims
    if g.shape != (dims[-1], dims[0]):
        raise InputError(f"end gradient has shape {g.shape}, expected {(dims[-1], dims[0])}")
    below, above = partial_products(params)
    return [above[j + 1].T @ g @ below[j].T for j in range(params.depth)]


def _semi_orthogonal(d: int, k: int, rng: np.random.Generator) -> NDArray[np.float64]:
    return random_orthogonal(d, rng)[:, :k]


def balanced_init(end_to_end: ArrayLike, dims: tuple[int, ...] | list[int], seed: int = 0) -> NetParams:
    """Balanced factorization of a given end-to-end matrix.

    With the thin SVD ``E = U S V^T`` of rank ``k`` the layers are
    ``W_N = U S^{1/N} P_N^T``, ``W_j = P_{j+1} S^{1/N} P_j^T`` and
    ``W_1 = P_2 S^{1/N} V^T``, where the ``P_j`` are random
    ``d_{j-1} x k`` matrices with orthonormal columns.

    Parameters
    ----------
    end_to_end : array_like, shape (d_N, d_0)
    dims : sequence of int
        Widths ``(d_0, ..., d_N)``.
    seed : int

    Raises
    ------
    RankError
        If the rank of ``end_to_end`` exceeds ``min(dims)``.
    """
    e = np.asarray(end_to_end, float)
    dims = tuple(int(d) for d in dims)
    n_layers = len(dims) - 1
    if n_layers < 1:
        raise InputError("dims needs at least two entries")
    if e.shape != (dims[-1], dims[0]):
        raise InputError(f"end-to-end shape {e.shape} does not match dims {dims}")
    if n_layers == 1:
        return NetParams((e,))
    svd = thin_svd(e)
    k = svd.rank
    if k > min(dims):
        raise RankError(f"rank {k} exceeds the narrowest width {min(dims)}")
    rng = np.random.default_rng(seed)
    root = svd.singvals ** (1.0 / n_layers)
    # p[j] has shape (d_j, k) and sits between layers j and j+1
    p = [svd.right] + [_semi_orthogonal(dims[j], k, rng) for j in range(1, n_layers)] + [svd.left]
    layers = tuple((p[j + 1] * root) @ p[j].T for j in range(n_layers))
    return NetParams(layers)


def balance_report(params: NetParams) -> BalanceReport:
    ws = params.layers
    res = tuple(float(np.linalg.norm(ws[j] @ ws[j].T - ws[j + 1].T @ ws[j + 1])) for j in range(len(ws) - 1))
    return BalanceReport(res)


def end_to_end_velocity(params: NetParams, end_grad: ArrayLike) -> NDArray[np.float64]:
    """``dW/dt = -sum_j W_{N:j+1} W_{N:j+1}^T G W_{j-1:1}^T W_{j-1:1}`` under gradient flow."""
    g = np.asarray(end_grad, float)
    below, above = partial_products(params)
    out = np.zeros_like(g)
    for j in range(params.depth):
        a, b = above[j + 1], below[j]
        out -= a @ (a.T @ g @ b.T) @ b
    return out


def balanced_velocity(w: ArrayLike, end_grad: ArrayLike, depth: int) -> NDArray[np.float64]:
    """Closed form ``-sum_j (W W^T)^{(N-j)/N} G (W^T W)^{(j-1)/N}`` valid for balanced nets."""
    w = np.asarray(w, float)
    g = np.asarray(end_grad, float)
    left = PsdMatrix(w @ w.T)
    right = PsdMatrix(w.T @ w)
    out = np.zeros_like(g)
    for j in range(1, depth + 1):
        out -= psd_power(left, (depth - j) / depth) @ g @ psd_power(right, (j - 1) / depth)
    return out
