"""One-class SVM trained by SMO on the dual problem.

    minimize    1/2 sum_ij a_i a_j K(x_i, x_j)
    subject to  0 <= a_i <= 1/(nu l),  sum_i a_i = 1

The decision value of a point is ``sum_i a_i K(x_i, x) - rho``; its
negation is the raw novelty (distance past the learned boundary).
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

MODEL_FORMAT = "grantnovelty.ocsvm/1"


class InfeasibleNuError(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class ConvergenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "rbf"
    gamma: float | None = None  # None: resolved from the training data at fit time

    def __post_init__(self):
        if self.kind not in ("rbf", "linear"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.gamma is not None and self.kind == "rbf" and not self.gamma > 0:
            raise ValueError("rbf gamma must be positive")


def rbf_kernel(x, y, gamma: float) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise DimensionMismatch(f"{x.shape} vs {y.shape}")
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    d = x - y
    return math.exp(-gamma * float(d @ d))


def default_gamma(X: np.ndarray) -> float:
    """``1 / (dims * mean per-dimension variance)``; 1/dims for constant data."""
    X = np.asarray(X, dtype=float)
    k = X.shape[1]
    v = float(X.var(axis=0).mean())
    return 1.0 / (k * v) if v > 0 else 1.0 / k


def kernel_matrix(A: np.ndarray, B: np.ndarray, kernel: KernelSpec) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise DimensionMismatch(f"{A.shape[1]} vs {B.shape[1]} dimensions")
    dot = A @ B.T
    if kernel.kind == "linear":
        return dot
    sq = np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :] - 2.0 * dot
    return np.exp(-kernel.gamma * np.maximum(sq, 0.0))


class _KernelRows:
    """Kernel rows over the training set, either fully cached or LRU-cached."""

    def __init__(self, X: np.ndarray, kernel: KernelSpec, cache_cap: int, lru_rows: int = 1024):
        self.X = X
        self.kernel = kernel
        self.full = None
        if X.shape[0] <= cache_cap:
            self.full = kernel_matrix(X, X, kernel)
            self.diag = np.diag(self.full).copy()
        else:
            if kernel.kind == "rbf":
                self.diag = np.ones(X.shape[0])
            else:
                self.diag = np.sum(X * X, axis=1)
            self._lru: OrderedDict[int, np.ndarray] = OrderedDict()
            self._lru_rows = lru_rows

    def row(self, i: int) -> np.ndarray:
        if self.full is not None:
            return self.full[i]
        r = self._lru.get(i)
        if r is None:
            r = kernel_matrix(self.X[i : i + 1], self.X, self.kernel)[0]
            self._lru[i] = r
            if len(self._lru) > self._lru_rows:
                self._lru.popitem(last=False)
        else:
            self._lru.move_to_end(i)
        return r


@dataclass
class OcSvmModel:
    support_vectors: np.ndarray
    alphas: np.ndarray
    rho: float
    nu: float
    n_train: int
    kernel: KernelSpec
    converged: bool = True
    kkt_violation: float = 0.0
    n_iter: int = 0
    objective: float = float("nan")
    support_index: np.ndarray | None = None

    @property
    def upper_bound(self) -> float:
        return 1.0 / (self.nu * self.n_train)

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "nu": self.nu,
            "kernel": self.kernel.kind,
            "gamma": self.kernel.gamma,
            "rho": self.rho,
            "n_train": self.n_train,
            "converged": self.converged,
            "kkt_violation": self.kkt_violation,
            "support": [
                {"alpha": float(a), "x": [float(v) for v in sv]}
                for a, sv in zip(self.alphas, self.support_vectors)
            ],
        }


def _rho_from_gradient(alpha: np.ndarray, G: np.ndarray, C: float) -> float:
    free = (alpha > 0) & (alpha < C)
    if free.any():
        return float(G[free].mean())
    at_zero = alpha <= 0
    at_upper = alpha >= C
    ub = float(G[at_zero].min()) if at_zero.any() else math.inf
    lb = float(G[at_upper].max()) if at_upper.any() else -math.inf
    if math.isinf(ub):
        return lb
    if math.isinf(lb):
        return ub
    return 0.5 * (ub + lb)


def ocsvm_fit(
    X,
    nu: float = 0.05,
    kernel: KernelSpec | None = None,
    tol: float = 1e-4,
    max_iter: int = 10_000_000,
    cache_cap: int = 20_000,
) -> OcSvmModel:
    """Fit a one-class SVM with maximal-violating-pair SMO.

    Starts from the feasible point with the first ``floor(nu*l)`` multipliers
    at the upper bound and the remainder on the next one. Stops once
    ``max_{up} -G - min_{low} -G < tol``. Reaching ``max_iter`` first returns
    the current model with ``converged=False`` and a warning.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("ocsvm_fit needs a 2-d matrix with at least 2 rows")
    l = X.shape[0]
    if not 0.0 < nu <= 1.0:
        raise InfeasibleNuError(f"nu must lie in (0, 1], got {nu}")
    if nu * l < 1.0:
        raise InfeasibleNuError(f"nu * l = {nu * l:.3g} < 1")
    kernel = kernel or KernelSpec()
    if kernel.kind == "rbf" and kernel.gamma is None:
        kernel = KernelSpec("rbf", default_gamma(X))

    C = 1.0 / (nu * l)
    alpha = np.zeros(l)
    n_full = int(math.floor(nu * l + 1e-12))
    alpha[:n_full] = C
    if n_full < l:
        alpha[n_full] = max(0.0, 1.0 - n_full * C)

    rows = _KernelRows(X, kernel, cache_cap)
    if rows.full is not None:
        G = rows.full @ alpha
    else:
        G = np.zeros(l)
        for i in np.flatnonzero(alpha):
            G += alpha[i] * rows.row(i)

    neg_inf = -np.inf
    gap = math.inf
    it = 0
    converged = False
    while it < max_iter:
        up = np.where(alpha < C, -G, neg_inf)
        low = np.where(alpha > 0, G, neg_inf)
        i = int(np.argmax(up))
        j = int(np.argmax(low))
        gap = up[i] + low[j]
        # an empty side (every alpha at a bound) leaves nothing to move
        if not gap >= tol:
            converged = True
            break
        Qi = rows.row(i)
        Qj = rows.row(j)
        quad = rows.diag[i] + rows.diag[j] - 2.0 * Qi[j]
        if quad <= 0:
            quad = 1e-12
        delta = (G[j] - G[i]) / quad
        room_i = C - alpha[i]
        room_j = alpha[j]
        if delta >= min(room_i, room_j):
            # step is clipped by the box; land exactly on the bound
            if room_i <= room_j:
                delta = room_i
                alpha[i] = C
                alpha[j] = 0.0 if room_i == room_j else alpha[j] - delta
            else:
                delta = room_j
                alpha[i] += delta
                alpha[j] = 0.0
        else:
            alpha[i] += delta
            alpha[j] -= delta
        G += delta * (Qi - Qj)
        it += 1

    if not converged:
        warnings.warn(
            f"one-class SVM stopped after {it} pair updates with KKT gap {gap:.3g}",
            ConvergenceWarning,
            stacklevel=2,
        )

    rho = _rho_from_gradient(alpha, G, C)
    sv = np.flatnonzero(alpha > 0)
    return OcSvmModel(
        support_vectors=X[sv].copy(),
        alphas=alpha[sv].copy(),
        rho=rho,
        nu=nu,
        n_train=l,
        kernel=kernel,
        converged=converged,
        kkt_violation=float(max(gap, 0.0)),
        n_iter=it,
        objective=0.5 * float(alpha @ G),
        support_index=sv,
    )


def kernel_expansion(model: OcSvmModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    X2 = np.atleast_2d(X)
    if X2.shape[1] != model.support_vectors.shape[1]:
        raise DimensionMismatch(
            f"input has {X2.shape[1]} dimensions, model has {model.support_vectors.shape[1]}"
        )
    return kernel_matrix(X2, model.support_vectors, model.kernel) @ model.alphas


def decision_value(model: OcSvmModel, x):
    """``sum_i a_i K(x_i, x) - rho``; negative outside the learned support."""
    vals = kernel_expansion(model, x) - model.rho
    return float(vals[0]) if np.ndim(x) == 1 else vals


def raw_novelty(model: OcSvmModel, x):
    """``rho - sum_i a_i K(x_i, x)``: larger is more novel."""
    return -decision_value(model, x)


def save_ocsvm(model: OcSvmModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh)


def load_ocsvm(path) -> OcSvmModel:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"unrecognised one-class SVM format {doc.get('format')!r}")
    support = doc["support"]
    return OcSvmModel(
        support_vectors=np.array([s["x"] for s in support], dtype=float),
        alphas=np.array([s["alpha"] for s in support], dtype=float),
        rho=doc["rho"],
        nu=doc["nu"],
        n_train=doc["n_train"],
        kernel=KernelSpec(doc["kernel"], doc["gamma"]),
        converged=doc["converged"],
        kkt_violation=doc["kkt_violation"],
    )
