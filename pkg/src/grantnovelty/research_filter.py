"""Non-research grant filter.

An L2-penalized logistic regression over tf-idf features, grown from a
small seed list by uncertainty-sampling active learning and evaluated by
stratified k-fold AUC.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .stats import roc_auc


class FilterError(ValueError):
    pass


class SingleClassError(FilterError):
    pass


class FilterConvergenceWarning(RuntimeWarning):
    pass


class LabelsUnavailable(FilterError):
    """The oracle cannot answer for some requested ids."""

    def __init__(self, ids):
        self.ids = list(ids)
        super().__init__(f"{len(self.ids)} requested grants have no label")


@dataclass(frozen=True)
class LogRegModel:
    weights: np.ndarray
    intercept: float
    l2: float
    converged: bool = True
    n_iter: int = 0
    grad_norm: float = 0.0
    loglik: float = 0.0

    @property
    def n_features(self) -> int:
        return int(self.weights.size)

    def negated(self) -> "LogRegModel":
        """The model for flipped labels."""
        return LogRegModel(-self.weights, -self.intercept, self.l2, self.converged, self.n_iter, self.grad_norm, self.loglik)

    def to_dict(self) -> dict:
        return {
            "weights": [float(w) for w in self.weights],
            "intercept": float(self.intercept),
            "l2": self.l2,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "grad_norm": self.grad_norm,
            "loglik": self.loglik,
        }


def _as_matrix(X):
    if sp.issparse(X):
        return X.tocsr().astype(float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X


def _log1pexp(s: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, s)


def _sigmoid(s):
    s = np.asarray(s, dtype=float)
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    e = np.exp(s[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def penalized_loglik(X, y, w: np.ndarray, b: float, l2: float) -> float:
    s = X @ w + b
    return float(np.sum(y * s - _log1pexp(s)) - 0.5 * l2 * float(w @ w))


def penalized_gradient(X, y, w: np.ndarray, b: float, l2: float) -> tuple[np.ndarray, float]:
    """Gradient of :func:`penalized_loglik` in (weights, intercept); the intercept is unpenalized."""
    r = y - _sigmoid(X @ w + b)
    gw = np.asarray(X.T @ r).ravel() - l2 * w
    return gw, float(r.sum())


def logreg_fit(X, y, l2: float = 1.0, max_iter: int = 5000, tol: float = 1e-6) -> LogRegModel:
    """Full-batch gradient ascent with Armijo backtracking.

    Stops once the gradient norm drops below ``tol``. Each accepted step
    does not decrease the penalized log-likelihood.
    """
    X = _as_matrix(X)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise FilterError(f"{X.shape[0]} rows but {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise FilterError("labels must be 0 or 1")
    if y.min() == y.max():
        raise SingleClassError("logistic regression needs both classes")
    if l2 < 0:
        raise FilterError("l2 must be >= 0")

    w = np.zeros(X.shape[1])
    b = 0.0
    f = penalized_loglik(X, y, w, b, l2)
    step = 1.0
    gnorm = math.inf
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        gw, gb = penalized_gradient(X, y, w, b, l2)
        g2 = float(gw @ gw) + gb * gb
        gnorm = math.sqrt(g2)
        if gnorm < tol:
            converged = True
            break
        step *= 2.0
        while True:
            w_new = w + step * gw
            b_new = b + step * gb
            f_new = penalized_loglik(X, y, w_new, b_new, l2)
            if f_new >= f + 0.5 * step * g2:
                break
            step *= 0.5
            if step < 1e-300:
                break
        if step < 1e-300 or f_new < f:
            break
        w, b, f = w_new, b_new, f_new
    else:
        gw, gb = penalized_gradient(X, y, w, b, l2)
        gnorm = math.sqrt(float(gw @ gw) + gb * gb)
        converged = gnorm < tol
    if not converged:
        warnings.warn(f"logistic fit stopped with gradient norm {gnorm:.3g}", FilterConvergenceWarning, stacklevel=2)
    return LogRegModel(w, float(b), float(l2), converged, it, float(gnorm), float(f))


def predict_proba(model: LogRegModel, X) -> np.ndarray | float:
    single = not sp.issparse(X) and np.ndim(X) == 1
    X = _as_matrix(X) if not single else np.asarray(X, dtype=float)[None, :]
    if X.shape[1] != model.n_features:
        raise FilterError(f"expected {model.n_features} features, got {X.shape[1]}")
    p = _sigmoid(np.asarray(X @ model.weights).ravel() + model.intercept)
    return float(p[0]) if single else p


# ---------------------------------------------------------------------------
# active learning
# ---------------------------------------------------------------------------


@dataclass
class LabelPool:
    """Feature rows plus the labels gathered so far.

    ``ids`` name the rows; ``labels`` and ``provenance`` are keyed by row
    index. Everything not labeled is in the unlabeled pool.
    """

    X: object
    ids: list[str]
    labels: dict[int, int] = field(default_factory=dict)
    provenance: dict[int, str] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    pending: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.X = _as_matrix(self.X)
        if self.X.shape[0] != len(self.ids):
            raise FilterError("ids and feature rows differ in length")

    @classmethod
    def from_seed(cls, X, ids: Sequence[str], seed_labels: dict[str, int]) -> "LabelPool":
        pool = cls(X, list(ids))
        pos = {g: i for i, g in enumerate(pool.ids)}
        for gid, lab in seed_labels.items():
            if gid not in pos:
                raise FilterError(f"seed label for unknown id {gid!r}")
            pool.add(pos[gid], lab, "seed-list")
        return pool

    def add(self, index: int, label: int, provenance: str) -> None:
        if label not in (0, 1):
            raise FilterError(f"label must be 0 or 1, got {label!r}")
        self.labels[int(index)] = int(label)
        self.provenance[int(index)] = provenance

    def labeled(self) -> np.ndarray:
        return np.array(sorted(self.labels), dtype=int)

    def unlabeled(self) -> np.ndarray:
        mask = np.ones(len(self.ids), dtype=bool)
        mask[list(self.labels)] = False
        return np.flatnonzero(mask)

    def training_set(self):
        idx = self.labeled()
        return self.X[idx], np.array([self.labels[i] for i in idx], dtype=float)

    def label_rows(self) -> list[tuple[str, int, str]]:
        return [(self.ids[i], self.labels[i], self.provenance[i]) for i in self.labeled()]


Oracle = Callable[[list[str]], Sequence[int]]


def uncertainty_order(p: np.ndarray) -> np.ndarray:
    """Positions sorted by |p - 0.5|, ties broken by position."""
    return np.lexsort((np.arange(p.size), np.abs(p - 0.5)))


def active_learning_loop(
    pool: LabelPool,
    oracle: Oracle,
    rounds: int = 10,
    batch: int = 20,
    l2: float = 1.0,
    max_iter: int = 5000,
    tol: float = 1e-6,
    select: str = "uncertainty",
    seed: int = 0,
    on_round: Callable[[int, LogRegModel, LabelPool], None] | None = None,
) -> tuple[LogRegModel, LabelPool]:
    """Grow the labeled set for ``rounds`` rounds and return the final fit.

    Each round fits on the current labels, asks ``oracle`` for the ``batch``
    unlabeled rows whose predicted probability is closest to 0.5, and moves
    them to the labeled set. ``select="random"`` draws the batch uniformly
    instead (a baseline). The returned model is refitted on all labels.
    """
    if rounds < 1 or batch < 1:
        raise FilterError("rounds and batch must be >= 1")
    _, y0 = pool.training_set()
    if y0.size == 0 or y0.min() == y0.max():
        raise SingleClassError("seed labels must contain both classes")
    if select not in ("uncertainty", "random"):
        raise FilterError(f"unknown selection rule {select!r}")
    rng = np.random.default_rng(seed)
    for r in range(1, rounds + 1):
        model = logreg_fit(*pool.training_set(), l2=l2, max_iter=max_iter, tol=tol)
        if on_round is not None:
            on_round(r, model, pool)
        free = pool.unlabeled()
        if free.size == 0:
            pool.notes.append(f"pool exhausted before round {r}")
            break
        if select == "uncertainty":
            p = predict_proba(model, pool.X[free])
            chosen = free[uncertainty_order(np.atleast_1d(p))[:batch]]
        else:
            chosen = np.sort(rng.choice(free, size=min(batch, free.size), replace=False))
        try:
            answers = list(oracle([pool.ids[i] for i in chosen]))
        except LabelsUnavailable as exc:
            pool.pending = exc.ids
            pool.notes.append(f"stopped in round {r}: {exc}")
            break
        if len(answers) != len(chosen):
            raise FilterError("oracle returned the wrong number of labels")
        for i, lab in zip(chosen, answers):
            pool.add(int(i), int(lab), f"round-{r}")
    return logreg_fit(*pool.training_set(), l2=l2, max_iter=max_iter, tol=tol), pool


def table_oracle(labels: dict[str, int]) -> Oracle:
    """Oracle backed by a prepared labels mapping."""

    def ask(ids: list[str]) -> list[int]:
        missing = [g for g in ids if g not in labels]
        if missing:
            raise LabelsUnavailable(missing)
        return [int(labels[g]) for g in ids]

    return ask


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CvResult:
    mean: float
    sd: float
    fold_aucs: tuple[float, ...]

    def to_dict(self) -> dict:
        return {"mean_auc": self.mean, "sd_auc": self.sd, "fold_aucs": list(self.fold_aucs)}


def stratified_folds(y, folds: int = 3, seed: int = 0) -> list[np.ndarray]:
    """Test-index arrays; each class is shuffled and dealt round-robin."""
    y = np.asarray(y).astype(int)
    if folds < 2:
        raise FilterError("need at least 2 folds")
    rng = np.random.default_rng(seed)
    out: list[list[int]] = [[] for _ in range(folds)]
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        if idx.size < folds:
            raise FilterError(f"class {cls} has {idx.size} rows, fewer than {folds} folds")
        for j, i in enumerate(rng.permutation(idx)):
            out[j % folds].append(int(i))
    return [np.sort(np.array(f, dtype=int)) for f in out]


def cv_auc(X, y, folds: int = 3, l2: float = 1.0, seed: int = 0, max_iter: int = 5000, tol: float = 1e-6) -> CvResult:
    X = _as_matrix(X)
    y = np.asarray(y, dtype=float).ravel()
    aucs = []
    for test in stratified_folds(y, folds, seed):
        train = np.setdiff1d(np.arange(y.size), test)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", FilterConvergenceWarning)
            model = logreg_fit(X[train], y[train], l2=l2, max_iter=max_iter, tol=tol)
        aucs.append(roc_auc(predict_proba(model, X[test]), y[test]))
    arr = np.array(aucs)
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return CvResult(float(arr.mean()), sd, tuple(float(a) for a in arr))


# ---------------------------------------------------------------------------
# labels file
# ---------------------------------------------------------------------------


LABEL_COLUMNS = ("grant_id", "label", "provenance")


def read_labels(path) -> list[tuple[str, int, str]]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("grant_id", "label") if c not in (reader.fieldnames or [])]
        if missing:
            raise FilterError(f"labels file lacks column {missing[0]!r}")
        for line, row in enumerate(reader, start=2):
            lab = (row.get("label") or "").strip()
            if lab not in ("0", "1"):
                raise FilterError(f"line {line}: label must be 0 or 1, got {lab!r}")
            out.append((row["grant_id"].strip(), int(lab), (row.get("provenance") or "seed-list").strip()))
    return out


def write_labels(rows: Sequence[tuple[str, int, str]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LABEL_COLUMNS)
        for gid, lab, prov in rows:
            w.writerow([gid, int(lab), prov])
