"""Non-negative matrix factorization V ~ W H with Frobenius multiplicative updates.

V is documents x terms (sparse, from the tf-idf stage), W is documents x
topics and H is topics x terms. H is kept after fitting so that documents
outside the fitting window can be projected into the same topic space.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

EPS = 1e-12
MODEL_FORMAT = "grantnovelty.topic_model/1"


class NonNegativeViolation(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass
class TopicModel:
    H: np.ndarray
    seed: int
    n_iter: int = 0
    loss: float = 0.0
    loss_history: list[float] = field(default_factory=list, repr=False)
    repaired_topics: int = 0

    @property
    def k(self) -> int:
        return self.H.shape[0]

    @property
    def n_terms(self) -> int:
        return self.H.shape[1]


def _check_nonneg(V) -> None:
    data = V.data if sp.issparse(V) else np.asarray(V)
    if data.size and np.min(data) < 0:
        raise NonNegativeViolation("NMF input has a negative entry")


def _sq_norm(V) -> float:
    if sp.issparse(V):
        return float(V.data @ V.data)
    return float(np.sum(np.asarray(V) ** 2))


def frobenius_loss(V, W: np.ndarray, H: np.ndarray) -> float:
    """``||V - WH||_F^2`` without densifying a sparse V."""
    cross = np.sum(W * np.asarray(V @ H.T))
    gram = np.sum((W.T @ W) * (H @ H.T))
    return max(0.0, _sq_norm(V) - 2.0 * cross + gram)


def _uniform_open_closed(rng: np.random.Generator, shape) -> np.ndarray:
    return 1.0 - rng.random(shape)  # (0, 1]


def nmf_fit(
    V,
    k: int = 50,
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 1e-4,
    init: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[np.ndarray, TopicModel]:
    """Lee-Seung multiplicative updates for ``min ||V - WH||_F^2`` with W, H >= 0.

    Factors start from seeded uniform (0, 1] draws scaled by
    ``sqrt(mean(V) / k)``. Iteration stops once the relative loss decrease
    drops below ``tol`` or after ``max_iter`` sweeps. A topic row of H that
    collapses to zero is redrawn from the same seeded stream and its W
    column set to the exact nonnegative least-squares block solution, which
    keeps the loss non-increasing.

    Returns ``(W, model)``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not sp.issparse(V):
        V = np.asarray(V, dtype=float)
    _check_nonneg(V)
    n, m = V.shape
    if k > min(n, m):
        warnings.warn(f"k={k} exceeds min(rows, cols)={min(n, m)}", RuntimeWarning, stacklevel=2)
    if sp.issparse(V):
        V = sp.csr_matrix(V, dtype=float)
    Vt = V.T.tocsr() if sp.issparse(V) else V.T

    rng = np.random.default_rng(seed)
    mean = (V.sum() / (n * m)) if n * m else 0.0
    scale = np.sqrt(mean / k) if mean > 0 else 1.0
    if init is None:
        W = _uniform_open_closed(rng, (n, k)) * scale
        H = _uniform_open_closed(rng, (k, m)) * scale
    else:
        W = np.array(init[0], dtype=float, copy=True)
        H = np.array(init[1], dtype=float, copy=True)

    vnorm = _sq_norm(V)
    if vnorm == 0.0:
        W = np.zeros((n, k))
        return W, TopicModel(H=H, seed=seed, n_iter=0, loss=0.0, loss_history=[0.0])

    loss = frobenius_loss(V, W, H)
    history = [loss]
    repaired = 0
    it = 0
    for it in range(1, max_iter + 1):
        H *= np.asarray(Vt @ W).T / (W.T @ W @ H + EPS)
        dead = np.flatnonzero(H.max(axis=1) <= 0.0)
        for r in dead:
            H[r] = _uniform_open_closed(rng, m) * scale
            W[:, r] = 0.0
            h = H[r]
            W[:, r] = np.maximum(0.0, np.asarray(V @ h).ravel() - W @ (H @ h)) / (h @ h)
            repaired += 1
        W *= np.asarray(V @ H.T) / (W @ (H @ H.T) + EPS)

        new_loss = frobenius_loss(V, W, H)
        history.append(new_loss)
        rel = (loss - new_loss) / loss if loss > 0 else 0.0
        loss = new_loss
        if loss == 0.0 or rel < tol:
            break

    return W, TopicModel(H=H, seed=seed, n_iter=it, loss=loss, loss_history=history, repaired_topics=repaired)


def nmf_transform(model: TopicModel, v, max_iter: int = 1000, tol: float = 1e-6, return_history: bool = False):
    """Project rows of ``v`` onto the frozen topics: ``min_{w >= 0} ||v - w H||^2``.

    Multiplicative updates on w only, starting from the best constant row
    (so the result does not depend on batch composition or row position).
    Each row stops independently once its relative loss decrease falls
    below ``tol``. A 1-d ``v`` returns a 1-d load vector.
    """
    H = model.H
    single = not sp.issparse(v) and np.ndim(v) == 1
    if single:
        v = np.asarray(v, dtype=float)[None, :]
    if v.shape[1] != H.shape[1]:
        raise DimensionMismatch(f"vector has {v.shape[1]} terms, model has {H.shape[1]}")
    if not sp.issparse(v):
        v = np.asarray(v, dtype=float)
    _check_nonneg(v)

    k = H.shape[0]
    VHt = np.asarray(v @ H.T)
    G = H @ H.T
    if sp.issparse(v):
        vsq = np.asarray(v.multiply(v).sum(axis=1)).ravel()
    else:
        vsq = np.sum(v * v, axis=1)
    ones_h = H.sum(axis=0)
    c = VHt.sum(axis=1) / max(float(ones_h @ ones_h), EPS)
    W = np.repeat(np.maximum(c, EPS)[:, None], k, axis=1)
    W[vsq == 0] = 0.0

    def row_loss(Wr, idx):
        return vsq[idx] - 2.0 * np.sum(Wr * VHt[idx], axis=1) + np.sum((Wr @ G) * Wr, axis=1)

    active = np.flatnonzero(vsq > 0)
    loss = row_loss(W[active], active)
    history = [float(loss.sum())] if return_history else None
    for _ in range(max_iter):
        if active.size == 0:
            break
        Wa = W[active]
        Wa *= VHt[active] / (Wa @ G + EPS)
        W[active] = Wa
        new_loss = row_loss(Wa, active)
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.where(loss > 0, (loss - new_loss) / loss, 0.0)
        if return_history:
            history.append(float(new_loss.sum()))
        keep = rel >= tol
        active = active[keep]
        loss = new_loss[keep]

    out = W[0] if single else W
    if return_history:
        return out, history
    return out


def save_topic_model(model: TopicModel, path) -> None:
    """Write the model as JSON: k, seed, shape and H in row-major order."""
    doc = {
        "format": MODEL_FORMAT,
        "k": model.k,
        "seed": model.seed,
        "n_terms": model.n_terms,
        "n_iter": model.n_iter,
        "loss": model.loss,
        "H": [float(x) for x in model.H.ravel(order="C")],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_topic_model(path) -> TopicModel:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"unrecognised topic model format {doc.get('format')!r}")
    H = np.array(doc["H"], dtype=float).reshape(doc["k"], doc["n_terms"])
    return TopicModel(H=H, seed=doc["seed"], n_iter=doc["n_iter"], loss=doc["loss"])
