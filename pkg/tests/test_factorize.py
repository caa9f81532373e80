import time
import warnings

import numpy as np
import pytest
import scipy.sparse as sp

from grantnovelty.factorize import (
    DimensionMismatch,
    NonNegativeViolation,
    TopicModel,
    frobenius_loss,
    load_topic_model,
    nmf_fit,
    nmf_transform,
    save_topic_model,
)


def _rel_err(V, W, H):
    return np.linalg.norm(V - W @ H) / np.linalg.norm(V)


def _planted(seed=0, n=100, m=80, r=5):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(n, r)) @ rng.uniform(size=(r, m))


def _assert_monotone(history):
    h = np.asarray(history)
    assert np.all(np.diff(h) <= 1e-12 * np.maximum(h[:-1], 1.0))


def test_exact_rank_one():
    V = np.outer([1.0, 2.0], [3.0, 4.0])
    W, model = nmf_fit(V, k=1, seed=0, max_iter=2000, tol=1e-14)
    assert _rel_err(V, W, model.H) < 1e-6
    _assert_monotone(model.loss_history)


def test_zero_matrix():
    W, model = nmf_fit(np.zeros((4, 3)), k=2, seed=1)
    assert model.loss == 0.0
    assert np.array_equal(W @ model.H, np.zeros((4, 3)))


def test_planted_rank_five_best_of_seeds():
    V = _planted()
    start = time.perf_counter()
    errs = []
    for seed in range(5):
        W, model = nmf_fit(V, k=5, seed=seed, max_iter=500, tol=0.0)
        _assert_monotone(model.loss_history)
        assert model.n_iter <= 500
        assert (W >= 0).all() and (model.H >= 0).all()
        errs.append(_rel_err(V, W, model.H))
    assert min(errs) <= 1e-2
    assert time.perf_counter() - start < 10


def test_sparse_and_dense_agree():
    V = _planted(3, 30, 25, 3)
    V[V < np.quantile(V, 0.5)] = 0.0
    Wd, md = nmf_fit(V, k=3, seed=2, max_iter=50)
    Ws, ms = nmf_fit(sp.csr_matrix(V), k=3, seed=2, max_iter=50)
    assert np.allclose(Wd, Ws, rtol=1e-9) and np.allclose(md.H, ms.H, rtol=1e-9)
    assert frobenius_loss(sp.csr_matrix(V), Wd, md.H) == pytest.approx(np.linalg.norm(V - Wd @ md.H) ** 2, rel=1e-9)


def test_determinism():
    V = _planted(1, 40, 30, 4)
    a = nmf_fit(V, k=4, seed=9, max_iter=60)
    b = nmf_fit(V, k=4, seed=9, max_iter=60)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1].H, b[1].H)


def test_scaling_consistency():
    V = _planted(2, 20, 15, 3)
    W0, H0 = nmf_fit(V, k=3, seed=0, max_iter=0)[0], nmf_fit(V, k=3, seed=0, max_iter=0)[1].H
    c = 3.0
    _, m1 = nmf_fit(V, k=3, max_iter=25, tol=0.0, init=(W0, H0))
    _, m2 = nmf_fit(c * V, k=3, max_iter=25, tol=0.0, init=(np.sqrt(c) * W0, np.sqrt(c) * H0))
    assert m2.loss == pytest.approx(c**2 * m1.loss, rel=1e-9)


def test_sparse_corpus_monotone_with_repairs():
    rng = np.random.default_rng(5)
    V = sp.random(60, 200, density=0.02, random_state=5, format="csr")
    W, model = nmf_fit(V, k=20, seed=5, max_iter=300, tol=0.0)
    _assert_monotone(model.loss_history)
    assert (model.H.max(axis=1) > 0).all()


def test_negative_entry_rejected():
    with pytest.raises(NonNegativeViolation):
        nmf_fit(np.array([[1.0, -0.1], [0.0, 1.0]]), k=1)


def test_k_too_large_warns():
    with pytest.warns(RuntimeWarning):
        nmf_fit(np.ones((3, 4)), k=5, max_iter=2)


def test_transform_zero_and_identity():
    model = TopicModel(H=np.eye(4), seed=0)
    assert np.array_equal(nmf_transform(model, np.zeros(4)), np.zeros(4))
    v = np.array([0.5, 0.0, 2.0, 1.0])
    assert np.allclose(nmf_transform(model, v, tol=0.0, max_iter=2000), v, atol=1e-6)


def test_transform_training_row_residual():
    V = _planted(4, 60, 40, 5)
    W, model = nmf_fit(V, k=5, seed=0, max_iter=500, tol=1e-10)
    w, history = nmf_transform(model, V[7], return_history=True, tol=1e-12, max_iter=5000)
    _assert_monotone(history)
    fitted = np.linalg.norm(V[7] - W[7] @ model.H)
    assert np.linalg.norm(V[7] - w @ model.H) <= 2 * fitted + 1e-12


def test_transform_batch_independent():
    V = _planted(6, 30, 20, 3)
    _, model = nmf_fit(V, k=3, seed=0, max_iter=100)
    together = nmf_transform(model, V[[3, 3, 9]])
    assert np.array_equal(together[0], together[1])
    assert np.allclose(together[2], nmf_transform(model, V[9]), rtol=1e-12, atol=0)


def test_transform_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        nmf_transform(TopicModel(H=np.eye(3), seed=0), np.ones(4))


def test_model_round_trip(tmp_path):
    _, model = nmf_fit(_planted(0, 20, 10, 2), k=2, seed=3, max_iter=20)
    save_topic_model(model, tmp_path / "topics.txt")
    back = load_topic_model(tmp_path / "topics.txt")
    assert back.seed == 3
    assert np.array_equal(back.H, model.H)
