import math
import warnings

import numpy as np
import pytest
import scipy.sparse as sp

from grantnovelty.research_filter import (
    FilterConvergenceWarning,
    FilterError,
    LabelPool,
    LabelsUnavailable,
    LogRegModel,
    SingleClassError,
    active_learning_loop,
    cv_auc,
    logreg_fit,
    penalized_gradient,
    penalized_loglik,
    predict_proba,
    read_labels,
    stratified_folds,
    table_oracle,
    uncertainty_order,
    write_labels,
)


def _separable(seed, n=200, d=5):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    w = rng.normal(size=d)
    s = X @ w
    y = (s > np.median(s)).astype(float)
    # push the classes apart so the margin is strictly positive
    X += np.outer(np.where(y == 1, 0.5, -0.5), w / np.linalg.norm(w))
    return X, y


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 6))
    y = (rng.random(40) < 0.4).astype(float)
    h = 1e-5
    for _ in range(10):
        w, b, l2 = rng.normal(size=6), float(rng.normal()), float(rng.uniform(0, 2))
        gw, gb = penalized_gradient(X, y, w, b, l2)
        num = np.empty(7)
        for j in range(6):
            e = np.zeros(6)
            e[j] = h
            num[j] = (penalized_loglik(X, y, w + e, b, l2) - penalized_loglik(X, y, w - e, b, l2)) / (2 * h)
        num[6] = (penalized_loglik(X, y, w, b + h, l2) - penalized_loglik(X, y, w, b - h, l2)) / (2 * h)
        ana = np.append(gw, gb)
        assert np.linalg.norm(ana - num) <= 1e-6 * max(np.linalg.norm(ana), 1.0)


def test_symmetric_data_gives_base_rate_intercept():
    X = np.array([-1.0] * 4 + [1.0] * 4)[:, None]
    y = np.array([1, 1, 1, 0, 1, 1, 1, 0], dtype=float)
    m = logreg_fit(X, y, l2=1.0)
    assert abs(m.weights[0]) < 1e-3
    assert m.intercept == pytest.approx(math.log(0.75 / 0.25), abs=1e-3)


def test_separable_training_accuracy():
    X, y = _separable(1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FilterConvergenceWarning)
        m = logreg_fit(X, y, l2=0.1)
    assert np.mean((predict_proba(m, X) >= 0.5) == (y == 1)) == 1.0


@pytest.mark.filterwarnings("ignore::grantnovelty.research_filter.FilterConvergenceWarning")
def test_loglik_non_decreasing_over_iterations():
    X, y = _separable(2, n=80)
    vals = [logreg_fit(X, y, l2=0.5, max_iter=k).loglik for k in range(1, 40)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_sparse_and_dense_fit_agree():
    X, y = _separable(3, n=60)
    X = np.abs(X)
    a = logreg_fit(X, y, l2=1.0)
    b = logreg_fit(sp.csr_matrix(X), y, l2=1.0)
    assert np.allclose(a.weights, b.weights, atol=1e-10)


def test_predict_proba_examples():
    zero = LogRegModel(np.zeros(3), 0.0, 1.0)
    assert predict_proba(zero, np.ones(3)) == 0.5
    big = LogRegModel(np.array([50.0]), 0.0, 1.0)
    assert predict_proba(big, np.array([1.0])) > 1 - 1e-9
    m = LogRegModel(np.array([0.7, -0.2]), 0.1, 1.0)
    xs = np.column_stack([np.linspace(-3, 3, 50), np.zeros(50)])
    assert np.all(np.diff(predict_proba(m, xs)) > 0)
    with pytest.raises(FilterError):
        predict_proba(m, np.ones(3))


def test_negated_model_complements():
    rng = np.random.default_rng(4)
    m = LogRegModel(rng.normal(size=4), 0.3, 1.0)
    X = rng.normal(size=(30, 4))
    assert np.allclose(predict_proba(m, X) + predict_proba(m.negated(), X), 1.0, atol=1e-12)
    X, y = _separable(5, n=60)
    fit, flipped = logreg_fit(X, y, l2=1.0), logreg_fit(X, 1 - y, l2=1.0)
    assert np.allclose(predict_proba(fit, X) + predict_proba(flipped, X), 1.0, atol=1e-6)


def test_fit_errors():
    with pytest.raises(SingleClassError):
        logreg_fit(np.ones((4, 2)), np.ones(4))
    with pytest.raises(FilterError):
        logreg_fit(np.ones((4, 2)), np.array([0, 1, 2, 0]))
    with pytest.raises(FilterError):
        logreg_fit(np.ones((4, 2)), np.array([0, 1]))


def test_uncertainty_order_tie_break():
    p = np.array([0.9, 0.5, 0.1, 0.5, 0.6])
    assert list(uncertainty_order(p)) == [1, 3, 4, 0, 2]


def _pool(seed=0, n=120):
    X, y = _separable(seed, n=n)
    ids = [f"g{i}" for i in range(n)]
    labels = {ids[i]: int(y[i]) for i in range(n)}
    seed_ids = [ids[int(np.flatnonzero(y == 1)[0])], ids[int(np.flatnonzero(y == 0)[0])]]
    return X, ids, labels, seed_ids


def test_single_round_labels_everything():
    X, ids, labels, seeds = _pool()
    pool = LabelPool.from_seed(X, ids, {g: labels[g] for g in seeds})
    model, pool = active_learning_loop(pool, table_oracle(labels), rounds=1, batch=len(ids))
    assert pool.unlabeled().size == 0
    assert {p for _, _, p in pool.label_rows()} == {"seed-list", "round-1"}


def test_loop_deterministic_and_notes_exhaustion():
    X, ids, labels, seeds = _pool(1, n=60)
    runs = []
    for _ in range(2):
        pool = LabelPool.from_seed(X, ids, {g: labels[g] for g in seeds})
        model, pool = active_learning_loop(pool, table_oracle(labels), rounds=5, batch=20)
        runs.append((pool.label_rows(), model.weights))
    assert runs[0][0] == runs[1][0] and np.array_equal(runs[0][1], runs[1][1])
    assert any("exhausted" in n for n in pool.notes)


def test_missing_labels_stop_loop_with_pending():
    X, ids, labels, seeds = _pool(2)
    partial = {g: labels[g] for g in seeds}
    pool = LabelPool.from_seed(X, ids, partial)
    model, pool = active_learning_loop(pool, table_oracle(partial), rounds=3, batch=5)
    assert len(pool.pending) == 5 and len(pool.labels) == 2
    assert isinstance(model, LogRegModel)


def test_loop_rejects_single_class_seed():
    X, ids, labels, _ = _pool()
    one = next(g for g in ids if labels[g] == 1)
    with pytest.raises(SingleClassError):
        active_learning_loop(LabelPool.from_seed(X, ids, {one: 1}), table_oracle(labels))


def test_oracle_failure_propagates():
    X, ids, labels, seeds = _pool()

    def broken(batch):
        raise RuntimeError("labeler offline")

    with pytest.raises(RuntimeError):
        active_learning_loop(LabelPool.from_seed(X, ids, {g: labels[g] for g in seeds}), broken)


def test_cv_separable_is_perfect():
    X, y = _separable(6, n=150)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FilterConvergenceWarning)
        res = cv_auc(X, y, folds=3, l2=0.1)
    assert res.mean == 1.0 and len(res.fold_aucs) == 3


def test_cv_shuffled_labels_null():
    hits = 0
    for seed in range(20):
        X, y = _separable(seed, n=150)
        y = np.random.default_rng([seed, 1]).permutation(y)
        hits += 0.4 <= cv_auc(X, y, folds=3, seed=seed).mean <= 0.6
    assert hits >= 18


def test_stratified_folds():
    y = np.array([1] * 7 + [0] * 20)
    folds = stratified_folds(y, 3, seed=0)
    assert sorted(np.concatenate(folds).tolist()) == list(range(27))
    for f in folds:
        assert 2 <= y[f].sum() <= 3
    with pytest.raises(FilterError):
        stratified_folds(np.array([1, 0, 0, 0]), 3)


def test_labels_file_round_trip(tmp_path):
    rows = [("g1", 1, "seed-list"), ("g2", 0, "round-3")]
    write_labels(rows, tmp_path / "labels.csv")
    assert read_labels(tmp_path / "labels.csv") == rows
    (tmp_path / "bare.csv").write_text("grant_id,label\ng9,1\n")
    assert read_labels(tmp_path / "bare.csv") == [("g9", 1, "seed-list")]
    (tmp_path / "bad.csv").write_text("grant_id,label\ng9,yes\n")
    with pytest.raises(FilterError):
        read_labels(tmp_path / "bad.csv")
    with pytest.raises(LabelsUnavailable):
        table_oracle({})(["g1"])
