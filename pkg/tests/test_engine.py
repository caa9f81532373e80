import dataclasses
import warnings

import numpy as np
import pytest

from grantnovelty.engine import (
    ConfigError,
    EngineConfig,
    InsufficientHistoryError,
    NoveltyRow,
    NoveltyTable,
    UnknownProbeError,
    clone_probe,
    minmax_table,
    parse_year_range,
    score_all,
    score_year,
    window_grants,
    grant_document,
    sensitivity_grid,
    write_sensitivity,
)
from grantnovelty.stats import roc_auc
from grantnovelty.studies import table1_regression
from grantnovelty.synthkit import SynthSpec, generate

FAST = EngineConfig(topics=10, seed=1)


def _row(gid, raw):
    return NoveltyRow(gid, "NSF", "P", "D", 2011, raw, 0.0)


@pytest.fixture(scope="module")
def table(small_corpus):
    return score_all(small_corpus.grants, FAST)


def test_minmax_arithmetic():
    t = minmax_table([_row("a", -2.0), _row("b", 0.0), _row("c", 2.0)])
    assert [r.novelty_score for r in t.rows] == [0.0, 0.5, 1.0]


def test_degenerate_pool_warns():
    with pytest.warns(RuntimeWarning):
        t = minmax_table([_row("a", 0.3), _row("b", 0.3)])
    assert t.degenerate and [r.novelty_score for r in t.rows] == [0.0, 0.0]


def test_config_validation_and_mapping():
    with pytest.raises(ConfigError):
        EngineConfig(window_years=0)
    with pytest.raises(ConfigError):
        EngineConfig(gamma_scale=0)
    cfg = EngineConfig.from_mapping({"WS": 3, "tn": 20, "nu": 0.1, "years": "2011..2013", "agency": "nsf,nih"})
    assert (cfg.window_years, cfg.topics, cfg.nu, cfg.year_start, cfg.year_end) == (3, 20, 0.1, 2011, 2013)
    assert cfg.agencies == ("NSF", "NIH")
    with pytest.raises(ConfigError):
        EngineConfig.from_mapping({"bogus": 1})
    assert parse_year_range("2012") == (2012, 2012)


def test_table_scaling_and_ranking(table, small_corpus):
    scores = np.array([r.novelty_score for r in table.rows])
    raws = np.array([r.raw_distance for r in table.rows])
    assert scores.min() == 0.0 and scores.max() == 1.0
    assert np.array_equal(np.argsort(scores, kind="stable"), np.argsort(raws, kind="stable"))
    # first year of each agency has no history
    assert {(a, y) for a, y, _ in table.skipped} == {("NSF", 2010), ("NIH", 2010)}
    assert {r.year for r in table.rows} == {2011, 2012}


def test_planted_documents_rank_high(table, small_corpus):
    planted = small_corpus.planted_ids()
    auc = roc_auc([r.novelty_score for r in table.rows], [r.grant_id in planted for r in table.rows])
    # small corpus and 10 topics; the full-size check is in the acceptance suite
    assert auc >= 0.85


def test_score_all_deterministic_and_parallel(table, small_corpus):
    again = score_all(small_corpus.grants, FAST)
    assert again.rows == table.rows
    par = score_all(small_corpus.grants, FAST, jobs=2)
    assert par.rows == table.rows


def test_csv_round_trip(table, tmp_path):
    table.write_csv(tmp_path / "novelty.csv")
    back = NoveltyTable.read_csv(tmp_path / "novelty.csv")
    assert back.rows == table.rows


def _twins(corpus, config, year=2012):
    """Current-year copies of the past-window incumbents, scored one at a time."""
    from grantnovelty.detector import raw_novelty
    from grantnovelty.factorize import nmf_transform
    from grantnovelty.textpipe import tfidf_transform_many

    res = score_year(corpus.grants, "NSF", year, config, keep_models=True)
    past, _ = window_grants(corpus.grants, "NSF", year, config.window_years)
    past = [g for g in past if g.grant_id not in corpus.planted_ids()]
    m = res.models
    loads = nmf_transform(m.topics, tfidf_transform_many(m.tfidf, [grant_document(g) for g in past]))
    return res, past, raw_novelty(m.svm, loads)


def test_twin_gets_its_past_copy_distance(small_corpus):
    grants = list(small_corpus.grants)
    res, past, train_raw = _twins(small_corpus, FAST)
    for i in (0, 17, 90):
        twin = dataclasses.replace(past[i], grant_id="TWIN", fiscal_year=2012, start_year=2012)
        out = score_year(grants + [twin], "NSF", 2012, FAST)
        raw = dict(zip(out.grant_ids, out.raw))
        assert raw["TWIN"] == pytest.approx(train_raw[i], abs=1e-12)


@pytest.fixture(scope="module")
def mid_corpus():
    return generate(SynthSpec(seed=0, years=(2010, 2012), grants_per_year=500))


def test_twins_typical_with_local_kernel(mid_corpus):
    res, _, train_raw = _twins(mid_corpus, EngineConfig(gamma_scale=16.0))
    assert np.mean(train_raw <= np.percentile(res.raw, 5)) >= 0.95


@pytest.mark.xfail(strict=True, reason="in-sample past loads spread wider than projected current loads")
def test_twins_typical_with_default_kernel(mid_corpus):
    res, _, train_raw = _twins(mid_corpus, EngineConfig())
    assert np.mean(train_raw <= np.percentile(res.raw, 5)) >= 0.95


def test_identical_current_grants_identical_raw(small_corpus):
    grants = list(small_corpus.grants)
    g = next(g for g in grants if g.agency == "NIH" and g.fiscal_year == 2012)
    copy = dataclasses.replace(g, grant_id="COPY")
    res = score_year(grants + [copy], "NIH", 2012, FAST)
    raw = dict(zip(res.grant_ids, res.raw))
    assert raw["COPY"] == raw[g.grant_id]


def test_empty_year_and_insufficient_history(small_corpus):
    res = score_year(small_corpus.grants, "NSF", 2015, FAST)
    assert res.grant_ids == [] and res.skipped is None
    res = score_year(small_corpus.grants, "NSF", 2011, dataclasses.replace(FAST, min_history=1000))
    assert res.skipped and "insufficient history" in res.skipped


def test_window_causality(small_corpus):
    grants = list(small_corpus.grants)
    base = score_year(grants, "NSF", 2011, FAST)
    changed = [
        dataclasses.replace(g, summary="entirely different words here") if g.fiscal_year >= 2012 else g
        for g in grants
    ]
    assert score_year(changed, "NSF", 2011, FAST).raw == base.raw


def test_clone_probe_identity_and_errors(small_corpus, table):
    probe = max((r for r in table.rows if r.year == 2012 and r.agency == "NSF"), key=lambda r: r.novelty_score)
    curve = clone_probe(small_corpus.grants, probe.grant_id, [0.0, 0.02], FAST, base_table=table)
    assert curve[0].novelty_score == probe.novelty_score
    assert curve[0].raw_distance == probe.raw_distance
    assert curve[1].n_replaced == round(0.02 * 300)
    assert 0.0 <= curve[1].novelty_score <= 1.0
    with pytest.raises(UnknownProbeError):
        clone_probe(small_corpus.grants, "nope", [0.0], FAST, base_table=table)
    with pytest.raises(ValueError):
        clone_probe(small_corpus.grants, probe.grant_id, [1.0], FAST, base_table=table)
    first_year = next(g.grant_id for g in small_corpus.grants if g.fiscal_year == 2010)
    with pytest.raises(InsufficientHistoryError):
        clone_probe(small_corpus.grants, first_year, [0.0], FAST, base_table=table)


def test_clone_probe_f0_without_base_table(small_corpus, table):
    probe = table.rows[5]
    curve = clone_probe(small_corpus.grants, probe.grant_id, [0.0], FAST)
    assert curve[0].novelty_score == probe.novelty_score


def test_sensitivity_grid_structure(small_corpus, small_linked, table, tmp_path):
    grid = [(0.05, 10, 2), (0.1, 8, 1)]
    rows = sensitivity_grid(small_corpus.grants, small_linked, grid, FAST)
    assert [(r["nu"], r["TN"], r["WS"]) for r in rows] == grid
    assert rows[0]["label"] == "nu = 0.05 TN = 10 WS = 2"
    direct = table1_regression(small_linked, table)
    assert rows[0]["NSF_novelty_coefficient"] == direct["NSF"].row("Novelty")["estimate"]
    write_sensitivity(rows, tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().startswith("label,nu,TN,WS")
    with pytest.raises(ValueError):
        sensitivity_grid(small_corpus.grants, small_linked, [], FAST)


def test_gamma_scale_changes_kernel():
    loads = np.random.default_rng(0).uniform(size=(30, 4))
    base = EngineConfig().kernel_for(loads)
    scaled = EngineConfig(gamma_scale=4.0).kernel_for(loads)
    assert base.gamma is None
    assert scaled.gamma > 0
    assert EngineConfig(gamma=0.5, gamma_scale=4.0).kernel_for(loads).gamma == 0.5
