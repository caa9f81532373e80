"""Analyses relating grant novelty to the impact of funded publications.

Every procedure takes a :class:`~grantnovelty.corpus.LinkedDataset` plus a
:class:`~grantnovelty.engine.NoveltyTable` (or the decile flags derived from
them) and returns a result object with ``to_dict()`` for the JSON report
and ``points()`` for the CSV of plotted values.

Conventions fixed here:

* A publication funded by several grants of one agency takes the maximum
  novelty among them (``rule="mean"`` averages instead); its covariates
  come from the grant carrying that maximum. It enters the regression once
  per agency.
* PI experience is 1 when any PI of the grant appears on a grant from an
  earlier fiscal year anywhere in the corpus.
* Top-decile flags use ``value >= threshold`` where the threshold is the
  ``ceil(q n)``-th largest value of the group, so ties at the threshold are
  all flagged.
"""
from __future__ import annotations

import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

import numpy as np

from .corpus import GrantRecord, LinkedDataset, PublicationRecord
from .stats import (
    RegressionResult,
    StatsError,
    TestResult,
    ols_fit,
    paired_ttest,
    pearson,
    two_sample_ttest,
)

TABLE1_NAMES = (
    "Intercept",
    "Novelty",
    "Years of Publication After 2010",
    "PI Experience",
    "SJR",
    "Award Amount (in millions of dollars)",
    "Number of PIs",
)


def pi_experience(grants: Iterable[GrantRecord]) -> dict[str, int]:
    """1 if any PI of the grant held a grant in an earlier fiscal year."""
    grants = list(grants)
    first_year: dict[str, int] = {}
    for g in grants:
        for pi in g.pi_ids:
            if pi not in first_year or g.fiscal_year < first_year[pi]:
                first_year[pi] = g.fiscal_year
    return {g.grant_id: int(any(first_year[pi] < g.fiscal_year for pi in g.pi_ids)) for g in grants}


def _sem(x: np.ndarray) -> float:
    return float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0


def _flag_count(n: int, q: float) -> int:
    return max(1, math.ceil(q * n - 1e-9))


def top_flags(values: dict[Hashable, float], groups: dict[Hashable, Hashable], q: float = 0.1):
    """Flag the top-``q`` share of ``values`` within each group.

    Returns ``(flags, tied_groups)`` where ``tied_groups`` lists groups of
    size > 1 whose values are all equal (everything flagged).
    """
    cells: dict[Hashable, list] = defaultdict(list)
    for key, val in values.items():
        cells[groups[key]].append((key, val))
    flags: dict[Hashable, bool] = {}
    tied = []
    for gkey in sorted(cells, key=repr):
        members = cells[gkey]
        vals = np.array([v for _, v in members], dtype=float)
        m = _flag_count(vals.size, q)
        threshold = np.sort(vals)[::-1][m - 1]
        if vals.size > 1 and vals.min() == vals.max():
            tied.append(gkey)
        for key, v in members:
            flags[key] = bool(v >= threshold)
    return flags, tied


@dataclass
class DecileFlags:
    q: float
    grant_top_novel: dict[str, bool]
    pub_top_cited: dict[str, bool]
    pub_top_sjr: dict[str, bool]
    warnings: list[str] = field(default_factory=list)


def flag_deciles(linked: LinkedDataset, novelty, q: float = 0.1, pooled_years: bool = False) -> DecileFlags:
    """Top-decile flags for grant novelty, publication citations and journal SJR.

    Novelty is ranked within (agency, division, year) cells, or within
    (agency, division) when ``pooled_years`` is set. Citations are ranked
    within (field, publication year) and SJR within field; publications
    missing the variable get no flag.
    """
    notes: list[str] = []
    scores = {r.grant_id: r.novelty_score for r in novelty.rows}
    ngroups = {
        r.grant_id: (r.agency, r.division) if pooled_years else (r.agency, r.division, r.year)
        for r in novelty.rows
    }
    top_novel, tied = top_flags(scores, ngroups, q)
    notes += [f"all novelty values tied in group {g}" for g in tied]

    pubs = list(linked.publications.values())
    cites = {p.pub_id: float(p.citations) for p in pubs if p.field is not None}
    cgroups = {p.pub_id: (p.field, p.pub_year) for p in pubs if p.field is not None}
    top_cited, tied = top_flags(cites, cgroups, q)
    notes += [f"all citation values tied in group {g}" for g in tied]

    sjr = {p.pub_id: p.sjr for p in pubs if p.sjr is not None and p.field is not None}
    sgroups = {pid: linked.publications[pid].field for pid in sjr}
    top_sjr, _ = top_flags(sjr, sgroups, q)

    for n in notes:
        warnings.warn(n, RuntimeWarning, stacklevel=2)
    return DecileFlags(q, top_novel, top_cited, top_sjr, notes)


def _pub_novel_flag(linked: LinkedDataset, flags: DecileFlags, pub: PublicationRecord, agency: str | None):
    vals = [
        flags.grant_top_novel[g.grant_id]
        for g in linked.linked_grants(pub)
        if g.grant_id in flags.grant_top_novel and (agency is None or g.agency == agency)
    ]
    if not vals:
        return None
    return any(vals)


def _agencies(linked: LinkedDataset, flags: DecileFlags) -> list[str]:
    return sorted({linked.grants[g].agency for g in flags.grant_top_novel if g in linked.grants})


# ---------------------------------------------------------------------------
# citation dynamics
# ---------------------------------------------------------------------------


@dataclass
class DynamicsCurve:
    agency: str
    horizons: list[int]
    p_novel: list[float]
    sem_novel: list[float]
    n_novel: list[int]
    p_other: list[float]
    sem_other: list[float]
    n_other: list[int]
    test: TestResult | None
    mode: str
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "agency": self.agency,
            "mode": self.mode,
            "test": None if self.test is None else self.test.to_dict(),
            "note": self.note,
            "curve": self.points(),
        }

    def points(self) -> list[dict]:
        return [
            {
                "agency": self.agency, "horizon": h,
                "p_top_novel": a, "sem_top_novel": sa, "n_top_novel": na,
                "p_other": b, "sem_other": sb, "n_other": nb,
            }
            for h, a, sa, na, b, sb, nb in zip(
                self.horizons, self.p_novel, self.sem_novel, self.n_novel,
                self.p_other, self.sem_other, self.n_other,
            )
        ]


def citation_dynamics(
    linked: LinkedDataset,
    flags: DecileFlags,
    horizons: Sequence[int] = tuple(range(9)),
    events: dict[str, dict[int, int]] | None = None,
    cumulative: bool = False,
) -> dict[str, DynamicsCurve]:
    """Share of top-cited publications for top-novel vs other grants, per horizon.

    With yearly citation events, horizon ``h`` ranks the citations each
    publication received in year ``pub_year + h`` (or up to that year when
    ``cumulative``) within (field, publication year), and the two curves are
    compared by a paired t-test across horizons. Without events only the
    total-citation flags are compared, as a single horizon.
    """
    out = {}
    for agency in _agencies(linked, flags):
        novel_of = {}
        for p in linked.publications.values():
            f = _pub_novel_flag(linked, flags, p, agency)
            if f is not None and p.field is not None:
                novel_of[p.pub_id] = f

        if events is None:
            warnings.warn("no yearly citation events; using cumulative citations only", RuntimeWarning, stacklevel=2)
            a = np.array([flags.pub_top_cited[p] for p in novel_of if novel_of[p] and p in flags.pub_top_cited], float)
            b = np.array([flags.pub_top_cited[p] for p in novel_of if not novel_of[p] and p in flags.pub_top_cited], float)
            out[agency] = DynamicsCurve(
                agency, [-1],
                [float(a.mean()) if a.size else math.nan], [_sem(a)], [int(a.size)],
                [float(b.mean()) if b.size else math.nan], [_sem(b)], [int(b.size)],
                None, "cumulative-only", "no yearly citation events supplied",
            )
            continue

        last_year = max((y for ev in events.values() for y in ev), default=None)
        hs, pn, sn, nn, po, so, no = [], [], [], [], [], [], []
        for h in horizons:
            vals, groups = {}, {}
            for pid in novel_of:
                p = linked.publications[pid]
                y = p.pub_year + h
                if last_year is None or y > last_year:
                    continue
                ev = events.get(pid)
                if ev is None:
                    continue
                if cumulative:
                    v = sum(c for yy, c in ev.items() if yy <= y)
                else:
                    v = ev.get(y, 0)
                vals[pid] = float(v)
                groups[pid] = (p.field, p.pub_year)
            if not vals:
                continue
            top, _ = top_flags(vals, groups, flags.q)
            a = np.array([top[p] for p in vals if novel_of[p]], float)
            b = np.array([top[p] for p in vals if not novel_of[p]], float)
            if a.size == 0 or b.size == 0:
                continue
            hs.append(int(h))
            pn.append(float(a.mean())); sn.append(_sem(a)); nn.append(int(a.size))
            po.append(float(b.mean())); so.append(_sem(b)); no.append(int(b.size))
        test, note = None, ""
        if len(hs) >= 2:
            try:
                test = paired_ttest(pn, po)
            except StatsError as exc:
                note = str(exc)
        else:
            note = "fewer than two horizons with both groups"
        mode = "cumulative" if cumulative else "annual"
        out[agency] = DynamicsCurve(agency, hs, pn, sn, nn, po, so, no, test, mode, note)
    return out


# ---------------------------------------------------------------------------
# citation regression
# ---------------------------------------------------------------------------


@dataclass
class RegressionRow:
    pub_id: str
    agency: str
    citations: float
    novelty: float
    years_after_2010: float
    pi_experience: float
    sjr: float
    award: float
    n_pis: float


def regression_rows(linked: LinkedDataset, novelty, rule: str = "max") -> tuple[list[RegressionRow], dict]:
    """One design row per (publication, agency) with a scored grant and SJR."""
    if rule not in ("max", "mean"):
        raise ValueError("rule must be 'max' or 'mean'")
    scores = novelty.scores()
    exp = pi_experience(linked.grants.values())
    rows: list[RegressionRow] = []
    skipped = defaultdict(int)
    for p in linked.publications.values():
        by_agency: dict[str, list[GrantRecord]] = defaultdict(list)
        for g in linked.linked_grants(p):
            if g.grant_id in scores:
                by_agency[g.agency].append(g)
            else:
                skipped["unscored_grant_links"] += 1
        if not by_agency:
            skipped["publications_without_scored_grant"] += 1
            continue
        if p.sjr is None:
            skipped["publications_missing_sjr"] += 1
            continue
        for agency in sorted(by_agency):
            gs = by_agency[agency]
            owner = max(gs, key=lambda g: scores[g.grant_id])
            if rule == "max":
                nov = scores[owner.grant_id]
                award, npi, pie = owner.award_amount, len(owner.pi_ids), exp[owner.grant_id]
            else:
                nov = float(np.mean([scores[g.grant_id] for g in gs]))
                award = float(np.mean([g.award_amount for g in gs]))
                npi = float(np.mean([len(g.pi_ids) for g in gs]))
                pie = float(np.mean([exp[g.grant_id] for g in gs]))
            rows.append(RegressionRow(
                p.pub_id, agency, float(p.citations), nov, float(p.pub_year - 2010),
                float(pie), float(p.sjr), float(award), float(npi),
            ))
    return rows, dict(skipped)


def table1_regression(linked: LinkedDataset, novelty, rule: str = "max", min_rows: int = 10) -> dict[str, RegressionResult]:
    """Per-agency OLS of citations on novelty and the five controls."""
    rows, skipped = regression_rows(linked, novelty, rule)
    out = {}
    for agency in sorted({r.agency for r in rows}):
        sub = [r for r in rows if r.agency == agency]
        if len(sub) < min_rows:
            continue
        X = np.array(
            [[1.0, r.novelty, r.years_after_2010, r.pi_experience, r.sjr, r.award, r.n_pis] for r in sub]
        )
        y = np.array([r.citations for r in sub])
        res = ols_fit(y, X, TABLE1_NAMES)
        res.meta = {
            "agency": agency,
            "unit": "publication x agency",
            "multi_grant_rule": rule,
            "pi_experience": "any PI on an earlier-fiscal-year grant in the corpus",
            "excluded": skipped,
        }
        out[agency] = res
    return out


@dataclass
class MarginalCurve:
    grid: np.ndarray
    prediction: np.ndarray
    se: np.ndarray

    def points(self) -> list[dict]:
        return [{"novelty": float(g), "prediction": float(p), "se": float(s)} for g, p, s in zip(self.grid, self.prediction, self.se)]


def marginal_effect_curve(
    result: RegressionResult,
    grid: Sequence[float] | None = None,
    covariate_means: Sequence[float] | None = None,
    name: str = "Novelty",
) -> MarginalCurve:
    """Predicted outcome as ``name`` sweeps ``grid`` with other regressors at their means.

    Pointwise standard errors are ``sqrt(x' Cov x)`` of the linear predictor.
    """
    grid = np.linspace(0.0, 1.0, 21) if grid is None else np.asarray(grid, dtype=float)
    base = np.array(result.x_means if covariate_means is None else covariate_means, dtype=float)
    j = result.names.index(name)
    Xg = np.repeat(base[None, :], grid.size, axis=0)
    Xg[:, j] = grid
    pred = Xg @ result.coef
    se = np.sqrt(np.maximum(0.0, np.einsum("ij,jk,ik->i", Xg, result.cov, Xg)))
    return MarginalCurve(grid, pred, se)


# ---------------------------------------------------------------------------
# programs, prestige, productivity, trend
# ---------------------------------------------------------------------------


@dataclass
class ProgramComparison:
    programs: list[dict]
    correlation: TestResult | None
    correlation_error: str | None
    pairs: list[dict]
    excluded: list[str]

    def to_dict(self) -> dict:
        return {
            "programs": self.programs,
            "correlation": None if self.correlation is None else self.correlation.to_dict(),
            "correlation_error": self.correlation_error,
            "pairs": self.pairs,
            "excluded": self.excluded,
        }

    def points(self) -> list[dict]:
        return self.programs


def program_key(g: GrantRecord) -> str:
    return f"{g.agency}:{g.program}"


def program_comparison(
    linked: LinkedDataset,
    novelty,
    flags: DecileFlags,
    pairs: Sequence[tuple[str, str]] = (("NIH:R01", "NSF:STANDARD"),),
) -> ProgramComparison:
    """Per-program P(top-novel) and P(top-cited), their correlation, and named pair tests."""
    by_prog: dict[str, list[str]] = defaultdict(list)
    for r in novelty.rows:
        g = linked.grants.get(r.grant_id)
        if g is not None and r.grant_id in flags.grant_top_novel:
            by_prog[program_key(g)].append(r.grant_id)

    novel_ind: dict[str, np.ndarray] = {}
    cited_ind: dict[str, np.ndarray] = {}
    summary, excluded = [], []
    for prog in sorted(by_prog):
        gids = by_prog[prog]
        if len(gids) < 2:
            excluded.append(f"{prog}: fewer than 2 grants")
            continue
        nv = np.array([flags.grant_top_novel[g] for g in gids], float)
        pids = list(dict.fromkeys(p for g in gids for p in linked.index.get(g, ())))
        ct = np.array([flags.pub_top_cited[p] for p in pids if p in flags.pub_top_cited], float)
        novel_ind[prog], cited_ind[prog] = nv, ct
        summary.append({
            "program": prog,
            "n_grants": int(nv.size),
            "p_top_novel": float(nv.mean()),
            "sem_top_novel": _sem(nv),
            "n_publications": int(ct.size),
            "p_top_cited": float(ct.mean()) if ct.size else math.nan,
            "sem_top_cited": _sem(ct),
        })

    corr, err = None, None
    usable = [s for s in summary if not math.isnan(s["p_top_cited"])]
    try:
        corr = pearson([s["p_top_novel"] for s in usable], [s["p_top_cited"] for s in usable])
    except StatsError as exc:
        err = str(exc)

    pair_out = []
    for a, b in pairs:
        if a not in novel_ind or b not in novel_ind:
            continue
        entry: dict = {"a": a, "b": b}
        for label, table in (("top_novel", novel_ind), ("top_cited", cited_ind)):
            try:
                t = two_sample_ttest(table[a], table[b])
                entry[label] = t.to_dict()
            except StatsError as exc:
                entry[label] = {"error": str(exc)}
        pair_out.append(entry)
    return ProgramComparison(summary, corr, err, pair_out, excluded)


@dataclass
class GroupComparison:
    """Paired comparison of top-novel vs other grants across matched cells."""

    agency: str
    cells: list[dict]
    mean_difference: float
    test: TestResult | None
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "agency": self.agency,
            "mean_difference": self.mean_difference,
            "test": None if self.test is None else self.test.to_dict(),
            "n_cells": len(self.cells),
            "note": self.note,
            "cells": self.cells,
        }

    def points(self) -> list[dict]:
        return [{"agency": self.agency, **c} for c in self.cells]


def _paired_cells(agency: str, cells: list[dict], a_key: str, b_key: str) -> GroupComparison:
    a = [c[a_key] for c in cells]
    b = [c[b_key] for c in cells]
    test, note = None, ""
    if len(cells) >= 2:
        try:
            test = paired_ttest(a, b)
        except StatsError as exc:
            note = str(exc)
    else:
        note = "fewer than two cells with both groups"
    diff = float(np.mean(np.subtract(a, b))) if cells else math.nan
    return GroupComparison(agency, cells, diff, test, note)


def prestige_comparison(linked: LinkedDataset, flags: DecileFlags) -> dict[str, GroupComparison]:
    """Top-SJR share of publications from top-novel vs other grants, paired across divisions."""
    out = {}
    for agency in _agencies(linked, flags):
        acc: dict[str, dict[bool, list[float]]] = defaultdict(lambda: {True: [], False: []})
        for gid, is_top in flags.grant_top_novel.items():
            g = linked.grants.get(gid)
            if g is None or g.agency != agency:
                continue
            for pid in linked.index.get(gid, ()):
                if pid in flags.pub_top_sjr:
                    acc[g.division][is_top].append(float(flags.pub_top_sjr[pid]))
        cells = []
        for div in sorted(acc):
            top, rest = acc[div][True], acc[div][False]
            if top and rest:
                cells.append({
                    "division": div,
                    "share_top_novel": float(np.mean(top)), "n_top_novel": len(top),
                    "share_other": float(np.mean(rest)), "n_other": len(rest),
                })
        out[agency] = _paired_cells(agency, cells, "share_top_novel", "share_other")
    return out


def productivity_comparison(linked: LinkedDataset, flags: DecileFlags) -> dict[str, GroupComparison]:
    """Mean publications per grant, top-novel vs other, paired across (length, division) cells."""
    out = {}
    for agency in _agencies(linked, flags):
        acc: dict[tuple, dict[bool, list[int]]] = defaultdict(lambda: {True: [], False: []})
        for gid, is_top in flags.grant_top_novel.items():
            g = linked.grants.get(gid)
            if g is None or g.agency != agency:
                continue
            acc[(g.length_years, g.division)][is_top].append(len(linked.index.get(gid, ())))
        cells = []
        for (length, div) in sorted(acc):
            top, rest = acc[(length, div)][True], acc[(length, div)][False]
            if top and rest:
                cells.append({
                    "length_years": length, "division": div,
                    "mean_pubs_top_novel": float(np.mean(top)), "n_top_novel": len(top),
                    "mean_pubs_other": float(np.mean(rest)), "n_other": len(rest),
                })
        out[agency] = _paired_cells(agency, cells, "mean_pubs_top_novel", "mean_pubs_other")
    return out


def novelty_trend(novelty) -> dict[str, TestResult | str]:
    """Pearson correlation of novelty score with award year, per agency.

    Agencies where the correlation is undefined map to the error message.
    """
    by_agency: dict[str, list] = defaultdict(list)
    for r in novelty.rows:
        by_agency[r.agency].append((r.year, r.novelty_score))
    out: dict[str, TestResult | str] = {}
    for agency in sorted(by_agency):
        years, scores = zip(*by_agency[agency])
        try:
            out[agency] = pearson(years, scores)
        except StatsError as exc:
            out[agency] = str(exc)
    return out
