"""Windowed novelty scoring.

For every (agency, year) the tf-idf vocabulary, the topic model and the
one-class SVM are fitted on that agency's grants from the preceding
``window_years`` years only. Current-year grants are then projected with
the frozen models and scored by their raw distance past the learned
boundary. Raw distances from all (agency, year) cells are pooled and
min-max scaled once, so 1 marks the most novel grant overall and 0 the most
incremental one.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .corpus import GrantRecord
from .detector import KernelSpec, OcSvmModel, default_gamma, ocsvm_fit, raw_novelty
from .factorize import TopicModel, nmf_fit, nmf_transform
from .textpipe import TfIdfModel, build_vocabulary, term_counts, tfidf_fit_transform, tfidf_transform_many, tokenize

log = logging.getLogger(__name__)

# (nu, topics, window_years) rows of the published sensitivity table
TABLE2_GRID: tuple[tuple[float, int, int], ...] = (
    (0.01, 50, 2),
    (0.1, 50, 2),
    (0.05, 100, 2),
    (0.05, 50, 3),
    (0.05, 50, 1),
)

_CONFIG_ALIASES = {
    "ws": "window_years",
    "window": "window_years",
    "tn": "topics",
    "k": "topics",
    "kernel": "kernel_kind",
    "agency": "agencies",
}


class ConfigError(ValueError):
    pass


class UnknownProbeError(KeyError):
    pass


class InsufficientHistoryError(ValueError):
    pass


@dataclass(frozen=True)
class EngineConfig:
    window_years: int = 2
    topics: int = 50
    nu: float = 0.05
    kernel_kind: str = "rbf"
    gamma: float | None = None
    gamma_scale: float = 1.0
    min_df: int = 2
    max_df_ratio: float = 0.95
    normalize: bool = True
    min_token_len: int = 2
    seed: int = 0
    year_start: int | None = None
    year_end: int | None = None
    agencies: tuple[str, ...] | None = None
    min_history: int = 100
    nmf_max_iter: int = 300
    nmf_tol: float = 1e-4
    transform_max_iter: int = 1000
    transform_tol: float = 1e-6
    svm_tol: float = 1e-4
    svm_max_iter: int = 10_000_000

    def __post_init__(self):
        if self.window_years < 1:
            raise ConfigError("window_years must be >= 1")
        if self.topics < 1:
            raise ConfigError("topics must be >= 1")
        if not 0.0 < self.nu <= 1.0:
            raise ConfigError("nu must lie in (0, 1]")
        if self.min_df < 1 or not 0.0 < self.max_df_ratio <= 1.0:
            raise ConfigError("invalid tf-idf thresholds")
        if self.kernel_kind not in ("rbf", "linear"):
            raise ConfigError(f"unknown kernel {self.kernel_kind!r}")
        if self.gamma is not None and not self.gamma > 0:
            raise ConfigError("gamma must be positive")
        if not self.gamma_scale > 0:
            raise ConfigError("gamma_scale must be positive")
        if self.min_history < 1:
            raise ConfigError("min_history must be >= 1")

    @property
    def kernel(self) -> KernelSpec:
        return KernelSpec(self.kernel_kind, self.gamma)

    def kernel_for(self, loads: np.ndarray) -> KernelSpec:
        """Kernel for one window; ``gamma_scale`` multiplies the data-driven default."""
        if self.kernel_kind != "rbf" or self.gamma is not None or self.gamma_scale == 1.0:
            return self.kernel
        return KernelSpec("rbf", self.gamma_scale * default_gamma(loads))

    @classmethod
    def from_mapping(cls, values: dict) -> "EngineConfig":
        known = {f for f in cls.__dataclass_fields__}
        kwargs = {}
        for key, val in values.items():
            name = _CONFIG_ALIASES.get(str(key).lower(), str(key).lower())
            if name == "years":
                a, b = parse_year_range(str(val))
                kwargs["year_start"], kwargs["year_end"] = a, b
                continue
            if name not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[name] = val
        if "agencies" in kwargs and kwargs["agencies"] is not None:
            ag = kwargs["agencies"]
            if isinstance(ag, str):
                ag = [] if ag.lower() == "all" else [a.strip() for a in ag.split(",") if a.strip()]
            kwargs["agencies"] = tuple(a.upper() for a in ag) or None
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["agencies"] = list(self.agencies) if self.agencies else None
        return d


def parse_year_range(text: str) -> tuple[int, int]:
    """``"2009..2012"`` -> (2009, 2012); a single year maps to itself."""
    parts = text.split("..")
    try:
        if len(parts) == 1:
            y = int(parts[0])
            return y, y
        if len(parts) == 2:
            return int(parts[0]), int(parts[1])
    except ValueError:
        pass
    raise ConfigError(f"bad year range {text!r}; expected A..B")


def derive_seed(seed: int, agency: str, year: int) -> int:
    ss = np.random.SeedSequence([seed, zlib.crc32(agency.encode("utf-8")), year])
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# per-window scoring
# ---------------------------------------------------------------------------


@dataclass
class WindowModels:
    tfidf: TfIdfModel
    topics: TopicModel
    svm: OcSvmModel


@dataclass
class YearResult:
    agency: str
    year: int
    grant_ids: list[str] = field(default_factory=list)
    raw: list[float] = field(default_factory=list)
    n_past: int = 0
    skipped: str | None = None
    converged: bool = True
    models: WindowModels | None = None


def grant_document(grant: GrantRecord, min_token_len: int = 2) -> dict[str, float]:
    return term_counts(tokenize(grant.summary, min_token_len))


def _doc_key(doc: dict[str, float]) -> tuple:
    return tuple(sorted(doc.items()))


def score_window(past_docs: Sequence[dict], current_docs: Sequence[dict], config: EngineConfig, seed: int):
    """Fit the text, topic and boundary models on ``past_docs``; score ``current_docs``.

    Identical current documents are projected once, so they always receive
    bit-identical distances. Returns ``(raw distances, WindowModels)``.
    """
    vocab = build_vocabulary(past_docs, config.min_df, config.max_df_ratio)
    tfidf, V = tfidf_fit_transform(past_docs, vocab, normalize=config.normalize)
    k = config.topics
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        _, topics = nmf_fit(V, k=k, seed=seed, max_iter=config.nmf_max_iter, tol=config.nmf_tol)
    past_loads = nmf_transform(topics, V, config.transform_max_iter, config.transform_tol)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        svm = ocsvm_fit(past_loads, config.nu, config.kernel_for(past_loads), config.svm_tol, config.svm_max_iter)
    models = WindowModels(tfidf, topics, svm)
    if not current_docs:
        return np.zeros(0), models

    keys: dict[tuple, int] = {}
    slot = []
    unique_docs = []
    for d in current_docs:
        key = _doc_key(d)
        if key not in keys:
            keys[key] = len(unique_docs)
            unique_docs.append(d)
        slot.append(keys[key])
    Vc = tfidf_transform_many(tfidf, unique_docs)
    loads = nmf_transform(topics, Vc, config.transform_max_iter, config.transform_tol)
    raw = np.atleast_1d(raw_novelty(svm, loads))
    return raw[np.asarray(slot)], models


def window_grants(grants: Iterable[GrantRecord], agency: str, year: int, window_years: int):
    past, current = [], []
    for g in grants:
        if g.agency != agency or g.excluded:
            continue
        if year - window_years <= g.fiscal_year <= year - 1:
            past.append(g)
        elif g.fiscal_year == year:
            current.append(g)
    return past, current


def score_year(grants, agency: str, year: int, config: EngineConfig, keep_models: bool = False) -> YearResult:
    """Raw novelty distances for ``agency``'s grants awarded in ``year``.

    Years whose past window holds fewer than ``config.min_history`` grants
    are skipped and reported through ``YearResult.skipped``.
    """
    past, current = window_grants(grants, agency, year, config.window_years)
    res = YearResult(agency=agency, year=year, n_past=len(past))
    if not current:
        return res
    if len(past) < config.min_history:
        res.skipped = f"insufficient history: {len(past)} past grants < {config.min_history}"
        return res
    n = config.min_token_len
    raw, models = score_window(
        [grant_document(g, n) for g in past],
        [grant_document(g, n) for g in current],
        config,
        derive_seed(config.seed, agency, year),
    )
    res.grant_ids = [g.grant_id for g in current]
    res.raw = [float(x) for x in raw]
    res.converged = models.svm.converged
    if keep_models:
        res.models = models
    return res


# ---------------------------------------------------------------------------
# pooled table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoveltyRow:
    grant_id: str
    agency: str
    program: str
    division: str
    year: int
    raw_distance: float
    novelty_score: float


NOVELTY_COLUMNS = ("grant_id", "agency", "program", "division", "year", "raw_distance", "novelty_score")


@dataclass
class NoveltyTable:
    rows: list[NoveltyRow]
    raw_min: float
    raw_max: float
    skipped: list[tuple[str, int, str]] = field(default_factory=list)
    nonconverged: list[tuple[str, int]] = field(default_factory=list)
    degenerate: bool = False

    def __len__(self) -> int:
        return len(self.rows)

    def scores(self) -> dict[str, float]:
        return {r.grant_id: r.novelty_score for r in self.rows}

    def scale(self, raw: float, clip: bool = False) -> float:
        if self.degenerate or not self.raw_max > self.raw_min:
            return 0.0
        s = (raw - self.raw_min) / (self.raw_max - self.raw_min)
        return min(1.0, max(0.0, s)) if clip else s

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(NOVELTY_COLUMNS)
            for r in self.rows:
                w.writerow([r.grant_id, r.agency, r.program, r.division, r.year, repr(r.raw_distance), repr(r.novelty_score)])

    @classmethod
    def read_csv(cls, path) -> "NoveltyTable":
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                rows.append(NoveltyRow(
                    rec["grant_id"], rec["agency"], rec["program"], rec["division"], int(rec["year"]),
                    float(rec["raw_distance"]), float(rec["novelty_score"]),
                ))
        raws = [r.raw_distance for r in rows]
        lo, hi = (min(raws), max(raws)) if raws else (0.0, 0.0)
        return cls(rows=rows, raw_min=lo, raw_max=hi, degenerate=not hi > lo)

    @classmethod
    def from_scores(cls, grants: Iterable[GrantRecord], scores: dict[str, float]) -> "NoveltyTable":
        """Table whose raw distances are the given scores (used for ground-truth runs)."""
        rows = [
            NoveltyRow(g.grant_id, g.agency, g.program, g.division, g.fiscal_year, float(scores[g.grant_id]), float(scores[g.grant_id]))
            for g in grants
            if g.grant_id in scores
        ]
        return minmax_table(rows)


def minmax_table(rows: list[NoveltyRow], skipped=None, nonconverged=None) -> NoveltyTable:
    """Scale pooled raw distances to [0, 1]; an all-equal pool maps to zeros."""
    raws = np.array([r.raw_distance for r in rows], dtype=float)
    if raws.size == 0:
        return NoveltyTable([], 0.0, 0.0, skipped or [], nonconverged or [], degenerate=True)
    lo, hi = float(raws.min()), float(raws.max())
    degenerate = not hi > lo
    if degenerate:
        warnings.warn("all raw novelty distances are equal; scores set to 0", RuntimeWarning, stacklevel=2)
        scaled = np.zeros_like(raws)
    else:
        scaled = (raws - lo) / (hi - lo)
    out = [replace(r, novelty_score=float(s)) for r, s in zip(rows, scaled)]
    return NoveltyTable(out, lo, hi, skipped or [], nonconverged or [], degenerate)


def _year_range(grants: Sequence[GrantRecord], agency: str, config: EngineConfig) -> range:
    years = [g.fiscal_year for g in grants if g.agency == agency]
    if not years:
        return range(0)
    lo = config.year_start if config.year_start is not None else min(years)
    hi = config.year_end if config.year_end is not None else max(years)
    return range(lo, hi + 1)


def _score_job(args):
    grants, agency, year, config = args
    return score_year(grants, agency, year, config)


def score_all(grants: Sequence[GrantRecord], config: EngineConfig, jobs: int = 1) -> NoveltyTable:
    """Score every (agency, year) cell and min-max scale the pooled distances."""
    grants = list(grants)
    agencies = list(config.agencies) if config.agencies else sorted({g.agency for g in grants})
    tasks = []
    for agency in agencies:
        for year in _year_range(grants, agency, config):
            past_lo = year - config.window_years
            subset = [g for g in grants if g.agency == agency and past_lo <= g.fiscal_year <= year]
            tasks.append((subset, agency, year, config))

    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_score_job, tasks))
    else:
        results = [_score_job(t) for t in tasks]

    by_id = {g.grant_id: g for g in grants}
    rows: list[NoveltyRow] = []
    skipped, nonconv = [], []
    for res in results:
        if res.skipped:
            skipped.append((res.agency, res.year, res.skipped))
            log.info("skipped %s %d: %s", res.agency, res.year, res.skipped)
            continue
        if not res.converged:
            nonconv.append((res.agency, res.year))
        for gid, raw in zip(res.grant_ids, res.raw):
            g = by_id[gid]
            rows.append(NoveltyRow(gid, g.agency, g.program, g.division, g.fiscal_year, raw, 0.0))
    return minmax_table(rows, skipped, nonconv)


# ---------------------------------------------------------------------------
# robustness harnesses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbePoint:
    fraction: float
    n_replaced: int
    raw_distance: float
    novelty_score: float


def noisy_clone(doc: dict[str, float], sigma: float, rng: np.random.Generator) -> dict[str, float]:
    """Copy of a term-count vector with Gaussian noise on its own terms, clipped at 0."""
    terms = sorted(doc)
    counts = np.array([doc[t] for t in terms], dtype=float)
    noisy = np.maximum(0.0, counts + rng.normal(0.0, sigma, size=counts.size))
    return {t: float(c) for t, c in zip(terms, noisy) if c > 0}


def clone_probe(
    grants: Sequence[GrantRecord],
    probe_id: str,
    clone_fractions: Sequence[float],
    config: EngineConfig,
    noise_sigma: float | None = None,
    base_table: NoveltyTable | None = None,
) -> list[ProbePoint]:
    """Probe score as a growing share of the past window is replaced by noisy copies.

    The replaced grants are a prefix of one seeded permutation, so larger
    fractions replace supersets of smaller ones. Scores reuse the scaling of
    the unmodified pool and are clipped to [0, 1]; ``raw_distance`` keeps the
    unclipped value.
    """
    grants = list(grants)
    probe = next((g for g in grants if g.grant_id == probe_id), None)
    if probe is None:
        raise UnknownProbeError(probe_id)
    if base_table is None:
        base_table = score_all(grants, config)
    agency, year = probe.agency, probe.fiscal_year
    past, current = window_grants(grants, agency, year, config.window_years)
    if len(past) < config.min_history:
        raise InsufficientHistoryError(f"probe year {year} has {len(past)} past grants")

    n = config.min_token_len
    past_docs = [grant_document(g, n) for g in past]
    current_docs = [grant_document(g, n) for g in current]
    probe_pos = [g.grant_id for g in current].index(probe_id)
    probe_doc = current_docs[probe_pos]
    if noise_sigma is None:
        noise_sigma = 0.1 * float(np.mean(list(probe_doc.values()))) if probe_doc else 0.0

    rng = np.random.default_rng([config.seed, zlib.crc32(probe_id.encode("utf-8")), 0x5EED])
    order = rng.permutation(len(past_docs))
    seed = derive_seed(config.seed, agency, year)
    base_raw = {r.grant_id: r.raw_distance for r in base_table.rows}
    out = []
    for f in clone_fractions:
        if not 0.0 <= f < 1.0:
            raise ValueError(f"clone fraction {f} outside [0, 1)")
        n_rep = int(round(f * len(past_docs)))
        if n_rep == 0 and probe_id in base_raw:
            r = base_raw[probe_id]
            out.append(ProbePoint(float(f), 0, r, base_table.scale(r, clip=True)))
            continue
        docs = list(past_docs)
        crng = np.random.default_rng([config.seed, zlib.crc32(probe_id.encode("utf-8")), n_rep])
        for idx in order[:n_rep]:
            docs[idx] = noisy_clone(probe_doc, noise_sigma, crng)
        raw, _ = score_window(docs, current_docs, config, seed)
        r = float(raw[probe_pos])
        out.append(ProbePoint(float(f), n_rep, r, base_table.scale(r, clip=True)))
    return out


def sensitivity_grid(
    grants: Sequence[GrantRecord],
    linked,
    grid: Sequence[tuple[float, int, int]],
    config: EngineConfig,
    jobs: int = 1,
    agencies: Sequence[str] | None = None,
) -> list[dict]:
    """Re-run scoring and the citation regression for each (nu, topics, window) triple."""
    from .studies import table1_regression

    if not grid:
        raise ValueError("sensitivity grid is empty")
    rows = []
    for nu, tn, ws in grid:
        cfg = replace(config, nu=float(nu), topics=int(tn), window_years=int(ws))
        table = score_all(grants, cfg, jobs=jobs)
        regs = table1_regression(linked, table)
        row: dict = {"label": f"nu = {nu} TN = {tn} WS = {ws}", "nu": nu, "TN": tn, "WS": ws}
        for agency in agencies or sorted(regs):
            reg = regs.get(agency)
            if reg is None:
                row[f"{agency}_novelty_coefficient"] = math.nan
                row[f"{agency}_p_value"] = math.nan
                continue
            r = reg.row("Novelty")
            row[f"{agency}_novelty_coefficient"] = r["estimate"]
            row[f"{agency}_se"] = r["se"]
            row[f"{agency}_p_value"] = r["p"]
            row[f"{agency}_n"] = reg.n_obs
        rows.append(row)
    return rows


def write_sensitivity(rows: list[dict], path) -> None:
    cols: list[str] = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
