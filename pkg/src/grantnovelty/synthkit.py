"""Deterministic synthetic grant/publication corpora with planted ground truth.

Incumbent grants write from small perturbations of one fixed topic mixture,
plus a latent-novelty share of tokens from a single focus topic. A fixed
share of each year's grants is planted as novel: most of their tokens come
from a word block private to that (agency, year), the rest from their focus
topic alone. Citations follow the regression model used in the
studies module with a configurable novelty effect, so every downstream
analysis has a known answer.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import GrantRecord, PublicationRecord, write_citation_events, write_grants, write_publications

DEFAULT_PROGRAMS = {
    "NSF": (("STANDARD", 0.80, 0.0), ("EAGER", 0.10, 0.5), ("RAPID", 0.10, -0.5)),
    "NIH": (("R01", 0.70, 0.0), ("R21", 0.20, 0.3), ("R03", 0.10, -0.3)),
}

# planted covariate effects (citations per unit of each regressor)
CITATION_MODEL = {
    "intercept": 30.0,
    "years_after_2010": -2.0,
    "pi_experience": 1.0,
    "sjr": 5.0,
    "award": 3.0,
    "n_pis": 1.5,
}


class SynthSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    agencies: tuple[str, ...] = ("NSF",)
    years: tuple[int, int] = (2010, 2012)
    grants_per_year: int = 300
    n_topics: int = 10
    words_per_topic: int = 40
    doc_length: int = 100
    novel_fraction: float = 0.1
    novel_block_share: float = 0.7
    topic_concentration: float = 50.0
    incumbent_latent_max: float = 0.3
    citation_effect: float = 20.0
    citation_noise: float = 10.0
    sjr_effect: float = 0.0
    sjr_noise: float = 0.3
    dynamics_effect: float = 0.0
    annual_citation_rate: float = 8.0
    pubs_per_grant: float = 3.0
    multi_grant_prob: float = 0.05
    n_divisions: int = 6
    pi_pool_ratio: float = 0.6
    observation_end: int | None = None
    programs: dict | None = None

    def validate(self) -> None:
        if self.years[1] < self.years[0]:
            raise SynthSpecError("years must be an increasing (start, end) pair")
        if not 0.0 <= self.novel_fraction < 1.0:
            raise SynthSpecError("novel_fraction must lie in [0, 1)")
        if not 0.6 <= self.novel_block_share < 1.0:
            raise SynthSpecError("novel_block_share must lie in [0.6, 1)")
        if not 0.0 <= self.incumbent_latent_max < 1.0:
            raise SynthSpecError("incumbent_latent_max must lie in [0, 1)")
        if self.words_per_topic < 10:
            raise SynthSpecError("need at least 10 words per topic")
        for name in ("citation_effect", "sjr_effect", "dynamics_effect"):
            if not math.isfinite(getattr(self, name)):
                raise SynthSpecError(f"{name} must be finite")
        if self.grants_per_year < 1 or self.n_topics < 1 or self.doc_length < 2:
            raise SynthSpecError("grants_per_year, n_topics >= 1 and doc_length >= 2 required")

    @property
    def obs_end(self) -> int:
        return self.observation_end if self.observation_end is not None else self.years[1] + 3


@dataclass
class SynthCorpus:
    spec: SynthSpec
    grants: list[GrantRecord]
    publications: list[PublicationRecord]
    truth: dict[str, tuple[bool, float]]
    citation_events: dict[str, dict[int, int]] = field(default_factory=dict)

    def planted_ids(self) -> set[str]:
        return {g for g, (planted, _) in self.truth.items() if planted}

    def latent(self) -> dict[str, float]:
        return {g: lat for g, (_, lat) in self.truth.items()}

    def write(self, out_dir) -> dict[str, str]:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "grants": out / "grants.csv",
            "publications": out / "publications.csv",
            "truth": out / "truth.csv",
            "citation_events": out / "citation_events.csv",
        }
        write_grants(self.grants, paths["grants"])
        write_publications(self.publications, paths["publications"])
        write_citation_events(self.citation_events, paths["citation_events"])
        with open(paths["truth"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["grant_id", "is_planted_novel", "latent_novelty"])
            for gid, (planted, lat) in self.truth.items():
                w.writerow([gid, int(planted), repr(lat)])
        return {k: str(v) for k, v in paths.items()}


def topic_word(t: int, j: int) -> str:
    return f"t{t:02d}w{j:03d}"


def novel_word(agency: str, year: int, j: int) -> str:
    return f"nv{agency.lower()}{year}w{j:03d}"


def _zipf_weights(n: int) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** 0.8
    return w / w.sum()


def _sample_tokens(rng, counts_by_topic: np.ndarray, word_p: np.ndarray, words_per_topic: int) -> list[str]:
    toks = []
    for t, c in enumerate(counts_by_topic):
        if c:
            for j in rng.choice(words_per_topic, size=int(c), p=word_p):
                toks.append(topic_word(t, int(j)))
    return toks


def _pi_experience(grants: list[GrantRecord]) -> dict[str, int]:
    from .studies import pi_experience

    return pi_experience(grants)


def generate(spec: SynthSpec) -> SynthCorpus:
    """Generate grants, publications, yearly citation events and ground truth."""
    spec.validate()
    programs = spec.programs or DEFAULT_PROGRAMS
    base = np.random.default_rng(spec.seed)
    word_p = _zipf_weights(spec.words_per_topic)
    field_sjr = base.uniform(0.5, 3.0, size=spec.n_topics)
    base_mixture = base.dirichlet(np.full(spec.n_topics, 2.0))
    year_list = list(range(spec.years[0], spec.years[1] + 1))

    grants: list[GrantRecord] = []
    truth: dict[str, tuple[bool, float]] = {}
    dominant: dict[str, int] = {}

    for a_idx, agency in enumerate(spec.agencies):
        progs = programs.get(agency) or (("STANDARD", 1.0, 0.0),)
        labels = [p[0] for p in progs]
        shares = np.array([p[1] for p in progs], dtype=float)
        shares /= shares.sum()
        offsets = np.array([p[2] for p in progs], dtype=float)
        n_total = spec.grants_per_year * len(year_list)
        pi_pool = max(1, int(spec.pi_pool_ratio * n_total))
        for year in year_list:
            rng = np.random.default_rng([spec.seed, a_idx, year])
            n = spec.grants_per_year
            prog_idx = rng.choice(len(labels), size=n, p=shares)
            n_planted = int(round(spec.novel_fraction * n))
            weights = np.maximum(1.0 + offsets[prog_idx], 1e-6)
            planted = np.zeros(n, dtype=bool)
            if n_planted:
                planted[rng.choice(n, size=n_planted, replace=False, p=weights / weights.sum())] = True
            for i in range(n):
                gid = f"{agency}-{year}-{i:05d}"
                length = int(rng.integers(max(2, spec.doc_length // 2), spec.doc_length * 3 // 2 + 1))
                focus = int(rng.integers(spec.n_topics))
                focus_p = np.zeros(spec.n_topics)
                focus_p[focus] = 1.0
                if planted[i]:
                    latent = float(rng.uniform(0.7, 1.0))
                    n_block = int(math.ceil(spec.novel_block_share * length))
                    block = rng.choice(spec.words_per_topic, size=n_block, p=word_p)
                    toks = [novel_word(agency, year, int(j)) for j in block]
                    toks += _sample_tokens(rng, rng.multinomial(length - n_block, focus_p), word_p, spec.words_per_topic)
                else:
                    latent = float(rng.uniform(0.0, spec.incumbent_latent_max))
                    theta = rng.dirichlet(spec.topic_concentration * base_mixture)
                    n_focus = int(round(latent * length))
                    counts = rng.multinomial(length - n_focus, theta) + rng.multinomial(n_focus, focus_p)
                    toks = _sample_tokens(rng, counts, word_p, spec.words_per_topic)
                dom = focus
                rng.shuffle(toks)
                n_pis = int(rng.integers(1, 4))
                pis = tuple(f"{agency}-PI{int(p):05d}" for p in rng.choice(pi_pool, size=n_pis, replace=False))
                dur = int(rng.integers(1, 6))
                grants.append(GrantRecord(
                    grant_id=gid,
                    agency=agency,
                    program=labels[prog_idx[i]],
                    division=f"{agency}-D{int(rng.integers(spec.n_divisions)):02d}",
                    fiscal_year=year,
                    start_year=year,
                    end_year=year + dur,
                    award_amount=round(float(rng.lognormal(math.log(0.4), 0.5)), 6),
                    pi_ids=pis,
                    summary=" ".join(toks),
                ))
                truth[gid] = (bool(planted[i]), latent)
                dominant[gid] = dom

    experience = _pi_experience(grants)
    grant_by_id = {g.grant_id: g for g in grants}
    by_agency_year: dict[tuple[str, int], list[GrantRecord]] = {}
    for g in grants:
        by_agency_year.setdefault((g.agency, g.fiscal_year), []).append(g)

    pubs: list[PublicationRecord] = []
    events: dict[str, dict[int, int]] = {}
    cm = CITATION_MODEL
    prng = np.random.default_rng([spec.seed, 7919])
    for g in grants:
        for k in range(int(prng.poisson(spec.pubs_per_grant))):
            pid = f"P-{g.grant_id}-{k:02d}"
            gids = [g.grant_id]
            if prng.random() < spec.multi_grant_prob:
                peers = by_agency_year[(g.agency, g.fiscal_year)]
                other = peers[int(prng.integers(len(peers)))].grant_id
                if other != g.grant_id:
                    gids.append(other)
            # covariates come from the acknowledged grant with the highest latent novelty
            owner = max(gids, key=lambda x: truth[x][1])
            og = grant_by_id[owner]
            latent = truth[owner][1]
            pub_year = min(spec.obs_end, g.fiscal_year + 1 + int(prng.poisson(1.0)))
            topic = dominant[owner]
            fld = f"F{topic:02d}"
            sjr = max(0.05, float(field_sjr[topic] + spec.sjr_effect * latent + prng.normal(0.0, spec.sjr_noise)))
            sjr = round(sjr, 4)
            mean = (
                cm["intercept"]
                + spec.citation_effect * latent
                + cm["years_after_2010"] * (pub_year - 2010)
                + cm["pi_experience"] * experience[owner]
                + cm["sjr"] * sjr
                + cm["award"] * og.award_amount
                + cm["n_pis"] * len(og.pi_ids)
            )
            noise = abs(prng.normal(0.0, spec.citation_noise)) if spec.citation_noise > 0 else 0.0
            cites = max(0, int(round(mean + noise)))
            pubs.append(PublicationRecord(
                pub_id=pid,
                grant_ids=tuple(gids),
                pub_year=pub_year,
                citations=cites,
                sjr=sjr,
                field=fld,
                journal=f"J{topic:02d}-{int(prng.integers(5))}",
            ))
            rate = spec.annual_citation_rate * (1.0 + spec.dynamics_effect * latent)
            events[pid] = {
                y: int(prng.poisson(rate)) for y in range(pub_year, spec.obs_end + 1)
            }
    return SynthCorpus(spec=spec, grants=grants, publications=pubs, truth=truth, citation_events=events)
