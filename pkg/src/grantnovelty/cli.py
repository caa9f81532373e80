"""Command-line interface.

Every subcommand reads and writes plain files: CSV for tables, JSON for
statistical reports, plus a ``manifest_<command>.json`` describing the run.
Settings come from flags, then a flat YAML config file, then defaults.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numerical non-convergence (outputs are still written).
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
import warnings
from dataclasses import fields, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .corpus import (
    DataError,
    dedupe_earliest,
    ensure_dir,
    file_digest,
    link,
    load_citation_events,
    load_grants,
    load_publications,
    write_citation_events,
    write_grants,
    write_publications,
    write_rejects,
)
from .detector import ConvergenceWarning
from .engine import (
    TABLE2_GRID,
    ConfigError,
    EngineConfig,
    InsufficientHistoryError,
    NoveltyTable,
    UnknownProbeError,
    clone_probe,
    parse_year_range,
    score_all,
    sensitivity_grid,
    write_sensitivity,
)
from .research_filter import (
    FilterError,
    LabelPool,
    active_learning_loop,
    cv_auc,
    predict_proba,
    read_labels,
    table_oracle,
    write_labels,
)
from .stats import StatsError
from .studies import (
    TABLE1_NAMES,
    citation_dynamics,
    flag_deciles,
    marginal_effect_curve,
    novelty_trend,
    prestige_comparison,
    productivity_comparison,
    program_comparison,
    table1_regression,
)
from .synthkit import SynthSpec, SynthSpecError, generate
from .textpipe import build_vocabulary, term_counts, tfidf_fit_transform, tokenize

CONFIG_ENV = "GRANTNOVELTY_CONFIG"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NONCONVERGED = 0, 1, 2, 3

# non-engine keys accepted in a config file
_RUN_KEYS = {"jobs", "rounds", "batch", "l2", "folds", "agency"}
_SYNTH_PREFIX = "synth_"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage().strip()}\n{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# settings
# ---------------------------------------------------------------------------


def load_config_file(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"config file not found: {p}")
    with open(p, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("config file must be a flat key-value mapping")
    for k, v in data.items():
        if isinstance(v, (dict, list)):
            raise ConfigError(f"config key {k!r}: nested values are not allowed")
    return {str(k).lower(): v for k, v in data.items()}


def _config_path(args):
    return args.config or os.environ.get(CONFIG_ENV) or None


def resolve_settings(args, require_config: bool = False) -> dict:
    """Merge defaults < config file < flags into one flat mapping."""
    path = _config_path(args)
    if path is None and require_config:
        raise UsageError(f"{args.command} needs a config file (--config PATH or ${CONFIG_ENV})")
    settings = load_config_file(path) if path else {}
    flags = {
        "seed": args.seed,
        "jobs": args.jobs,
        "agency": args.agency,
        "years": args.years,
        "nu": args.nu,
        "topics": args.topics,
        "window_years": args.window,
    }
    # flags are inserted after file keys, so they also win over file aliases
    for k, v in flags.items():
        if v is not None:
            settings.pop(k, None)
            settings[k] = v
    if path:
        settings["config_file"] = str(path)
    return settings


def engine_config(settings: dict) -> EngineConfig:
    values = {}
    for k, v in settings.items():
        if k in _RUN_KEYS or k == "config_file" or k.startswith(_SYNTH_PREFIX):
            continue
        values[k] = v
    agency = settings.get("agency")
    if agency is not None:
        values["agencies"] = agency
    return EngineConfig.from_mapping(values)


# the demo plants effects for every study so each report has something to find
DEMO_SYNTH = {"agencies": ("NSF", "NIH"), "dynamics_effect": 1.0, "sjr_effect": 1.0}


def synth_spec(settings: dict, defaults: dict | None = None) -> SynthSpec:
    known = {f.name for f in fields(SynthSpec)}
    kwargs: dict = dict(defaults or {})
    kwargs["seed"] = int(settings.get("seed", 0) or 0)
    for k, v in settings.items():
        if not k.startswith(_SYNTH_PREFIX):
            continue
        name = k[len(_SYNTH_PREFIX):]
        if name not in known or name in ("programs",):
            raise ConfigError(f"unknown synth setting {k!r}")
        kwargs[name] = v
    if settings.get("years"):
        kwargs["years"] = parse_year_range(str(settings["years"]))
    elif "years" in kwargs and isinstance(kwargs["years"], str):
        kwargs["years"] = parse_year_range(kwargs["years"])
    agency = settings.get("agency")
    if agency and str(agency).lower() != "all":
        kwargs["agencies"] = tuple(a.strip().upper() for a in str(agency).split(",") if a.strip())
    if isinstance(kwargs.get("agencies"), str):
        kwargs["agencies"] = tuple(a.strip().upper() for a in kwargs["agencies"].split(","))
    return SynthSpec(**kwargs)


def _jobs(settings: dict) -> int:
    jobs = int(settings.get("jobs") or 1)
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")
    return jobs


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_plain(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        x = float(v)
        return repr(x) if math.isfinite(x) else ""
    return v


def write_rows(rows: list[dict], path, columns=None) -> None:
    cols = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in cols])


class Run:
    """Tracks inputs and outputs of one command for the manifest."""

    def __init__(self, command: str, out_dir, settings: dict):
        self.command = command
        self.out = ensure_dir(out_dir)
        self.settings = settings
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.started = datetime.now(timezone.utc).isoformat(timespec="seconds")
        self.t0 = time.monotonic()

    def input(self, path) -> Path:
        p = Path(path)
        if not p.is_file():
            raise DataError(f"input file not found: {p}")
        self.inputs[str(p)] = file_digest(p)
        return p

    def path(self, name: str) -> Path:
        p = self.out / name
        if str(p) not in self.outputs:
            self.outputs.append(str(p))
        return p

    def finish(self, extra: dict | None = None) -> Path:
        manifest = {
            "tool": "grantnovelty",
            "version": __version__,
            "command": self.command,
            "config": self.settings,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": [{"path": p, "sha256": file_digest(p)} for p in self.outputs if Path(p).is_file()],
            "started": self.started,
            "finished": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "elapsed_seconds": round(time.monotonic() - self.t0, 3),
        }
        if extra:
            manifest.update(extra)
        path = self.out / f"manifest_{self.command}.json"
        write_json(manifest, path)
        return path


def _data_file(args, attr: str, default_name: str, required: bool = True):
    explicit = getattr(args, attr, None)
    if explicit:
        return Path(explicit)
    base = Path(args.data or args.out or ".")
    p = base / default_name
    if required or p.is_file():
        return p
    return None


def _load_grants(run: Run, path):
    res = load_grants(run.input(path))
    if res.rejects:
        print(f"warning: {len(res.rejects)} grant rows rejected in {path}", file=sys.stderr)
    return res.records


def _load_linked(run: Run, args):
    grants = _load_grants(run, _data_file(args, "grants", "grants.csv"))
    pres = load_publications(run.input(_data_file(args, "publications", "publications.csv")))
    if pres.rejects:
        print(f"warning: {len(pres.rejects)} publication rows rejected", file=sys.stderr)
    return grants, link(grants, pres.records)


def _load_novelty(run: Run, args) -> NoveltyTable:
    return NoveltyTable.read_csv(run.input(_data_file(args, "novelty", "novelty.csv")))


def _score(grants, config: EngineConfig, jobs: int) -> NoveltyTable:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        return score_all(grants, config, jobs=jobs)


def _score_report(table: NoveltyTable, config: EngineConfig) -> dict:
    return {
        "config": config.to_dict(),
        "n_scored": len(table.rows),
        "raw_min": table.raw_min,
        "raw_max": table.raw_max,
        "degenerate": table.degenerate,
        "skipped": table.skipped,
        "nonconverged": table.nonconverged,
    }


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    settings = resolve_settings(args)
    run = Run("ingest", args.out or ".", settings)
    gres = load_grants(run.input(args.grants), format=args.format)
    grants = dedupe_earliest(gres.records, strip_regex=args.dedupe_regex)
    report: dict = {
        "grants_loaded": len(gres.records),
        "grants_rejected": len(gres.rejects),
        "duplicates_removed": len(gres.records) - len(grants),
    }
    write_grants(grants, run.path("grants.csv"), with_filter=any(g.research_prob is not None for g in grants))
    write_rejects(gres.rejects, run.path("rejects_grants.csv"))
    if args.publications:
        pres = load_publications(run.input(args.publications), format=args.format)
        linked = link(grants, pres.records)
        write_publications(list(linked.publications.values()), run.path("publications.csv"))
        write_rejects(pres.rejects, run.path("rejects_publications.csv"))
        report["publications_rejected"] = len(pres.rejects)
        report["coverage"] = linked.coverage()
        report["orphans"] = [list(o) for o in linked.orphans]
    if args.events:
        events = load_citation_events(run.input(args.events))
        write_citation_events(events, run.path("citation_events.csv"))
        report["citation_event_publications"] = len(events)
    write_json(report, run.path("ingest_report.json"))
    run.finish()
    print(f"ingested {len(grants)} grants ({report['grants_rejected']} rejected, "
          f"{report['duplicates_removed']} duplicates removed)")
    return EXIT_OK


def cmd_filter(args) -> int:
    settings = resolve_settings(args)
    config = engine_config(settings)
    run = Run("filter", args.out or ".", settings)
    grants = _load_grants(run, _data_file(args, "grants", "grants.csv"))
    label_rows = read_labels(run.input(args.labels))
    rounds = int(args.rounds or settings.get("rounds", 10))
    batch = int(args.batch or settings.get("batch", 20))
    l2 = float(args.l2 if args.l2 is not None else settings.get("l2", 1.0))
    folds = int(settings.get("folds", 3))

    ids = [g.grant_id for g in grants]
    docs = [term_counts(tokenize(g.summary, config.min_token_len)) for g in grants]
    vocab = build_vocabulary(docs, config.min_df, config.max_df_ratio)
    _, X = tfidf_fit_transform(docs, vocab, normalize=config.normalize)

    answers = {gid: lab for gid, lab, _ in label_rows}
    seeds = {gid: lab for gid, lab, prov in label_rows if prov.startswith("seed")} or dict(answers)
    pool = LabelPool.from_seed(X, ids, seeds)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        model, pool = active_learning_loop(pool, table_oracle(answers), rounds=rounds, batch=batch, l2=l2)
    p = predict_proba(model, X)
    flagged = [replace(g, excluded=not bool(pi >= 0.5), research_prob=float(pi)) for g, pi in zip(grants, p)]
    write_grants(flagged, run.path("grants_filtered.csv"), with_filter=True)
    write_labels(pool.label_rows(), run.path("labels_out.csv"))
    if pool.pending:
        write_rows([{"grant_id": g} for g in pool.pending], run.path("label_requests.csv"), ["grant_id"])

    Xl, yl = pool.training_set()
    try:
        cv = cv_auc(Xl, yl, folds=folds, l2=l2, seed=int(settings.get("seed", 0) or 0)).to_dict()
    except (FilterError, StatsError) as exc:
        cv = {"error": str(exc)}
    report = {
        "n_grants": len(grants),
        "n_labeled": len(pool.labels),
        "n_research": int(sum(not g.excluded for g in flagged)),
        "rounds": rounds,
        "batch": batch,
        "l2": l2,
        "cv": cv,
        "converged": model.converged,
        "notes": pool.notes + [str(w.message) for w in caught],
        "pending_requests": len(pool.pending),
    }
    write_json(report, run.path("filter_report.json"))
    run.finish()
    print(f"filter: {report['n_research']} of {len(grants)} grants kept as research; "
          f"{len(pool.labels)} labels")
    return EXIT_OK if model.converged else EXIT_NONCONVERGED


def cmd_score(args) -> int:
    settings = resolve_settings(args, require_config=True)
    config = engine_config(settings)
    run = Run("score", args.out or ".", settings)
    grants = _load_grants(run, _data_file(args, "grants", "grants.csv"))
    table = _score(grants, config, _jobs(settings))
    table.write_csv(run.path("novelty.csv"))
    write_json(_score_report(table, config), run.path("score_report.json"))
    run.finish()
    print(f"scored {len(table.rows)} grants; {len(table.skipped)} cells skipped")
    return EXIT_NONCONVERGED if table.nonconverged else EXIT_OK


def cmd_probe(args) -> int:
    settings = resolve_settings(args)
    config = engine_config(settings)
    run = Run("probe", args.out or ".", settings)
    grants = _load_grants(run, _data_file(args, "grants", "grants.csv"))
    fractions = [float(x) for x in args.fractions.split(",") if x.strip()]
    base = _score(grants, config, _jobs(settings))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        curve = clone_probe(grants, args.probe, fractions, config, noise_sigma=args.noise_sigma, base_table=base)
    rows = [{"fraction": p.fraction, "n_replaced": p.n_replaced, "raw_distance": p.raw_distance,
             "novelty_score": p.novelty_score} for p in curve]
    write_rows(rows, run.path("probe.csv"), ["fraction", "n_replaced", "raw_distance", "novelty_score"])
    write_json({"probe": args.probe, "noise_sigma": args.noise_sigma, "curve": rows}, run.path("probe_report.json"))
    run.finish()
    print("probe " + " ".join(f"{r['fraction']:g}:{r['novelty_score']:.3f}" for r in rows))
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    settings = resolve_settings(args)
    config = engine_config(settings)
    run = Run("sensitivity", args.out or ".", settings)
    grants, linked = _load_linked(run, args)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        rows = sensitivity_grid(grants, linked, TABLE2_GRID, config, jobs=_jobs(settings))
    write_sensitivity(rows, run.path("sensitivity.csv"))
    write_json({"rows": rows}, run.path("sensitivity.json"))
    run.finish()
    print(f"sensitivity grid: {len(rows)} rows")
    return EXIT_OK


def regression_outputs(run: Run, linked, novelty: NoveltyTable, rule: str = "max") -> dict:
    regs = table1_regression(linked, novelty, rule=rule)
    write_json({a: r.to_dict() for a, r in regs.items()}, run.path("regression.json"))
    table_rows, curve_rows = [], []
    for agency, res in regs.items():
        for name in TABLE1_NAMES:
            table_rows.append({"agency": agency, "term": name, **res.row(name)})
        curve = marginal_effect_curve(res)
        for pt in curve.points():
            curve_rows.append({"agency": agency, **pt,
                               "lower": pt["prediction"] - 1.96 * pt["se"],
                               "upper": pt["prediction"] + 1.96 * pt["se"]})
    write_rows(table_rows, run.path("table1.csv"), ["agency", "term", "estimate", "se", "t", "p", "stars"])
    write_rows(curve_rows, run.path("marginal_effect.csv"), ["agency", "novelty", "prediction", "se", "lower", "upper"])
    return regs


def cmd_regress(args) -> int:
    settings = resolve_settings(args)
    run = Run("regress", args.out or ".", settings)
    _, linked = _load_linked(run, args)
    regs = regression_outputs(run, linked, _load_novelty(run, args), rule=args.rule)
    run.finish()
    for agency, res in regs.items():
        r = res.row("Novelty")
        print(f"{agency}: novelty {r['estimate']:.3f}{r['stars']} (se {r['se']:.3f}, n {res.n_obs})")
    return EXIT_OK


def _flags(args, linked, novelty):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return flag_deciles(linked, novelty, q=args.q, pooled_years=args.pooled_years)


def dynamics_outputs(run: Run, linked, novelty, flags, events, cumulative=False, horizons=range(9)) -> dict:
    curves = citation_dynamics(linked, flags, horizons=tuple(horizons), events=events, cumulative=cumulative)
    write_json({a: c.to_dict() for a, c in curves.items()}, run.path("dynamics.json"))
    write_rows([p for c in curves.values() for p in c.points()], run.path("dynamics.csv"),
               ["agency", "horizon", "p_top_novel", "sem_top_novel", "n_top_novel", "p_other", "sem_other", "n_other"])
    return curves


def _events(run: Run, args):
    path = _data_file(args, "events", "citation_events.csv", required=False)
    return load_citation_events(run.input(path)) if path else None


def cmd_dynamics(args) -> int:
    settings = resolve_settings(args)
    run = Run("dynamics", args.out or ".", settings)
    _, linked = _load_linked(run, args)
    novelty = _load_novelty(run, args)
    a, b = parse_year_range(args.horizons)
    curves = dynamics_outputs(run, linked, novelty, _flags(args, linked, novelty), _events(run, args),
                              cumulative=args.cumulative, horizons=range(a, b + 1))
    run.finish()
    print(f"dynamics for {', '.join(curves) or 'no agencies'}")
    return EXIT_OK


def cmd_programs(args) -> int:
    settings = resolve_settings(args)
    run = Run("programs", args.out or ".", settings)
    _, linked = _load_linked(run, args)
    novelty = _load_novelty(run, args)
    pairs = [tuple(p.split(",", 1)) for p in args.pair] if args.pair else [("NIH:R01", "NSF:STANDARD")]
    comp = program_comparison(linked, novelty, _flags(args, linked, novelty), pairs=pairs)
    write_json(comp.to_dict(), run.path("programs.json"))
    write_rows(comp.points(), run.path("programs.csv"),
               ["program", "n_grants", "p_top_novel", "sem_top_novel", "n_publications", "p_top_cited", "sem_top_cited"])
    run.finish()
    print(f"programs: {len(comp.programs)} compared")
    return EXIT_OK


def _group_command(name: str, fn):
    def cmd(args) -> int:
        settings = resolve_settings(args)
        run = Run(name, args.out or ".", settings)
        _, linked = _load_linked(run, args)
        novelty = _load_novelty(run, args)
        res = fn(linked, _flags(args, linked, novelty))
        write_json({a: r.to_dict() for a, r in res.items()}, run.path(f"{name}.json"))
        write_rows([p for r in res.values() for p in r.points()], run.path(f"{name}.csv"))
        run.finish()
        print(f"{name}: " + ", ".join(f"{a} diff {r.mean_difference:.4f}" for a, r in res.items()))
        return EXIT_OK

    return cmd


cmd_prestige = _group_command("prestige", prestige_comparison)
cmd_productivity = _group_command("productivity", productivity_comparison)


def _trend_dict(novelty) -> dict:
    return {a: (r if isinstance(r, str) else r.to_dict()) for a, r in novelty_trend(novelty).items()}


def cmd_trend(args) -> int:
    settings = resolve_settings(args)
    run = Run("trend", args.out or ".", settings)
    res = _trend_dict(_load_novelty(run, args))
    write_json(res, run.path("trend.json"))
    run.finish()
    print("trend: " + ", ".join(a for a in res))
    return EXIT_OK


def _write_synth(run: Run, corpus) -> None:
    for path in corpus.write(run.out).values():
        run.path(Path(path).name)


def cmd_synth(args) -> int:
    settings = resolve_settings(args)
    spec = synth_spec(settings)
    run = Run("synth", args.out or ".", settings)
    corpus = generate(spec)
    _write_synth(run, corpus)
    run.finish({"synth_spec": _plain(vars(spec))})
    print(f"synth: {len(corpus.grants)} grants, {len(corpus.publications)} publications")
    return EXIT_OK


def cmd_demo(args) -> int:
    settings = resolve_settings(args)
    settings.setdefault("seed", 0)
    spec = synth_spec(settings, DEMO_SYNTH)
    engine_settings = {k: v for k, v in settings.items() if k not in ("years", "agency")}
    config = engine_config(engine_settings)
    run = Run("demo", args.out or ".", settings)
    _write_synth(run, generate(spec))

    grants = load_grants(run.out / "grants.csv").records
    pubs = load_publications(run.out / "publications.csv").records
    events = load_citation_events(run.out / "citation_events.csv")
    linked = link(grants, pubs)

    table = _score(grants, config, _jobs(settings))
    table.write_csv(run.path("novelty.csv"))
    write_json(_score_report(table, config), run.path("score_report.json"))
    novelty = NoveltyTable.read_csv(run.out / "novelty.csv")

    regression_outputs(run, linked, novelty)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        flags = flag_deciles(linked, novelty)
    dynamics_outputs(run, linked, novelty, flags, events)
    comp = program_comparison(linked, novelty, flags)
    write_json(comp.to_dict(), run.path("programs.json"))
    write_rows(comp.points(), run.path("programs.csv"),
               ["program", "n_grants", "p_top_novel", "sem_top_novel", "n_publications", "p_top_cited", "sem_top_cited"])
    for name, fn in (("prestige", prestige_comparison), ("productivity", productivity_comparison)):
        res = fn(linked, flags)
        write_json({a: r.to_dict() for a, r in res.items()}, run.path(f"{name}.json"))
        write_rows([p for r in res.values() for p in r.points()], run.path(f"{name}.csv"))
    write_json(_trend_dict(novelty), run.path("trend.json"))
    run.finish({"synth_spec": _plain(vars(spec))})
    print(f"demo: {len(table.rows)} grants scored; outputs in {run.out}")
    return EXIT_NONCONVERGED if table.nonconverged else EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    g = p.add_argument_group("common options")
    g.add_argument("--config", metavar="PATH", help=f"flat YAML config (default: ${CONFIG_ENV})")
    g.add_argument("--seed", type=int)
    g.add_argument("--jobs", type=int, help="worker processes for scoring")
    g.add_argument("--agency", help="NSF, NIH, a comma list, or all")
    g.add_argument("--years", metavar="A..B")
    g.add_argument("--nu", type=float)
    g.add_argument("--topics", type=int)
    g.add_argument("--window", type=int, help="window size in years")
    g.add_argument("--out", metavar="DIR", help="output directory (default: current)")
    g.add_argument("--data", metavar="DIR", help="directory holding input tables (default: --out)")
    return p


def _inputs(p: argparse.ArgumentParser, novelty=False, events=False) -> None:
    p.add_argument("--grants", metavar="PATH")
    p.add_argument("--publications", metavar="PATH")
    if novelty:
        p.add_argument("--novelty", metavar="PATH")
    if events:
        p.add_argument("--events", metavar="PATH")


def _decile_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--q", type=float, default=0.1, help="top fraction flagged (default 0.1)")
    p.add_argument("--pooled-years", action="store_true", help="rank novelty within division across years")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="grantnovelty", description="Grant novelty scoring and citation studies.")
    parser.add_argument("--version", action="version", version=f"grantnovelty {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("ingest", parents=[common], help="load, validate, dedupe and link raw tables")
    p.add_argument("--grants", required=True, metavar="PATH")
    p.add_argument("--publications", metavar="PATH")
    p.add_argument("--events", metavar="PATH")
    p.add_argument("--format", choices=["csv", "jsonl"])
    p.add_argument("--dedupe-regex", metavar="RE", help="pattern stripped from grant ids before dedup")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("filter", parents=[common], help="train and apply the research-grant classifier")
    p.add_argument("--grants", metavar="PATH")
    p.add_argument("--labels", required=True, metavar="PATH", help="CSV of grant_id,label,provenance")
    p.add_argument("--rounds", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--l2", type=float)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("score", parents=[common], help="windowed novelty scores (needs a config file)")
    p.add_argument("--grants", metavar="PATH")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("probe", parents=[common], help="clone-probe robustness curve")
    p.add_argument("--grants", metavar="PATH")
    p.add_argument("--probe", required=True, metavar="GRANT_ID")
    p.add_argument("--fractions", default="0,0.01,0.02,0.04")
    p.add_argument("--noise-sigma", type=float)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("sensitivity", parents=[common], help="(nu, topics, window) grid with regressions")
    _inputs(p)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("regress", parents=[common], help="citation regression and marginal-effect curve")
    _inputs(p, novelty=True)
    p.add_argument("--rule", choices=["max", "mean"], default="max", help="multi-grant publication rule")
    p.set_defaults(func=cmd_regress)

    p = sub.add_parser("dynamics", parents=[common], help="top-decile citation dynamics")
    _inputs(p, novelty=True, events=True)
    _decile_opts(p)
    p.add_argument("--horizons", default="0..8", metavar="A..B")
    p.add_argument("--cumulative", action="store_true")
    p.set_defaults(func=cmd_dynamics)

    p = sub.add_parser("programs", parents=[common], help="per-program novelty and citation shares")
    _inputs(p, novelty=True)
    _decile_opts(p)
    p.add_argument("--pair", action="append", metavar="A,B", help="program pair to test, e.g. NIH:R01,NSF:STANDARD")
    p.set_defaults(func=cmd_programs)

    for name, fn, text in (
        ("prestige", cmd_prestige, "top-SJR share, top-novel vs other grants"),
        ("productivity", cmd_productivity, "publications per grant, top-novel vs other"),
    ):
        p = sub.add_parser(name, parents=[common], help=text)
        _inputs(p, novelty=True)
        _decile_opts(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("trend", parents=[common], help="novelty against award year")
    p.add_argument("--novelty", metavar="PATH")
    p.set_defaults(func=cmd_trend)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("demo", parents=[common], help="synth, score, regress and all studies")
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"grantnovelty {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ConfigError, FilterError, StatsError, SynthSpecError, InsufficientHistoryError,
            yaml.YAMLError, OSError, ValueError) as exc:
        print(f"grantnovelty {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except UnknownProbeError as exc:
        print(f"grantnovelty {args.command}: error: unknown probe grant {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
