"""Grant and publication records: loading, validation, deduplication, linking.

File layouts
------------
Grants CSV (header names case-insensitive)::

    GRANT_ID, AGENCY, PROGRAM, DIVISION, FY, START_YEAR, END_YEAR,
    AWARD_AMOUNT_MUSD, PI_IDS, SUMMARY   [, IS_RESEARCH, RESEARCH_PROB]

Publications CSV::

    PUB_ID, GRANT_IDS, PUB_YEAR, CITATIONS, SJR, FIELD, JOURNAL

List-valued cells (PI_IDS, GRANT_IDS) are semicolon-separated. The JSONL
alternative carries the same fields with lowercased names, one object per
line; list fields may be JSON arrays or semicolon strings. Citation events
(per-publication, per-year counts) use ``PUB_ID, YEAR, CITATIONS``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

GRANT_COLUMNS = (
    "GRANT_ID", "AGENCY", "PROGRAM", "DIVISION", "FY", "START_YEAR", "END_YEAR",
    "AWARD_AMOUNT_MUSD", "PI_IDS", "SUMMARY",
)
PUB_COLUMNS = ("PUB_ID", "GRANT_IDS", "PUB_YEAR", "CITATIONS", "SJR", "FIELD", "JOURNAL")
EVENT_COLUMNS = ("PUB_ID", "YEAR", "CITATIONS")


class DataError(ValueError):
    """Input data cannot be used as given."""


class MissingFileError(DataError, FileNotFoundError):
    pass


class MissingColumnError(DataError):
    def __init__(self, column: str, path=None):
        self.column = column
        super().__init__(f"missing required column {column!r}" + (f" in {path}" if path else ""))


@dataclass(frozen=True)
class GrantRecord:
    grant_id: str
    agency: str
    program: str
    division: str
    fiscal_year: int
    start_year: int
    end_year: int
    award_amount: float
    pi_ids: tuple[str, ...]
    summary: str
    excluded: bool = False
    research_prob: float | None = None

    @property
    def length_years(self) -> int:
        return self.end_year - self.start_year


@dataclass(frozen=True)
class PublicationRecord:
    pub_id: str
    grant_ids: tuple[str, ...]
    pub_year: int
    citations: int
    sjr: float | None
    field: str | None
    journal: str = ""


@dataclass(frozen=True)
class Reject:
    line: int
    reason: str
    raw: dict


@dataclass
class LoadResult:
    records: list
    rejects: list[Reject] = field(default_factory=list)

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


# ---------------------------------------------------------------------------
# raw row readers
# ---------------------------------------------------------------------------


def _detect_format(path: Path, fmt: str | None) -> str:
    if fmt:
        return fmt.lower()
    return "jsonl" if path.suffix.lower() in (".jsonl", ".ndjson") else "csv"


def _iter_rows(path, fmt: str | None, required: Iterable[str]) -> Iterator[tuple[int, dict]]:
    """Yield ``(line_number, row)`` with keys uppercased."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"no such file: {path}")
    fmt = _detect_format(path, fmt)
    if fmt == "csv":
        fh = open(path, newline="", encoding="utf-8")
        with fh:
            reader = csv.DictReader(fh)
            header = {h.strip().upper() for h in (reader.fieldnames or [])}
            for col in required:
                if col not in header:
                    raise MissingColumnError(col, path)
            for row in reader:
                yield reader.line_num, {
                    (k or "").strip().upper(): v for k, v in row.items() if k is not None
                }
    elif fmt == "jsonl":
        with open(path, encoding="utf-8") as fh:
            seen_header = False
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    yield lineno, {"__error__": f"invalid JSON: {exc.msg}"}
                    continue
                row = {str(k).upper(): v for k, v in obj.items()}
                if not seen_header:
                    for col in required:
                        if col not in row:
                            raise MissingColumnError(col.lower(), path)
                    seen_header = True
                yield lineno, row
    else:
        raise DataError(f"unknown format {fmt!r}; expected csv or jsonl")


def _split_list(value) -> tuple[str, ...]:
    if value is None:
        return ()
    if isinstance(value, (list, tuple)):
        items = [str(v) for v in value]
    else:
        items = str(value).split(";")
    return tuple(s.strip() for s in items if s.strip())


def _as_int(value, name: str) -> int:
    try:
        f = float(str(value).strip())
    except (TypeError, ValueError):
        raise ValueError(f"{name} is not a number: {value!r}") from None
    if not f.is_integer():
        raise ValueError(f"{name} is not an integer: {value!r}")
    return int(f)


def _as_float(value, name: str) -> float:
    try:
        return float(str(value).strip())
    except (TypeError, ValueError):
        raise ValueError(f"{name} is not a number: {value!r}") from None


def _blank(value) -> bool:
    return value is None or str(value).strip() == ""


def _as_bool(value) -> bool:
    return str(value).strip().lower() in ("1", "true", "yes", "y", "t")


# ---------------------------------------------------------------------------
# loaders
# ---------------------------------------------------------------------------


def _parse_grant(row: dict) -> GrantRecord:
    if "__error__" in row:
        raise ValueError(row["__error__"])
    gid = str(row.get("GRANT_ID") or "").strip()
    if not gid:
        raise ValueError("grant_id is empty")
    fy = _as_int(row.get("FY"), "fiscal_year")
    if not 1900 <= fy <= 2100:
        raise ValueError("fiscal_year outside [1900, 2100]")
    award = _as_float(row.get("AWARD_AMOUNT_MUSD"), "award_amount")
    if award < 0:
        raise ValueError("award_amount < 0")
    pis = _split_list(row.get("PI_IDS"))
    if not pis:
        raise ValueError("pi_ids is empty")
    summary = "" if row.get("SUMMARY") is None else str(row.get("SUMMARY"))
    excluded = False
    prob = None
    if not _blank(row.get("IS_RESEARCH")):
        excluded = not _as_bool(row["IS_RESEARCH"])
    if not _blank(row.get("EXCLUDED")):
        excluded = excluded or _as_bool(row["EXCLUDED"])
    if not _blank(row.get("RESEARCH_PROB")):
        prob = _as_float(row["RESEARCH_PROB"], "research_prob")
    if not summary.strip() and not excluded:
        raise ValueError("summary is empty")
    start = _as_int(row.get("START_YEAR"), "start_year")
    end = _as_int(row.get("END_YEAR"), "end_year")
    return GrantRecord(
        grant_id=gid,
        agency=str(row.get("AGENCY") or "").strip().upper() or "OTHER",
        program=str(row.get("PROGRAM") or "").strip(),
        division=str(row.get("DIVISION") or "").strip(),
        fiscal_year=fy,
        start_year=start,
        end_year=end,
        award_amount=award,
        pi_ids=pis,
        summary=summary,
        excluded=excluded,
        research_prob=prob,
    )


def _parse_pub(row: dict) -> PublicationRecord:
    if "__error__" in row:
        raise ValueError(row["__error__"])
    pid = str(row.get("PUB_ID") or "").strip()
    if not pid:
        raise ValueError("pub_id is empty")
    gids = _split_list(row.get("GRANT_IDS"))
    if not gids:
        raise ValueError("grant_ids is empty")
    cites = _as_int(row.get("CITATIONS"), "citations")
    if cites < 0:
        raise ValueError("citations < 0")
    sjr = None
    if not _blank(row.get("SJR")):
        sjr = _as_float(row["SJR"], "sjr")
        if sjr < 0:
            raise ValueError("sjr < 0")
    fld = None if _blank(row.get("FIELD")) else str(row["FIELD"]).strip()
    return PublicationRecord(
        pub_id=pid,
        grant_ids=tuple(dict.fromkeys(gids)),
        pub_year=_as_int(row.get("PUB_YEAR"), "pub_year"),
        citations=cites,
        sjr=sjr,
        field=fld,
        journal="" if _blank(row.get("JOURNAL")) else str(row["JOURNAL"]).strip(),
    )


def _load(path, fmt, required, parse) -> LoadResult:
    result = LoadResult(records=[])
    for line, row in _iter_rows(path, fmt, required):
        try:
            result.records.append(parse(row))
        except ValueError as exc:
            result.rejects.append(Reject(line=line, reason=str(exc), raw=row))
    return result


def load_grants(path, format: str | None = None) -> LoadResult:
    """Load grant records; malformed rows land in ``rejects`` with line numbers."""
    return _load(path, format, GRANT_COLUMNS, _parse_grant)


def load_publications(path, format: str | None = None) -> LoadResult:
    return _load(path, format, PUB_COLUMNS[:4], _parse_pub)


def load_citation_events(path) -> dict[str, dict[int, int]]:
    """Per-publication yearly citation counts: ``{pub_id: {year: count}}``."""
    events: dict[str, dict[int, int]] = defaultdict(dict)
    for line, row in _iter_rows(path, None, EVENT_COLUMNS):
        try:
            pid = str(row["PUB_ID"]).strip()
            year = _as_int(row["YEAR"], "year")
            n = _as_int(row["CITATIONS"], "citations")
        except ValueError as exc:
            raise DataError(f"{path}:{line}: {exc}") from None
        events[pid][year] = events[pid].get(year, 0) + n
    return dict(events)


# ---------------------------------------------------------------------------
# deduplication and linking
# ---------------------------------------------------------------------------


def dedupe_key(grant: GrantRecord, strip_regex: str | re.Pattern | None = None, column: str = "grant_id"):
    value = str(getattr(grant, column))
    if strip_regex is not None:
        value = re.sub(strip_regex, "", value)
    return grant.agency, value


def dedupe_earliest(grants, strip_regex: str | None = None, column: str = "grant_id") -> list[GrantRecord]:
    """Keep the earliest fiscal-year record of each duplicate group.

    The group key is ``(agency, column value)`` with ``strip_regex`` matches
    removed (e.g. ``r"-\\d+[A-Z]*\\d*$"`` drops NIH support-year suffixes).
    Ties on year keep the first occurrence; survivors keep input order.
    """
    pattern = re.compile(strip_regex) if strip_regex else None
    best: dict = {}
    for pos, g in enumerate(grants):
        key = dedupe_key(g, pattern, column)
        cur = best.get(key)
        if cur is None or g.fiscal_year < cur[1].fiscal_year:
            best[key] = (pos, g)
    keep = sorted(pos for pos, _ in best.values())
    grants = list(grants)
    return [grants[p] for p in keep]


@dataclass
class LinkedDataset:
    grants: dict[str, GrantRecord]
    publications: dict[str, PublicationRecord]
    index: dict[str, tuple[str, ...]]
    orphans: list[tuple[str, str]]
    duplicate_pubs: list[str] = field(default_factory=list)

    @property
    def orphan_count(self) -> int:
        return len(self.orphans)

    def pubs_of(self, grant_id: str) -> list[PublicationRecord]:
        return [self.publications[p] for p in self.index.get(grant_id, ())]

    def linked_grants(self, pub: PublicationRecord) -> list[GrantRecord]:
        return [self.grants[g] for g in pub.grant_ids if g in self.grants]

    def inverse_index(self) -> dict[str, tuple[str, ...]]:
        inv: dict[str, list[str]] = defaultdict(list)
        for gid, pids in self.index.items():
            for pid in pids:
                inv[pid].append(gid)
        # keep each publication's own acknowledgement order
        return {
            pid: tuple(sorted(g, key=self.publications[pid].grant_ids.index))
            for pid, g in inv.items()
        }

    def coverage(self) -> dict:
        pubs = list(self.publications.values())
        return {
            "grants": len(self.grants),
            "publications": len(pubs),
            "missing_sjr": sum(p.sjr is None for p in pubs),
            "missing_field": sum(p.field is None for p in pubs),
            "orphan_references": self.orphan_count,
            "duplicate_publications": len(self.duplicate_pubs),
        }


def link(grants, pubs) -> LinkedDataset:
    """Index publications under every known grant they acknowledge.

    References to grants absent from ``grants`` are reported as orphans.
    """
    gmap = {g.grant_id: g for g in grants}
    pmap: dict[str, PublicationRecord] = {}
    dup: list[str] = []
    index: dict[str, list[str]] = defaultdict(list)
    orphans: list[tuple[str, str]] = []
    for p in pubs:
        if p.pub_id in pmap:
            dup.append(p.pub_id)
            continue
        pmap[p.pub_id] = p
        for gid in dict.fromkeys(p.grant_ids):
            if gid in gmap:
                index[gid].append(p.pub_id)
            else:
                orphans.append((p.pub_id, gid))
    return LinkedDataset(
        grants=gmap,
        publications=pmap,
        index={g: tuple(v) for g, v in index.items()},
        orphans=orphans,
        duplicate_pubs=dup,
    )


# ---------------------------------------------------------------------------
# writers
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_grants(grants, path, with_filter: bool = False) -> None:
    cols = list(GRANT_COLUMNS) + (["IS_RESEARCH", "RESEARCH_PROB"] if with_filter else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for g in grants:
            row = [
                g.grant_id, g.agency, g.program, g.division, g.fiscal_year, g.start_year,
                g.end_year, _fmt(g.award_amount), ";".join(g.pi_ids), g.summary,
            ]
            if with_filter:
                row += [int(not g.excluded), "" if g.research_prob is None else _fmt(g.research_prob)]
            w.writerow(row)


def write_publications(pubs, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(PUB_COLUMNS)
        for p in pubs:
            w.writerow([
                p.pub_id, ";".join(p.grant_ids), p.pub_year, p.citations,
                "" if p.sjr is None else _fmt(p.sjr), p.field or "", p.journal,
            ])


def write_citation_events(events: dict[str, dict[int, int]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(EVENT_COLUMNS)
        for pid, by_year in events.items():
            for year in sorted(by_year):
                w.writerow([pid, year, by_year[year]])


def write_rejects(rejects: list[Reject], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["line", "reason", "raw"])
        for r in rejects:
            w.writerow([r.line, r.reason, json.dumps(r.raw, sort_keys=True, ensure_ascii=False)])


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
