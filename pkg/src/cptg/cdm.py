"""Patient-level store over a simplified PCORnet-style common data model.

Five comma-separated tables are read from a directory::

    demographic.csv  PATID,BIRTH_DATE,SEX,RACE_ETH
    diagnosis.csv    PATID,CODE_SYSTEM,CODE,DATE
    procedure.csv    PATID,CODE_SYSTEM,CODE,DATE
    lab.csv          PATID,LOINC,VALUE,UNIT,DATE
    medication.csv   PATID,RXNORM,DATE

Bad rows are rejected and logged, never fatal. A missing table or a header
mismatch is fatal.
"""
from __future__ import annotations

import csv
import datetime as dt
import hashlib
import json
import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence


class CdmError(Exception):
    """Fatal problem with CDM input (missing table, bad header, unknown patient)."""


class Sex(str, Enum):
    FEMALE = "Female"
    MALE = "Male"
    UNKNOWN = "Unknown"


class RaceEthnicity(str, Enum):
    NHW = "NHW"
    NHB = "NHB"
    HISPANIC = "Hispanic"
    OTHER = "Other"
    UNKNOWN = "Unknown"


CODE_SYSTEMS = {
    "diagnosis": ("ICD9CM", "ICD10CM"),
    "procedure": ("HCPCS", "RXNORM"),
    "medication": ("RXNORM",),
}

TABLES = {
    "demographic": ("PATID", "BIRTH_DATE", "SEX", "RACE_ETH"),
    "diagnosis": ("PATID", "CODE_SYSTEM", "CODE", "DATE"),
    "procedure": ("PATID", "CODE_SYSTEM", "CODE", "DATE"),
    "lab": ("PATID", "LOINC", "VALUE", "UNIT", "DATE"),
    "medication": ("PATID", "RXNORM", "DATE"),
}

EVENT_KINDS = ("diagnosis", "procedure", "medication", "lab")
REJECTS_FILE = "ingest_rejects.csv"


def normalize_code(raw: str, system: str | None = None) -> str:
    """Strip dots and surrounding whitespace, upper-case letters.

    >>> normalize_code("C18.9", "ICD10CM")
    'C189'
    """
    if raw is None or not raw.strip():
        raise ValueError("empty code")
    return raw.strip().replace(".", "").upper()


def _pattern_key(pattern: str) -> tuple[str, bool]:
    """Return (normalized stem, is_prefix) for an exact or trailing-star pattern."""
    p = pattern.strip()
    if not p:
        raise ValueError("empty code pattern")
    star = p.find("*")
    if star == -1:
        return normalize_code(p), False
    if star != len(p) - 1:
        raise ValueError(f"malformed code pattern {pattern!r}: '*' must be trailing")
    stem = p[:-1].rstrip(".")
    if not stem.replace(".", ""):
        raise ValueError(f"malformed code pattern {pattern!r}: empty prefix")
    return normalize_code(stem), True


def code_matches(pattern: str, code: str, system: str | None = None) -> bool:
    stem, prefix = _pattern_key(pattern)
    code = normalize_code(code)
    return code.startswith(stem) if prefix else code == stem


class CodeMatcher:
    """Pre-normalized pattern set; ``match`` is called in the inner query loop."""

    __slots__ = ("exact", "prefixes", "patterns")

    def __init__(self, patterns: Iterable[str]):
        self.patterns = tuple(patterns)
        exact, prefixes = set(), []
        for p in self.patterns:
            stem, is_prefix = _pattern_key(p)
            (prefixes.append(stem) if is_prefix else exact.add(stem))
        self.exact = frozenset(exact)
        self.prefixes = tuple(sorted(set(prefixes)))

    def __bool__(self) -> bool:
        return bool(self.patterns)

    def match(self, code: str) -> bool:
        return code in self.exact or code.startswith(self.prefixes)


@dataclass(frozen=True)
class Patient:
    patient_id: str
    birth_date: dt.date
    sex: Sex
    race_ethnicity: RaceEthnicity


@dataclass(frozen=True, order=True)
class CodedEvent:
    """A diagnosis, procedure or medication record; ``code`` is normalized."""

    date: dt.date
    system: str
    code: str
    patient_id: str = field(compare=False)


@dataclass(frozen=True, order=True)
class LabResult:
    date: dt.date
    loinc: str
    value: float
    unit: str
    patient_id: str = field(compare=False)


@dataclass(frozen=True)
class Reject:
    file: str
    line: int
    reason: str


@dataclass
class IngestManifest:
    source: str
    row_counts: dict[str, int]
    accepted_counts: dict[str, int]
    rejects: list[Reject]
    warnings: list[str]

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "row_counts": dict(sorted(self.row_counts.items())),
            "accepted_counts": dict(sorted(self.accepted_counts.items())),
            "n_rejects": len(self.rejects),
            "warnings": list(self.warnings),
        }

    def write(self, out_dir: Path | str) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ingest_manifest.json").write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        with open(out / REJECTS_FILE, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["FILE", "LINE", "REASON"])
            for r in self.rejects:
                w.writerow([r.file, r.line, r.reason])


class CohortStore:
    """Immutable, per-patient indexed event store.

    Event lists are sorted by (date, system/loinc, code/value, ...), so the
    store does not depend on input row order.
    """

    def __init__(
        self,
        patients: Mapping[str, Patient],
        events: Mapping[str, Mapping[str, tuple]],
        manifest: IngestManifest | None = None,
    ):
        self._patients = MappingProxyType(dict(sorted(patients.items())))
        self._events = MappingProxyType(
            {k: MappingProxyType(dict(events.get(k, {}))) for k in EVENT_KINDS}
        )
        self._dates = MappingProxyType(
            {
                k: MappingProxyType({pid: [e.date for e in evs] for pid, evs in self._events[k].items()})
                for k in EVENT_KINDS
            }
        )
        self.manifest = manifest

    @property
    def patients(self) -> Mapping[str, Patient]:
        return self._patients

    @property
    def patient_ids(self) -> tuple[str, ...]:
        return tuple(self._patients)

    def patient(self, patient_id: str) -> Patient:
        try:
            return self._patients[patient_id]
        except KeyError:
            raise KeyError(f"unknown patient_id {patient_id!r}") from None

    def events(self, patient_id: str, kind: str) -> tuple:
        self.patient(patient_id)
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        return self._events[kind].get(patient_id, ())

    def last_event_date(self, patient_id: str) -> dt.date | None:
        last = None
        for kind in EVENT_KINDS:
            evs = self.events(patient_id, kind)
            if evs and (last is None or evs[-1].date > last):
                last = evs[-1].date
        return last

    def fingerprint(self) -> str:
        """SHA-256 over a canonical dump of the whole index."""
        h = hashlib.sha256()
        for pid, p in self._patients.items():
            h.update(f"P|{pid}|{p.birth_date}|{p.sex.value}|{p.race_ethnicity.value}\n".encode())
            for kind in EVENT_KINDS:
                for e in self._events[kind].get(pid, ()):
                    if kind == "lab":
                        row = f"{kind}|{e.date}|{e.loinc}|{e.value!r}|{e.unit}"
                    else:
                        row = f"{kind}|{e.date}|{e.system}|{e.code}"
                    h.update(row.encode() + b"\n")
        return h.hexdigest()


def query_events(
    store: CohortStore,
    patient_id: str,
    kind: str,
    patterns: Iterable[str] | CodeMatcher = (),
    *,
    system: str | None = None,
    date_range: tuple[dt.date | None, dt.date | None] | None = None,
) -> list:
    """Events of one kind for one patient, date-ascending.

    For coded kinds ``patterns`` are code patterns (``"C18.*"``, ``"159.0"``),
    optionally restricted to one code ``system``. For ``"lab"`` they are LOINC
    codes. The date range is inclusive at both ends; ``None`` means open.
    """
    evs = store.events(patient_id, kind)
    if date_range is not None and evs:
        lo, hi = date_range
        dates = store._dates[kind][patient_id]
        i = 0 if lo is None else bisect_left(dates, lo)
        j = len(dates) if hi is None else bisect_right(dates, hi)
        evs = evs[i:j]
    if kind == "lab":
        loincs = set(patterns)
        return [e for e in evs if e.loinc in loincs]
    matcher = patterns if isinstance(patterns, CodeMatcher) else CodeMatcher(patterns)
    if not matcher:
        return []
    return [e for e in evs if (system is None or e.system == system) and matcher.match(e.code)]


def _parse_date(text: str) -> dt.date:
    return dt.date.fromisoformat(text.strip())


def _read_table(path: Path, header: Sequence[str]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            raise CdmError(f"{path.name}: empty file, expected header {','.join(header)}") from None
        got = [h.strip().lstrip("﻿") for h in got]
        if tuple(got) != tuple(header):
            raise CdmError(f"{path.name}: header mismatch, expected {','.join(header)} got {','.join(got)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            yield lineno, row


def ingest_cohort(source_dir: Path | str, unit_vocabulary: Iterable[str] | None = None) -> CohortStore:
    """Read the five CDM tables in ``source_dir`` into a :class:`CohortStore`."""
    src = Path(source_dir)
    if not src.is_dir():
        raise CdmError(f"data directory not found: {src}")
    for name in TABLES:
        if not (src / f"{name}.csv").is_file():
            raise CdmError(f"missing table file {name}.csv in {src}")
    if unit_vocabulary is None:
        from .units import UNITS

        unit_vocabulary = UNITS
    units = set(unit_vocabulary)

    rejects: list[Reject] = []
    warnings: list[str] = []
    row_counts: dict[str, int] = {}
    accepted: dict[str, int] = {}
    patients: dict[str, Patient] = {}

    fname = "demographic.csv"
    n = 0
    for lineno, row in _read_table(src / fname, TABLES["demographic"]):
        n += 1
        try:
            if len(row) != 4:
                raise ValueError(f"expected 4 fields, got {len(row)}")
            pid = row[0].strip()
            if not pid:
                raise ValueError("empty PATID")
            if pid in patients:
                raise ValueError(f"duplicate PATID {pid}")
            patients[pid] = Patient(pid, _parse_date(row[1]), Sex(row[2].strip()), RaceEthnicity(row[3].strip()))
        except ValueError as exc:
            rejects.append(Reject(fname, lineno, str(exc)))
    row_counts["demographic"] = n
    accepted["demographic"] = len(patients)

    coded: dict[str, dict[str, list]] = {}
    for kind in ("diagnosis", "procedure", "medication"):
        fname = f"{kind}.csv"
        per: dict[str, list] = {}
        n = kept = 0
        width = len(TABLES[kind])
        for lineno, row in _read_table(src / fname, TABLES[kind]):
            n += 1
            try:
                if len(row) != width:
                    raise ValueError(f"expected {width} fields, got {len(row)}")
                if kind == "medication":
                    pid, system, raw, date = row[0].strip(), "RXNORM", row[1], row[2]
                else:
                    pid, system, raw, date = row[0].strip(), row[1].strip().upper(), row[2], row[3]
                if system not in CODE_SYSTEMS[kind]:
                    raise ValueError(f"unknown code system {system!r}")
                code = normalize_code(raw, system)
                when = _parse_date(date)
                p = patients.get(pid)
                if p is None:
                    raise ValueError(f"unknown PATID {pid}")
                if when < p.birth_date:
                    raise ValueError("event date before birth date")
            except ValueError as exc:
                rejects.append(Reject(fname, lineno, str(exc)))
                continue
            per.setdefault(pid, []).append(CodedEvent(when, system, code, pid))
            kept += 1
        coded[kind] = {pid: tuple(sorted(evs)) for pid, evs in per.items()}
        row_counts[kind] = n
        accepted[kind] = kept

    fname = "lab.csv"
    per = {}
    n = kept = 0
    flagged: set[str] = set()
    for lineno, row in _read_table(src / fname, TABLES["lab"]):
        n += 1
        try:
            if len(row) != 5:
                raise ValueError(f"expected 5 fields, got {len(row)}")
            pid, loinc, unit = row[0].strip(), row[1].strip(), row[3].strip()
            if not loinc:
                raise ValueError("empty LOINC")
            value = float(row[2])
            if not math.isfinite(value):
                raise ValueError(f"non-finite value {row[2]!r}")
            when = _parse_date(row[4])
            p = patients.get(pid)
            if p is None:
                raise ValueError(f"unknown PATID {pid}")
            if when < p.birth_date:
                raise ValueError("event date before birth date")
        except ValueError as exc:
            rejects.append(Reject(fname, lineno, str(exc)))
            continue
        if unit not in units and unit not in flagged:
            flagged.add(unit)
        per.setdefault(pid, []).append(LabResult(when, loinc, value, unit, pid))
        kept += 1
    for unit in sorted(flagged):
        warnings.append(f"lab.csv: unregistered unit {unit!r}")
    coded["lab"] = {pid: tuple(sorted(evs)) for pid, evs in per.items()}
    row_counts["lab"] = n
    accepted["lab"] = kept

    manifest = IngestManifest(src.name, row_counts, accepted, rejects, warnings)
    return CohortStore(patients, coded, manifest)
