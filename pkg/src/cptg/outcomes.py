"""Target-population selection, treatment exposure and SAE counting."""
from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .cdm import CodeMatcher, CohortStore, _pattern_key, normalize_code, query_events

CRC_ICD9 = ("153.*", "154.*", "159.0")
CRC_ICD10 = ("C18.*", "C19.*", "C20.*", "C26.0")
BEV_HCPCS = ("C9257", "J9035")
BEV_RXNORM = ("337521",)
WINDOW_DAYS = 180


@dataclass(frozen=True)
class CodeSet:
    """Code patterns per coding system."""

    by_system: Mapping[str, tuple[str, ...]]

    def matchers(self) -> dict[str, CodeMatcher]:
        return {s: CodeMatcher(p) for s, p in self.by_system.items()}


CRC_CODES = CodeSet({"ICD9CM": CRC_ICD9, "ICD10CM": CRC_ICD10})
BEV_CODES = CodeSet({"HCPCS": BEV_HCPCS, "RXNORM": BEV_RXNORM})


@dataclass(frozen=True)
class SaeEntry:
    name: str
    icd9: str
    icd10: str

    def pattern(self, system: str) -> str:
        return self.icd9 if system == "ICD9CM" else self.icd10


def _as_pattern(raw: str, prefix_three_char: bool) -> str:
    raw = raw.strip()
    if prefix_three_char and "." not in raw and "*" not in raw and len(raw) == 3:
        return raw + ".*"
    return raw


class SaeCodeMap:
    """SAE name -> (ICD-9-CM, ICD-10-CM) pattern rows.

    Bare three-character codes ("431", "I60") are treated as category
    prefixes. Each diagnosis resolves to the single most specific row
    (exact beats prefix, longer prefix beats shorter), so "578.0" is
    Hematemesis and not also Gastrointestinal hemorrhage.
    """

    def __init__(self, entries: Iterable[SaeEntry], prefix_three_char: bool = True):
        self.entries = tuple(
            SaeEntry(e.name, _as_pattern(e.icd9, prefix_three_char), _as_pattern(e.icd10, prefix_three_char))
            for e in entries
        )
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("SAE names must be unique")
        self._keys = {
            system: [(_pattern_key(e.pattern(system)), e.name) for e in self.entries if e.pattern(system)]
            for system in ("ICD9CM", "ICD10CM")
        }
        self.matchers = {
            s: CodeMatcher([e.pattern(s) for e in self.entries if e.pattern(s)]) for s in ("ICD9CM", "ICD10CM")
        }

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def load(cls, path: Path | str | None = None, prefix_three_char: bool = True) -> "SaeCodeMap":
        if path is None:
            text = resources.files("cptg").joinpath("data/sae_map.csv").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        rows = list(csv.reader(text.splitlines()))
        if [h.strip() for h in rows[0]] != ["SAE", "ICD9CM", "ICD10CM"]:
            raise ValueError("SAE map header must be SAE,ICD9CM,ICD10CM")
        return cls((SaeEntry(r[0].strip(), r[1], r[2]) for r in rows[1:] if r), prefix_three_char)

    def resolve(self, system: str, code: str) -> str | None:
        """Name of the most specific row matching a normalized code, or None."""
        best, best_rank = None, None
        code = normalize_code(code)
        for (stem, is_prefix), name in self._keys.get(system, ()):
            if (code.startswith(stem) if is_prefix else code == stem):
                rank = (0 if is_prefix else 1, len(stem))
                if best_rank is None or rank > best_rank:
                    best, best_rank = name, rank
        return best


@dataclass(frozen=True)
class ExposureSummary:
    patient_id: str
    first_px_date: dt.date
    last_px_date: dt.date
    n_px: int
    first_to_last_days: int
    follow_up_days: int


@dataclass(frozen=True)
class SaeEvent:
    name: str
    code: str
    date: dt.date


@dataclass(frozen=True)
class OutcomeRecord:
    patient_id: str
    sae_count: int
    sae_events: tuple[SaeEvent, ...]


def _dates_matching(store, pid, kind, codeset: CodeSet) -> list[dt.date]:
    out = []
    for system, m in codeset.matchers().items():
        out.extend(e.date for e in query_events(store, pid, kind, m, system=system))
    return out


def earliest_diagnosis(store: CohortStore, patient_id: str, crc_codes: CodeSet = CRC_CODES) -> dt.date | None:
    dates = _dates_matching(store, patient_id, "diagnosis", crc_codes)
    return min(dates) if dates else None


def treatment_dates(store: CohortStore, patient_id: str, bev_codes: CodeSet = BEV_CODES) -> list[dt.date]:
    """Distinct administration dates from procedure and medication tables."""
    dates = set(_dates_matching(store, patient_id, "procedure", bev_codes))
    if "RXNORM" in bev_codes.by_system:
        dates.update(_dates_matching(store, patient_id, "medication",
                                     CodeSet({"RXNORM": bev_codes.by_system["RXNORM"]})))
    return sorted(dates)


def qualifying_treatment_dates(store, patient_id, crc_codes: CodeSet = CRC_CODES,
                               bev_codes: CodeSet = BEV_CODES) -> list[dt.date]:
    """Treatment dates strictly after the earliest cancer diagnosis."""
    d0 = earliest_diagnosis(store, patient_id, crc_codes)
    if d0 is None:
        return []
    return [d for d in treatment_dates(store, patient_id, bev_codes) if d > d0]


def select_target_population(store: CohortStore, crc_codes: CodeSet = CRC_CODES,
                             bev_codes: CodeSet = BEV_CODES) -> list[str]:
    """Patients with a cancer diagnosis followed (strictly later) by treatment."""
    return [pid for pid in store.patient_ids if qualifying_treatment_dates(store, pid, crc_codes, bev_codes)]


def exposure_summary(store: CohortStore, patient_id: str, window_days: int = WINDOW_DAYS,
                     crc_codes: CodeSet = CRC_CODES, bev_codes: CodeSet = BEV_CODES) -> ExposureSummary:
    dates = qualifying_treatment_dates(store, patient_id, crc_codes, bev_codes)
    if not dates:
        raise ValueError(f"patient {patient_id} is not in the target population")
    first, last = dates[0], dates[-1]
    last_seen = store.last_event_date(patient_id)
    follow = min(max((last_seen - last).days, 0), window_days)
    return ExposureSummary(patient_id, first, last, len(dates), (last - first).days, follow)


def count_saes(store: CohortStore, patient_id: str, sae_map: SaeCodeMap,
               exposure: ExposureSummary, window_days: int = WINDOW_DAYS) -> OutcomeRecord:
    """SAE diagnoses with first_px < date <= last_px + window, one per (name, date)."""
    lo = exposure.first_px_date + dt.timedelta(days=1)
    hi = exposure.last_px_date + dt.timedelta(days=window_days)
    seen: dict[tuple[str, dt.date], SaeEvent] = {}
    if hi >= lo and len(sae_map):
        for system, m in sae_map.matchers.items():
            for ev in query_events(store, patient_id, "diagnosis", m, system=system, date_range=(lo, hi)):
                name = sae_map.resolve(system, ev.code)
                if name is not None and (name, ev.date) not in seen:
                    seen[(name, ev.date)] = SaeEvent(name, ev.code, ev.date)
    events = tuple(sorted(seen.values(), key=lambda s: (s.date, s.name)))
    return OutcomeRecord(patient_id, len(events), events)


@dataclass(frozen=True)
class PatientOutcome:
    exposure: ExposureSummary
    outcome: OutcomeRecord


def compute_outcomes(store: CohortStore, patient_ids: Sequence[str], sae_map: SaeCodeMap,
                     window_days: int = WINDOW_DAYS) -> list[PatientOutcome]:
    res = []
    for pid in sorted(patient_ids):
        ex = exposure_summary(store, pid, window_days)
        res.append(PatientOutcome(ex, count_saes(store, pid, sae_map, ex, window_days)))
    return res


OUTCOME_HEADER = ["PATID", "SAE_COUNT", "N_PX", "FOLLOW_UP_DAYS", "FIRST_PX", "LAST_PX"]


def write_outcomes(rows: Sequence[PatientOutcome], path: Path | str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OUTCOME_HEADER)
        for r in rows:
            ex = r.exposure
            w.writerow([ex.patient_id, r.outcome.sae_count, ex.n_px, ex.follow_up_days,
                        ex.first_px_date.isoformat(), ex.last_px_date.isoformat()])


def read_outcomes(path: Path | str) -> list[PatientOutcome]:
    """Read an outcome export back; SAE event detail is not part of the export."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader) != OUTCOME_HEADER:
            raise ValueError(f"{path}: unexpected outcome header")
        for r in reader:
            first, last = dt.date.fromisoformat(r[4]), dt.date.fromisoformat(r[5])
            ex = ExposureSummary(r[0], first, last, int(r[2]), (last - first).days, int(r[3]))
            out.append(PatientOutcome(ex, OutcomeRecord(r[0], int(r[1]), ())))
    return out
