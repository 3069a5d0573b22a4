"""Per-patient analysis records and the regression design matrices."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..cdm import CohortStore, RaceEthnicity, Sex
from ..outcomes import PatientOutcome
from .zinb import ZinbSpec

COLUMNS = ("intercept", "age", "female", "hispanic", "nhb", "other", "unknown", "follow_up_days", "n_px", "cptg")

LABELS = {
    "intercept": "Intercept",
    "age": "Age at last Bevacizumab PX",
    "female": "Female vs Male",
    "hispanic": "Hispanic vs NHW",
    "nhb": "NHB vs NHW",
    "other": "Other vs NHW",
    "unknown": "Unknown vs NHW",
    "follow_up_days": "Follow up day",
    "n_px": "Number of Bevacizumab PXs",
    "cptg": "cPTG score",
}

_RACE_DUMMY = {
    RaceEthnicity.HISPANIC: "hispanic",
    RaceEthnicity.NHB: "nhb",
    RaceEthnicity.OTHER: "other",
    RaceEthnicity.UNKNOWN: "unknown",
}


@dataclass(frozen=True)
class AnalysisRecord:
    patient_id: str
    age_at_last_px: float
    sex: Sex
    race_ethnicity: RaceEthnicity
    follow_up_days: int
    n_px: int
    first_to_last_days: int
    cptg: float
    sae_count: int


def age_years(birth, on) -> float:
    return (on - birth).days / 365.25


def analysis_records(store: CohortStore, outcomes: Sequence[PatientOutcome],
                     cptg: Mapping[str, float]) -> list[AnalysisRecord]:
    recs = []
    for o in outcomes:
        ex = o.exposure
        p = store.patient(ex.patient_id)
        recs.append(AnalysisRecord(
            ex.patient_id, age_years(p.birth_date, ex.last_px_date), p.sex, p.race_ethnicity,
            ex.follow_up_days, ex.n_px, ex.first_to_last_days, float(cptg[ex.patient_id]), o.outcome.sae_count,
        ))
    return recs


def design_row(age: float, sex: Sex, race: RaceEthnicity, follow_up_days: float, n_px: float,
               cptg: float) -> list[float]:
    if sex not in (Sex.FEMALE, Sex.MALE):
        raise ValueError(f"cannot code sex {sex.value!r}")
    row = dict.fromkeys(COLUMNS, 0.0)
    row.update(intercept=1.0, age=float(age), female=float(sex is Sex.FEMALE),
               follow_up_days=float(follow_up_days), n_px=float(n_px), cptg=float(cptg))
    dummy = _RACE_DUMMY.get(RaceEthnicity(race))
    if dummy:
        row[dummy] = 1.0
    return [row[c] for c in COLUMNS]


def build_design_matrices(records: Sequence[AnalysisRecord]) -> ZinbSpec:
    """Same covariates in both parts; references Male and NHW."""
    rows = []
    for r in records:
        try:
            rows.append(design_row(r.age_at_last_px, r.sex, r.race_ethnicity, r.follow_up_days, r.n_px, r.cptg))
        except ValueError as exc:
            raise ValueError(f"patient {r.patient_id}: {exc}") from None
    X = np.array(rows, dtype=np.float64).reshape(len(rows), len(COLUMNS))
    y = np.array([r.sae_count for r in records], dtype=np.int64)
    return ZinbSpec(y, X, X.copy(), COLUMNS, COLUMNS)


def write_records(records: Sequence[AnalysisRecord], path: Path | str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["PATID", "AGE_AT_LAST_PX", "SEX", "RACE_ETH", "FOLLOW_UP_DAYS", "N_PX",
                    "FIRST_TO_LAST_DAYS", "CPTG", "SAE_COUNT"])
        for r in records:
            w.writerow([r.patient_id, repr(r.age_at_last_px), r.sex.value, r.race_ethnicity.value,
                        r.follow_up_days, r.n_px, r.first_to_last_days, repr(r.cptg), r.sae_count])


def read_records(path: Path | str) -> list[AnalysisRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "PATID":
        raise ValueError(f"{path}: not an analysis record export")
    return [AnalysisRecord(r[0], float(r[1]), Sex(r[2]), RaceEthnicity(r[3]), int(r[4]), int(r[5]), int(r[6]),
                           float(r[7]), int(r[8])) for r in rows[1:]]
