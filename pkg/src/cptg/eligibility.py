"""Criterion, trial and cohort-level eligibility evaluation."""
from __future__ import annotations

import csv
import datetime as dt
import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cdm import CodeMatcher, CohortStore, Sex, query_events
from .criteria import (
    CodePresence,
    Criterion,
    DemographicCompare,
    LabCompare,
    NonComputable,
    Polarity,
    TrialSpec,
)
from .units import UnitError, convert_unit

log = logging.getLogger(__name__)

# relative tolerance for threshold comparisons; absorbs unit-conversion rounding
COMPARE_RTOL = 1e-9


class Policy(str, Enum):
    MISSING_MEANS_UNMET = "missing_means_unmet"
    MISSING_MEANS_SKIPPED = "missing_means_skipped"


class Verdict(str, Enum):
    MET = "Met"
    NOT_MET = "NotMet"
    SKIPPED = "Skipped"


@dataclass(frozen=True)
class CriterionVerdict:
    verdict: Verdict
    reason: str = ""


@dataclass(frozen=True)
class EligibilityResult:
    patient_id: str
    trial_id: str
    eligible: bool
    verdicts: tuple[CriterionVerdict, ...]
    index_date: dt.date | None
    vacuous: bool = False


def age_in_years(birth: dt.date, on: dt.date) -> int:
    """Completed years of age on a given date."""
    years = on.year - birth.year
    if (on.month, on.day) < (birth.month, birth.day):
        years -= 1
    return years


def compare(value: float, comparator: str, threshold: float, upper: float | None = None) -> bool:
    tol = COMPARE_RTOL * max(1.0, abs(threshold))
    if comparator == "in":
        utol = COMPARE_RTOL * max(1.0, abs(upper))
        return threshold - tol <= value <= upper + utol
    if comparator == ">=":
        return value >= threshold - tol
    if comparator == ">":
        return value > threshold + tol
    if comparator == "<=":
        return value <= threshold + tol
    if comparator == "<":
        return value < threshold - tol
    if comparator == "=":
        return abs(value - threshold) <= tol
    raise ValueError(f"unknown comparator {comparator!r}")


_MATCHERS: dict[tuple[str, ...], CodeMatcher] = {}


def _matcher(patterns: tuple[str, ...]) -> CodeMatcher:
    m = _MATCHERS.get(patterns)
    if m is None:
        m = _MATCHERS[patterns] = CodeMatcher(patterns)
    return m


def _missing(policy: Policy, reason: str) -> tuple[Verdict | None, str]:
    if policy is Policy.MISSING_MEANS_SKIPPED:
        return Verdict.SKIPPED, reason
    return Verdict.NOT_MET, reason


def _raw_verdict(store, patient_id, pred, policy, index_date) -> tuple[Verdict, str]:
    if isinstance(pred, LabCompare):
        obs = query_events(store, patient_id, "lab", pred.loincs)
        if not obs:
            return _missing(policy, "no observation")
        for o in obs:
            try:
                v = convert_unit(o.value, o.unit, pred.unit)
            except UnitError as exc:
                log.warning("patient %s: %s", patient_id, exc)
                return Verdict.SKIPPED, f"unit conversion failed: {exc}"
            if compare(v, pred.comparator, pred.threshold, pred.upper):
                return Verdict.MET, f"observation {o.value:g} {o.unit} on {o.date}"
        return Verdict.NOT_MET, f"none of {len(obs)} observations in range"
    if isinstance(pred, CodePresence):
        hits = query_events(store, patient_id, pred.domain, _matcher(pred.patterns), system=pred.system)
        if pred.present:
            return (Verdict.MET, f"{hits[0].code} on {hits[0].date}") if hits else (Verdict.NOT_MET, "no matching code")
        return (Verdict.NOT_MET, f"{hits[0].code} on {hits[0].date}") if hits else (Verdict.MET, "no matching code")
    if isinstance(pred, DemographicCompare):
        p = store.patient(patient_id)
        if pred.field == "sex":
            if p.sex is Sex.UNKNOWN:
                return _missing(policy, "sex unknown")
            return (Verdict.MET if p.sex.value == pred.value else Verdict.NOT_MET), f"sex {p.sex.value}"
        if index_date is None:
            return _missing(policy, "no index date")
        age = age_in_years(p.birth_date, index_date)
        thr = pred.value if pred.unit in (None, "years") else convert_unit(pred.value, pred.unit, "years")
        return (Verdict.MET if compare(age, pred.comparator, thr) else Verdict.NOT_MET), f"age {age}"
    if isinstance(pred, NonComputable):
        return Verdict.SKIPPED, "non-computable"
    raise TypeError(f"unknown predicate {pred!r}")


def eval_criterion(
    store: CohortStore,
    patient_id: str,
    criterion: Criterion,
    policy: Policy = Policy.MISSING_MEANS_UNMET,
    index_date: dt.date | None = None,
) -> CriterionVerdict:
    """Decide one criterion for one patient.

    Labs follow the any-observation rule over the full history. ``NOT``
    swaps Met and NotMet; Skipped is never inverted.
    """
    store.patient(patient_id)
    verdict, reason = _raw_verdict(store, patient_id, criterion.predicate, Policy(policy), index_date)
    if criterion.negated and verdict is not Verdict.SKIPPED:
        verdict = Verdict.NOT_MET if verdict is Verdict.MET else Verdict.MET
        reason = f"NOT ({reason})"
    return CriterionVerdict(verdict, reason)


def passes(criterion: Criterion, verdict: CriterionVerdict) -> bool:
    """Whether this verdict leaves the patient eligible; Skipped never blocks."""
    if verdict.verdict is Verdict.SKIPPED:
        return True
    met = verdict.verdict is Verdict.MET
    return met if criterion.polarity is Polarity.INCLUDE else not met


def eval_trial(
    store: CohortStore,
    patient_id: str,
    trial: TrialSpec,
    index_date: dt.date | None = None,
    policy: Policy = Policy.MISSING_MEANS_UNMET,
) -> EligibilityResult:
    verdicts = tuple(eval_criterion(store, patient_id, c, policy, index_date) for c in trial.criteria)
    eligible = all(passes(c, v) for c, v in zip(trial.criteria, verdicts))
    vacuous = all(v.verdict is Verdict.SKIPPED for v in verdicts)
    return EligibilityResult(patient_id, trial.trial_id, eligible, verdicts, index_date, vacuous)


@dataclass(frozen=True)
class EligibilityMatrix:
    patients: tuple[str, ...]
    trials: tuple[str, ...]
    e: np.ndarray  # uint8, N x K

    def column(self, trial_id: str) -> np.ndarray:
        return self.e[:, self.trials.index(trial_id)]

    def write_csv(self, path: Path | str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["PATID", *self.trials])
            for pid, row in zip(self.patients, self.e):
                w.writerow([pid, *(int(x) for x in row)])

    @classmethod
    def read_csv(cls, path: Path | str) -> "EligibilityMatrix":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if header[0] != "PATID":
            raise ValueError(f"{path}: first column must be PATID")
        e = np.array([[int(x) for x in r[1:]] for r in body], dtype=np.uint8).reshape(len(body), len(header) - 1)
        return cls(tuple(r[0] for r in body), tuple(header[1:]), e)


def eligibility_matrix(
    store: CohortStore,
    patient_ids: Sequence[str],
    trials: Sequence[TrialSpec],
    index_dates: Mapping[str, dt.date] | None = None,
    policy: Policy = Policy.MISSING_MEANS_UNMET,
    keep_results: bool = False,
) -> EligibilityMatrix | tuple[EligibilityMatrix, list[EligibilityResult]]:
    """N x K binary matrix of per-trial eligibility, rows and columns in input order."""
    if not patient_ids or not trials:
        raise ValueError("patient and trial lists must be non-empty")
    if len(set(patient_ids)) != len(patient_ids):
        raise ValueError("duplicate patient ids")
    if len({t.trial_id for t in trials}) != len(trials):
        raise ValueError("duplicate trial ids")
    index_dates = index_dates or {}
    e = np.zeros((len(patient_ids), len(trials)), dtype=np.uint8)
    results = []
    for i, pid in enumerate(patient_ids):
        idx = index_dates.get(pid)
        for j, t in enumerate(trials):
            r = eval_trial(store, pid, t, idx, policy)
            e[i, j] = r.eligible
            if keep_results:
                results.append(r)
    m = EligibilityMatrix(tuple(patient_ids), tuple(t.trial_id for t in trials), e)
    return (m, results) if keep_results else m


def write_verdicts_jsonl(results: Sequence[EligibilityResult], trials: Sequence[TrialSpec], path: Path | str) -> None:
    by_id = {t.trial_id: t for t in trials}
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            crit = by_id[r.trial_id].criteria
            rec = {
                "patient_id": r.patient_id,
                "trial_id": r.trial_id,
                "eligible": r.eligible,
                "vacuous": r.vacuous,
                "index_date": r.index_date.isoformat() if r.index_date else None,
                "verdicts": [
                    {"line": c.line, "trait": c.trait, "polarity": c.polarity.value,
                     "verdict": v.verdict.value, "reason": v.reason}
                    for c, v in zip(crit, r.verdicts)
                ],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
