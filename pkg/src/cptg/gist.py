"""sGIST / mGIST proportions and the composite patient-trial generalizability score.

Scores are proportions of the target population: sGIST for one trait (all
computable criteria carrying that label), mGIST for the joint eligibility
over every computable criterion of a trial. The per-patient score is

    cPTG_i = (1/K) * sum_j e_ij * g_j

with ``e`` the eligibility matrix and ``g`` the per-trial mGIST vector.
"""
from __future__ import annotations

import csv
import datetime as dt
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cdm import CohortStore
from .criteria import Criterion, TrialSpec
from .eligibility import EligibilityMatrix, Policy, eval_criterion, eval_trial, passes


def _pass_vector(store, cohort, criteria, policy, index_dates) -> np.ndarray:
    index_dates = index_dates or {}
    ok = np.ones(len(cohort), dtype=bool)
    for i, pid in enumerate(cohort):
        idx = index_dates.get(pid)
        for c in criteria:
            if not passes(c, eval_criterion(store, pid, c, policy, idx)):
                ok[i] = False
                break
    return ok


def sgist(
    store: CohortStore,
    criterion: Criterion | Sequence[Criterion],
    cohort: Sequence[str],
    policy: Policy = Policy.MISSING_MEANS_UNMET,
    index_dates: Mapping[str, dt.date] | None = None,
) -> float:
    """Fraction of ``cohort`` left eligible by one criterion (or one trait's criteria)."""
    crits = [criterion] if isinstance(criterion, Criterion) else list(criterion)
    if not crits:
        raise ValueError("no criteria given")
    for c in crits:
        if not c.computable:
            raise ValueError(f"criterion for trait {c.trait!r} is not computable")
    if not cohort:
        raise ValueError("empty target cohort")
    return float(np.mean(_pass_vector(store, cohort, crits, policy, index_dates)))


def mgist(
    store: CohortStore,
    trial: TrialSpec,
    cohort: Sequence[str],
    policy: Policy = Policy.MISSING_MEANS_UNMET,
    index_dates: Mapping[str, dt.date] | None = None,
) -> float:
    """Fraction of ``cohort`` jointly eligible for ``trial``."""
    if not cohort:
        raise ValueError("empty target cohort")
    index_dates = index_dates or {}
    ok = [eval_trial(store, pid, trial, index_dates.get(pid), policy).eligible for pid in cohort]
    return float(np.mean(np.asarray(ok, dtype=np.float64)))


def mgist_from_matrix(matrix: EligibilityMatrix) -> np.ndarray:
    """Column means of the eligibility matrix; equal to :func:`mgist` per trial."""
    return matrix.e.astype(np.float64).mean(axis=0)


@dataclass
class GistReport:
    trial_id: str
    sgist: dict[str, float]
    mgist: float
    n_traits_total: int
    n_traits_computable: int
    target_population_size: int
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "trial_id": self.trial_id,
            "sgist": dict(sorted(self.sgist.items())),
            "mgist": self.mgist,
            "n_traits_total": self.n_traits_total,
            "n_traits_computable": self.n_traits_computable,
            "target_population_size": self.target_population_size,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GistReport":
        return cls(d["trial_id"], dict(d["sgist"]), float(d["mgist"]), int(d["n_traits_total"]),
                   int(d["n_traits_computable"]), int(d["target_population_size"]), list(d.get("warnings", [])))


def gist_report(
    store: CohortStore,
    trial: TrialSpec,
    cohort: Sequence[str],
    policy: Policy = Policy.MISSING_MEANS_UNMET,
    index_dates: Mapping[str, dt.date] | None = None,
    matrix: EligibilityMatrix | None = None,
) -> GistReport:
    """Per-trait sGIST and trial mGIST over the target cohort.

    When ``matrix`` is given, mGIST is read off its column instead of
    re-evaluating the trial.
    """
    by_trait: dict[str, list[Criterion]] = {}
    for c in trial.criteria:
        by_trait.setdefault(c.trait, [])
        if c.computable:
            by_trait[c.trait].append(c)
    scores = {
        trait: sgist(store, crits, cohort, policy, index_dates)
        for trait, crits in by_trait.items()
        if crits
    }
    if matrix is not None:
        if tuple(cohort) != matrix.patients:
            raise ValueError("matrix patient order differs from cohort")
        g = float(mgist_from_matrix(matrix)[matrix.trials.index(trial.trial_id)])
    else:
        g = mgist(store, trial, cohort, policy, index_dates)
    warnings = []
    if not scores:
        warnings.append(f"{trial.trial_id}: no computable criteria, eligibility is vacuous")
    return GistReport(trial.trial_id, scores, g, len(by_trait), len(scores), len(cohort), warnings)


def write_gist_reports(reports: Sequence[GistReport], out_dir: Path | str) -> None:
    out = Path(out_dir)
    (out / "gist_report.json").write_text(
        json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    with open(out / "gist_table.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["TRIAL_ID", "TOTAL_TRAITS", "COMPUTABLE_TRAITS", "MGIST"])
        for r in reports:
            w.writerow([r.trial_id, r.n_traits_total, r.n_traits_computable, repr(r.mgist)])


def read_gist_reports(path: Path | str) -> list[GistReport]:
    return [GistReport.from_dict(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]


@dataclass(frozen=True)
class CptgVector:
    patients: tuple[str, ...]
    trials: tuple[str, ...]
    scores: np.ndarray

    @property
    def k(self) -> int:
        return len(self.trials)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.patients, self.scores.tolist()))

    def write_csv(self, path: Path | str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["PATID", "CPTG"])
            for pid, s in zip(self.patients, self.scores.tolist()):
                w.writerow([pid, repr(s)])

    @classmethod
    def read_csv(cls, path: Path | str, trials: Sequence[str] = ()) -> "CptgVector":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))[1:]
        return cls(tuple(r[0] for r in rows), tuple(trials), np.array([float(r[1]) for r in rows]))


def cptg(matrix: EligibilityMatrix | np.ndarray, g: Sequence[float] | np.ndarray,
         patients: Sequence[str] | None = None, trials: Sequence[str] | None = None) -> CptgVector:
    """Composite score: mean over trials of eligibility times trial mGIST."""
    if isinstance(matrix, EligibilityMatrix):
        e, patients, trials = matrix.e, matrix.patients, matrix.trials
    else:
        e = np.asarray(matrix)
        if e.ndim == 1:
            e = e[None, :]
    g = np.asarray(g, dtype=np.float64)
    if e.ndim != 2 or g.ndim != 1 or e.shape[1] != g.shape[0]:
        raise ValueError(f"dimension mismatch: matrix {e.shape} vs g {g.shape}")
    k = g.shape[0]
    if k < 1:
        raise ValueError("need at least one trial")
    scores = (e.astype(np.float64) * g).sum(axis=1) / k
    patients = tuple(patients) if patients is not None else tuple(str(i) for i in range(e.shape[0]))
    trials = tuple(trials) if trials is not None else tuple(f"T{j + 1}" for j in range(k))
    return CptgVector(patients, trials, scores)
