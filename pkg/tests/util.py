"""Small builders shared by the test modules."""
from __future__ import annotations

import csv
import datetime as dt
from pathlib import Path

from cptg.cdm import TABLES, CodedEvent, CohortStore, LabResult, Patient, RaceEthnicity, Sex

D = dt.date


def write_tables(root: Path, demographic=(), diagnosis=(), procedure=(), lab=(), medication=()) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    for name, rows in (("demographic", demographic), ("diagnosis", diagnosis), ("procedure", procedure),
                       ("lab", lab), ("medication", medication)):
        with open(root / f"{name}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TABLES[name])
            w.writerows(rows)
    return root


class StoreBuilder:
    """Assemble a CohortStore in memory, one patient at a time."""

    def __init__(self):
        self.patients: dict[str, Patient] = {}
        self.events: dict[str, dict[str, list]] = {k: {} for k in ("diagnosis", "procedure", "medication", "lab")}

    def patient(self, pid, birth=D(1960, 1, 1), sex=Sex.FEMALE, race=RaceEthnicity.NHW):
        self.patients[pid] = Patient(pid, birth, Sex(sex), RaceEthnicity(race))
        return self

    def dx(self, pid, code, date, system="ICD10CM"):
        self.events["diagnosis"].setdefault(pid, []).append(CodedEvent(date, system, code.replace(".", ""), pid))
        return self

    def px(self, pid, code, date, system="HCPCS"):
        self.events["procedure"].setdefault(pid, []).append(CodedEvent(date, system, code, pid))
        return self

    def med(self, pid, code, date):
        self.events["medication"].setdefault(pid, []).append(CodedEvent(date, "RXNORM", code, pid))
        return self

    def lab(self, pid, loinc, value, unit, date=D(2018, 1, 1)):
        self.events["lab"].setdefault(pid, []).append(LabResult(date, loinc, float(value), unit, pid))
        return self

    def build(self) -> CohortStore:
        ev = {k: {pid: tuple(sorted(v)) for pid, v in per.items()} for k, per in self.events.items()}
        return CohortStore(self.patients, ev)


def treated(b: StoreBuilder, pid, d0=D(2017, 1, 10), px_dates=(D(2017, 2, 1),), **kw) -> StoreBuilder:
    """A target-population patient: cancer diagnosis, then treatment on ``px_dates``."""
    b.patient(pid, **kw).dx(pid, "C18.7", d0)
    for d in px_dates:
        b.px(pid, "J9035", d)
    return b


def random_treated_cohort(rng, n: int) -> CohortStore:
    """``n`` treated patients with scattered SAE and non-SAE diagnoses around treatment."""
    b = StoreBuilder()
    codes = [("I60.1", "ICD10CM"), ("578.0", "ICD9CM"), ("R04.0", "ICD10CM"), ("K92.2", "ICD10CM"),
             ("I21.4", "ICD10CM"), ("428.3", "ICD9CM")]
    for i in range(n):
        pid = f"P{i:04d}"
        d0 = D(2012, 1, 1) + dt.timedelta(days=rng.randrange(2000))
        px = sorted({d0 + dt.timedelta(days=rng.randint(1, 400)) for _ in range(rng.randint(1, 6))})
        treated(b, pid, d0=d0, px_dates=px)
        for _ in range(rng.randrange(8)):
            code, system = rng.choice(codes)
            b.dx(pid, code, px[0] + dt.timedelta(days=rng.randint(-30, 800)), system)
    return b.build()


def read_bytes_tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# --------------------------------------------------------------------------
# random, valid trial files in loosely formatted text

_LOINCS = ("1920-8", "1742-6", "1975-2", "2160-0", "751-8", "26499-4", "777-3", "718-7", "6301-6")
_UNITS = ("U/L", "mg/dL", "g/dL", "/mm3", "x10^3/uL", "ratio", "%", "mmol/L")
_TRAITS = ("age", "AST", "platelets", "unstable angina", 'say "when"', "back\\slash", "x,y", "IN", "NOT")
_CODES = {"ICD9CM": ("410.*", "411.1", "153"), "ICD10CM": ("C18.*", "I21.4", "L98.4*", "D68.9"),
          "HCPCS": ("J9035", "C9*"), "RXNORM": ("337521", "1234*")}


def _q(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _number(rng) -> str:
    v = rng.choice([rng.randint(-5, 500), round(rng.uniform(0, 100), rng.randint(0, 4)), rng.uniform(0, 1e6)])
    style = rng.randrange(4)
    if style == 0:
        return repr(float(v))
    if style == 1 and float(v).is_integer():
        return str(int(v))
    if style == 2:
        return f"{float(v):e}"
    return repr(v)


def random_trial_text(rng, trial_id: str) -> str:
    sp = lambda: " " * rng.randint(1, 3)  # noqa: E731
    lines = []
    if rng.random() < 0.5:
        lines.append("# generated " + trial_id)
    lines.append(f"TRIAL{sp()}{trial_id}{sp()}PHASE{sp()}{rng.choice(['1', '1/2', '2', '3', 'UNKNOWN'])}")
    for _ in range(rng.randint(1, 12)):
        if rng.random() < 0.15:
            lines.append("")
        head = rng.choice(["INCLUDE", "EXCLUDE"]) + (" NOT" if rng.random() < 0.2 else "")
        trait = rng.choice(_TRAITS)
        label = _q(trait) if (rng.random() < 0.3 or not trait.replace("\\", "").isalnum()) else trait
        kind = rng.randrange(6)
        if kind == 0:
            body = f"DEMOGRAPHIC age_at_index {rng.choice(['<', '<=', '>', '>=', '='])} {_number(rng)}"
            body += rng.choice(["", " years", " months"])
        elif kind == 1:
            body = f"DEMOGRAPHIC sex = {rng.choice(['Female', 'Male'])}"
        elif kind == 2:
            codes = ",".join(rng.sample(_LOINCS, rng.randint(1, 3)))
            body = f"LAB loinc={codes} {rng.choice(['<', '<=', '>', '>=', '='])}{sp()}{_number(rng)} {rng.choice(_UNITS)}"
        elif kind == 3:
            codes = ",".join(rng.sample(_LOINCS, rng.randint(1, 2)))
            a, b = sorted([rng.uniform(0, 50), rng.uniform(0, 50)])
            body = f"LAB loinc={codes} IN [{a!r} ,{b!r}] {rng.choice(_UNITS)}"
        elif kind == 4:
            dom, systems = rng.choice([("DIAGNOSIS", ("ICD9CM", "ICD10CM")), ("PROCEDURE", ("HCPCS", "RXNORM")),
                                       ("MEDICATION", ("RXNORM",))])
            system = rng.choice(systems)
            codes = ",".join(rng.sample(_CODES[system], rng.randint(1, min(2, len(_CODES[system])))))
            body = f"{dom} system={system} codes={codes} {rng.choice(['PRESENT', 'ABSENT'])}"
        else:
            body = "NONCOMPUTABLE " + _q(rng.choice(["ECOG 0-1", "investigator's judgement", 'a "quoted" bit', ""]))
        tail = "   # note" if rng.random() < 0.2 else ""
        lines.append(f"{head}{sp()}trait={label}{sp()}{body}{tail}")
    return "\n".join(lines) + "\n"


# acceptance verdict lines, keyed by criterion number; printed by conftest at the end of the run
ACCEPTANCE: dict[int, str] = {}
