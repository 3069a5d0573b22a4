"""Cohort characteristics overall and by SAE stratum."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..cdm import RaceEthnicity, Sex
from .design import AnalysisRecord

STRATA = ("overall", "sae0", "sae_pos")

CONTINUOUS = (
    ("Age at last PX (years)", "age_at_last_px"),
    ("cPTG", "cptg"),
    ("Number of SAEs", "sae_count"),
    ("Follow up days", "follow_up_days"),
    ("Number of Bevacizumab PXs", "n_px"),
    ("First PX to Last PX in days", "first_to_last_days"),
)


@dataclass(frozen=True)
class Cell:
    n: int
    value: float  # mean or count
    spread: float  # SD or percent; nan when undefined


@dataclass(frozen=True)
class Row:
    name: str
    kind: str  # "continuous", "categorical" or "header"
    cells: tuple[Cell | None, ...]


@dataclass(frozen=True)
class DescriptiveTable:
    n: tuple[int, int, int]
    rows: tuple[Row, ...]

    def render(self) -> str:
        head = (f"\tOverall (N={self.n[0]:,})\t\t# of SAEs = 0 (N={self.n[1]:,})\t\t"
                f"# of SAE > 0 (N={self.n[2]:,})\t")
        lines = [head, "\tN (or Mean)\t% (or SD)\tN (or Mean)\t% (or SD)\tN (or Mean)\t% (or SD)"]
        for r in self.rows:
            if r.kind == "header":
                lines.append(r.name + "\t" * 6)
                continue
            parts = [r.name]
            for c in r.cells:
                if c is None or c.n == 0:
                    parts += ["", ""]
                elif r.kind == "continuous":
                    parts += [f"{c.value:.2f}", "" if math.isnan(c.spread) else f"{c.spread:.2f}"]
                else:
                    parts += [f"{int(c.value):,}", f"{c.spread:.1f}%"]
            lines.append("\t".join(parts))
        return "\n".join(lines) + "\n"

    def write_csv(self, path: Path | str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["VARIABLE", "KIND", *(f"{s}_{f}" for s in STRATA for f in ("N", "VALUE", "SPREAD"))])
            w.writerow(["N", "count", *(x for n in self.n for x in (n, "", ""))])
            for r in self.rows:
                if r.kind == "header":
                    w.writerow([r.name, "header"] + [""] * 9)
                    continue
                vals = []
                for c in r.cells:
                    vals += ["", "", ""] if c is None else [c.n, repr(c.value), repr(c.spread)]
                w.writerow([r.name, r.kind, *vals])


def mean_sd(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample SD (n - 1 denominator); SD is nan for fewer than two values."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        return math.nan, math.nan
    sd = float(np.std(x, ddof=1)) if x.size > 1 else math.nan
    return float(np.mean(x)), sd


def descriptive_table(records: Sequence[AnalysisRecord]) -> DescriptiveTable:
    if not records:
        raise ValueError("empty cohort")
    groups = (list(records), [r for r in records if r.sae_count == 0], [r for r in records if r.sae_count > 0])
    rows: list[Row] = []

    def cont(label, attr):
        cells = []
        for g in groups:
            m, s = mean_sd([getattr(r, attr) for r in g])
            cells.append(Cell(len(g), m, s))
        rows.append(Row(label, "continuous", tuple(cells)))

    def cat(label, attr, level):
        cells = []
        for g in groups:
            k = sum(1 for r in g if getattr(r, attr) == level)
            cells.append(Cell(len(g), float(k), 100.0 * k / len(g) if g else math.nan))
        rows.append(Row(label, "categorical", tuple(cells)))

    cont(*CONTINUOUS[0])
    rows.append(Row("Gender", "header", ()))
    cat("Female", "sex", Sex.FEMALE)
    cat("Male", "sex", Sex.MALE)
    if any(r.sex is Sex.UNKNOWN for r in records):
        cat("Unknown sex", "sex", Sex.UNKNOWN)
    rows.append(Row("Race/Ethnicity", "header", ()))
    for label, level in (("Non-Hispanic White", RaceEthnicity.NHW), ("Non-Hispanic Black", RaceEthnicity.NHB),
                         ("Hispanic", RaceEthnicity.HISPANIC), ("Other", RaceEthnicity.OTHER),
                         ("Unknown", RaceEthnicity.UNKNOWN)):
        cat(label, "race_ethnicity", level)
    for label, attr in CONTINUOUS[1:]:
        cont(label, attr)
    return DescriptiveTable(tuple(len(g) for g in groups), tuple(rows))
