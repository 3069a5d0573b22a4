"""Computable eligibility-criteria language.

One file per trial, line oriented, ``#`` starts a comment::

    TRIAL SYN-P3-001 PHASE 3
    INCLUDE trait=platelets LAB loinc=26515-7,777-3,778-1 >= 1500 /mm3
    INCLUDE trait=age DEMOGRAPHIC age_at_index >= 18 years
    INCLUDE trait=sex DEMOGRAPHIC sex = Female
    INCLUDE trait=bilirubin LAB loinc=1975-2 IN [0.1,1.5] mg/dL
    EXCLUDE trait="unstable angina" DIAGNOSIS system=ICD10CM codes=I20.0 PRESENT
    EXCLUDE NOT trait=consent NONCOMPUTABLE "Patient unable to give consent"

Each criterion line carries exactly one predicate. ``NOT`` flips the
predicate's truth value when evaluated.
"""
from __future__ import annotations

import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence, Union

from .cdm import _pattern_key
from .units import UNITS

COMPARATORS = ("<", "<=", ">", ">=", "=")
DEMOGRAPHIC_FIELDS = ("age_at_index", "sex")
SEX_VALUES = ("Female", "Male")
CODE_DOMAINS = {
    "DIAGNOSIS": ("diagnosis", ("ICD9CM", "ICD10CM")),
    "PROCEDURE": ("procedure", ("HCPCS", "RXNORM")),
    "MEDICATION": ("medication", ("RXNORM",)),
}


class Polarity(str, Enum):
    INCLUDE = "Include"
    EXCLUDE = "Exclude"


class Phase(str, Enum):
    P1 = "1"
    P1_2 = "1/2"
    P2 = "2"
    P3 = "3"
    UNKNOWN = "UNKNOWN"


@dataclass(frozen=True)
class DemographicCompare:
    field: str
    comparator: str
    value: Union[float, str]
    unit: str | None = None


@dataclass(frozen=True)
class LabCompare:
    """``comparator`` is one of COMPARATORS or ``"in"`` (closed range [threshold, upper])."""

    loincs: tuple[str, ...]
    comparator: str
    threshold: float
    unit: str
    upper: float | None = None


@dataclass(frozen=True)
class CodePresence:
    domain: str
    system: str
    patterns: tuple[str, ...]
    present: bool


@dataclass(frozen=True)
class NonComputable:
    reason: str


Predicate = Union[DemographicCompare, LabCompare, CodePresence, NonComputable]


@dataclass(frozen=True)
class Criterion:
    polarity: Polarity
    trait: str
    negated: bool
    predicate: Predicate
    source_text: str = field(default="", compare=False)
    line: int = field(default=0, compare=False)

    @property
    def computable(self) -> bool:
        return not isinstance(self.predicate, NonComputable)


@dataclass(frozen=True)
class TrialSpec:
    trial_id: str
    phase: Phase
    criteria: tuple[Criterion, ...]

    def computable_criteria(self) -> tuple[Criterion, ...]:
        return tuple(c for c in self.criteria if c.computable)

    @property
    def traits(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(c.trait for c in self.criteria))


@dataclass(frozen=True)
class Diagnostic:
    line: int
    column: int
    message: str
    expected: str | None = None

    def __str__(self) -> str:
        hint = f" (expected {self.expected})" if self.expected else ""
        return f"{self.line}:{self.column}: {self.message}{hint}"


class DslSyntaxError(ValueError):
    def __init__(self, errors: Sequence[Diagnostic], source: str | None = None):
        self.errors = list(errors)
        self.source = source
        prefix = f"{source}:" if source else ""
        super().__init__("\n".join(prefix + str(e) for e in self.errors))


# --------------------------------------------------------------------------
# lexer

_TOKEN = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<comment>\#.*)
  | (?P<string>"(?:[^"\\]|\\.)*")
  | (?P<badstring>"[^"]*$)
  | (?P<op>[<>=!]+)
  | (?P<punct>[\[\],])
  | (?P<word>[^\s"\[\],=<>!\#]+)
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    col: int


class _LineError(Exception):
    def __init__(self, col: int, message: str, expected: str | None = None):
        self.diag = (col, message, expected)


def _tokenize(line: str) -> list[_Tok]:
    toks, pos = [], 0
    while pos < len(line):
        m = _TOKEN.match(line, pos)
        if m is None:  # pragma: no cover - the word class is a catch-all
            raise _LineError(pos + 1, f"unexpected character {line[pos]!r}")
        kind = m.lastgroup
        if kind == "badstring":
            raise _LineError(pos + 1, "unterminated string", '"')
        if kind not in ("ws", "comment"):
            toks.append(_Tok(kind, m.group(), pos + 1))
        pos = m.end()
    return toks


class _Cursor:
    def __init__(self, toks: list[_Tok], line: str):
        self.toks, self.i, self.line = toks, 0, line

    def peek(self) -> _Tok | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def _eol_col(self) -> int:
        return len(self.line.rstrip()) + 1

    def next(self, expected: str) -> _Tok:
        t = self.peek()
        if t is None:
            raise _LineError(self._eol_col(), "unexpected end of line", expected)
        self.i += 1
        return t

    def word(self, expected: str, choices: Iterable[str] | None = None) -> _Tok:
        t = self.next(expected)
        if t.kind != "word" or (choices is not None and t.text not in choices):
            raise _LineError(t.col, f"unexpected token {t.text!r}", expected)
        return t

    def punct(self, ch: str) -> _Tok:
        t = self.next(repr(ch))
        if t.text != ch:
            raise _LineError(t.col, f"unexpected token {t.text!r}", repr(ch))
        return t

    def keyvalue(self, key: str) -> _Tok:
        t = self.word(f"{key}=")
        if t.text != key:
            raise _LineError(t.col, f"unexpected token {t.text!r}", f"{key}=")
        eq = self.next("'='")
        if eq.text != "=":
            raise _LineError(eq.col, f"unexpected token {eq.text!r}", "'='")
        return t

    def comparator(self) -> _Tok:
        t = self.next("comparator (< <= > >= =)")
        if t.kind != "op":
            raise _LineError(t.col, f"unexpected token {t.text!r}", "comparator (< <= > >= =)")
        if t.text not in COMPARATORS:
            raise _LineError(t.col, f"invalid comparator {t.text!r}", "comparator (< <= > >= =)")
        return t

    def number(self) -> float:
        t = self.next("number")
        try:
            v = float(t.text) if t.kind == "word" else None
        except ValueError:
            v = None
        if v is None or not math.isfinite(v):
            raise _LineError(t.col, f"expected a number, got {t.text!r}", "number")
        return v

    def code_list(self, what: str) -> tuple[str, ...]:
        items = [self.word(what).text]
        while (t := self.peek()) is not None and t.text == ",":
            self.i += 1
            items.append(self.word(what).text)
        return tuple(items)

    def unit(self) -> str:
        t = self.word("unit")
        if t.text not in UNITS:
            raise _LineError(t.col, f"unknown unit {t.text!r}", "registered unit")
        return t.text

    def end(self) -> None:
        t = self.peek()
        if t is not None:
            raise _LineError(t.col, f"unexpected trailing token {t.text!r}", "end of line")


def _unquote(text: str) -> str:
    return re.sub(r"\\(.)", r"\1", text[1:-1])


def _quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _parse_predicate(cur: _Cursor) -> Predicate:
    head = cur.word("predicate (DEMOGRAPHIC, LAB, DIAGNOSIS, PROCEDURE, MEDICATION, NONCOMPUTABLE)",
                    ("DEMOGRAPHIC", "LAB", "NONCOMPUTABLE", *CODE_DOMAINS))
    kw = head.text
    if kw == "DEMOGRAPHIC":
        fld = cur.word("demographic field (age_at_index, sex)", DEMOGRAPHIC_FIELDS).text
        cmp_tok = cur.comparator()
        if fld == "sex":
            if cmp_tok.text != "=":
                raise _LineError(cmp_tok.col, "sex supports only '='", "'='")
            value = cur.word("sex value (Female, Male)", SEX_VALUES).text
            return DemographicCompare(fld, "=", value, None)
        value = cur.number()
        unit = None
        if cur.peek() is not None:
            t = cur.word("age unit (years, months)", ("years", "months"))
            unit = t.text
        return DemographicCompare(fld, cmp_tok.text, value, unit)
    if kw == "LAB":
        cur.keyvalue("loinc")
        loincs = cur.code_list("LOINC code")
        t = cur.peek()
        if t is not None and t.kind == "word" and t.text == "IN":
            cur.i += 1
            br = cur.punct("[")
            lo = cur.number()
            cur.punct(",")
            hi = cur.number()
            cur.punct("]")
            if lo > hi:
                raise _LineError(br.col, f"range lower bound {lo:g} exceeds upper bound {hi:g}")
            return LabCompare(loincs, "in", lo, cur.unit(), hi)
        cmp_tok = cur.comparator()
        value = cur.number()
        return LabCompare(loincs, cmp_tok.text, value, cur.unit())
    if kw in CODE_DOMAINS:
        domain, systems = CODE_DOMAINS[kw]
        cur.keyvalue("system")
        system = cur.word(f"code system ({', '.join(systems)})", systems).text
        cur.keyvalue("codes")
        start = cur.peek()
        patterns = cur.code_list("code pattern")
        for p in patterns:
            try:
                _pattern_key(p)
            except ValueError as exc:
                raise _LineError(start.col if start else 0, str(exc), "code pattern like C18.* or 159.0")
        presence = cur.word("PRESENT or ABSENT", ("PRESENT", "ABSENT")).text
        return CodePresence(domain, system, patterns, presence == "PRESENT")
    t = cur.next("quoted free text")
    if t.kind != "string":
        raise _LineError(t.col, f"unexpected token {t.text!r}", "quoted free text")
    return NonComputable(_unquote(t.text))


def _parse_trait(cur: _Cursor) -> str:
    cur.keyvalue("trait")
    t = cur.next("trait label")
    if t.kind == "string":
        label = _unquote(t.text)
    elif t.kind == "word":
        label = t.text
    else:
        raise _LineError(t.col, f"unexpected token {t.text!r}", "trait label")
    if not label.strip():
        raise _LineError(t.col, "empty trait label", "trait label")
    return label


def parse_trial_file(text: str, source: str | None = None) -> TrialSpec:
    """Parse one trial file; raises :class:`DslSyntaxError` listing every bad line."""
    errors: list[Diagnostic] = []
    trial_id: str | None = None
    phase: Phase | None = None
    criteria: list[Criterion] = []
    last_line = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        last_line = lineno
        try:
            toks = _tokenize(line)
            if not toks:
                continue
            cur = _Cursor(toks, line)
            head = cur.word("TRIAL, INCLUDE or EXCLUDE", ("TRIAL", "INCLUDE", "EXCLUDE"))
            if head.text == "TRIAL":
                if trial_id is not None:
                    raise _LineError(head.col, "duplicate TRIAL header")
                if criteria:
                    raise _LineError(head.col, "TRIAL header must precede criteria")
                tid = cur.word("trial id").text
                cur.word("PHASE", ("PHASE",))
                ph = cur.word("phase (1, 1/2, 2, 3, UNKNOWN)", [p.value for p in Phase]).text
                cur.end()
                trial_id, phase = tid, Phase(ph)
                continue
            if trial_id is None:
                errors.append(Diagnostic(lineno, head.col, "criterion before TRIAL header", "TRIAL"))
            polarity = Polarity.INCLUDE if head.text == "INCLUDE" else Polarity.EXCLUDE
            negated = False
            t = cur.peek()
            if t is not None and t.kind == "word" and t.text == "NOT":
                cur.i += 1
                negated = True
            trait = _parse_trait(cur)
            predicate = _parse_predicate(cur)
            cur.end()
            criteria.append(Criterion(polarity, trait, negated, predicate, line.strip(), lineno))
        except _LineError as exc:
            col, msg, expected = exc.diag
            errors.append(Diagnostic(lineno, col, msg, expected))
    if trial_id is None and not any(e.message.startswith("criterion before") for e in errors):
        errors.append(Diagnostic(max(last_line, 1), 1, "missing TRIAL header", "TRIAL <id> PHASE <phase>"))
    if not criteria and not errors:
        errors.append(Diagnostic(max(last_line, 1), 1, "trial has no criteria", "INCLUDE or EXCLUDE"))
    if errors:
        raise DslSyntaxError(sorted(errors, key=lambda d: (d.line, d.column)), source)
    return TrialSpec(trial_id, phase, tuple(criteria))


def _num(v: float) -> str:
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def _label(text: str) -> str:
    return text if re.fullmatch(r"[^\s\"\[\],=<>!#]+", text) else _quote(text)


def serialize_predicate(p: Predicate) -> str:
    if isinstance(p, DemographicCompare):
        if p.field == "sex":
            return f"DEMOGRAPHIC sex = {p.value}"
        tail = f" {p.unit}" if p.unit else ""
        return f"DEMOGRAPHIC {p.field} {p.comparator} {_num(p.value)}{tail}"
    if isinstance(p, LabCompare):
        codes = ",".join(p.loincs)
        if p.comparator == "in":
            return f"LAB loinc={codes} IN [{_num(p.threshold)},{_num(p.upper)}] {p.unit}"
        return f"LAB loinc={codes} {p.comparator} {_num(p.threshold)} {p.unit}"
    if isinstance(p, CodePresence):
        kw = next(k for k, (d, _) in CODE_DOMAINS.items() if d == p.domain)
        return f"{kw} system={p.system} codes={','.join(p.patterns)} {'PRESENT' if p.present else 'ABSENT'}"
    return f"NONCOMPUTABLE {_quote(p.reason)}"


def serialize_criterion(c: Criterion) -> str:
    head = "INCLUDE" if c.polarity is Polarity.INCLUDE else "EXCLUDE"
    neg = " NOT" if c.negated else ""
    return f"{head}{neg} trait={_label(c.trait)} {serialize_predicate(c.predicate)}"


def serialize_trial(trial: TrialSpec) -> str:
    lines = [f"TRIAL {trial.trial_id} PHASE {trial.phase.value}"]
    lines.extend(serialize_criterion(c) for c in trial.criteria)
    return "\n".join(lines) + "\n"


def load_trial(path: Path | str) -> TrialSpec:
    path = Path(path)
    return parse_trial_file(path.read_text(encoding="utf-8"), source=str(path))


def load_corpus(paths: Path | str | Iterable[Path | str]) -> list[TrialSpec]:
    """Load a directory of ``*.trial`` files (or an explicit file list), sorted by trial id."""
    if isinstance(paths, (str, Path)) and Path(paths).is_dir():
        files = sorted(Path(paths).glob("*.trial"))
    elif isinstance(paths, (str, Path)):
        files = [Path(paths)]
    else:
        files = [Path(p) for p in paths]
    trials = [load_trial(f) for f in files]
    ids = Counter(t.trial_id for t in trials)
    dup = sorted(i for i, n in ids.items() if n > 1)
    if dup:
        raise ValueError(f"duplicate trial ids in corpus: {', '.join(dup)}")
    return sorted(trials, key=lambda t: t.trial_id)


def write_corpus(trials: Iterable[TrialSpec], out_dir: Path | str) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for t in sorted(trials, key=lambda t: t.trial_id):
        p = out / f"{t.trial_id}.trial"
        p.write_text(serialize_trial(t), encoding="utf-8")
        written.append(p)
    return written


# --------------------------------------------------------------------------
# corpus statistics


@dataclass(frozen=True)
class PatternFrequency:
    polarity: Polarity
    rank: int
    trait: str
    n_studies: int
    percent: float


def corpus_pattern_frequency(corpus: Sequence[TrialSpec]) -> list[PatternFrequency]:
    """Distinct-trial coverage of each (polarity, trait), ranked within polarity.

    Ranking is by study count descending, ties alphabetical by trait.
    """
    if not corpus:
        raise ValueError("empty corpus")
    n = len(corpus)
    studies: dict[tuple[Polarity, str], set[str]] = defaultdict(set)
    for t in corpus:
        for c in t.criteria:
            studies[(c.polarity, c.trait)].add(t.trial_id)
    rows = []
    for pol in Polarity:
        ranked = sorted(((trait, len(ids)) for (p, trait), ids in studies.items() if p is pol),
                        key=lambda x: (-x[1], x[0].casefold(), x[0]))
        rows.extend(PatternFrequency(pol, i, trait, k, 100.0 * k / n) for i, (trait, k) in enumerate(ranked, 1))
    return rows


def render_pattern_table(corpus: Sequence[TrialSpec], top: int = 10) -> str:
    """Side-by-side inclusion/exclusion ranking, tab separated."""
    rows = corpus_pattern_frequency(corpus)
    inc = [r for r in rows if r.polarity is Polarity.INCLUDE][:top]
    exc = [r for r in rows if r.polarity is Polarity.EXCLUDE][:top]
    n = len(corpus)
    out = [
        "Rank\tInclusion Criterion Pattern\tStudy Coverage # of Studies (%)\t"
        "Exclusion Criterion Pattern\tStudy Coverage # of Studies (%)",
        f"\t\tN = {n}\t\tN = {n}",
    ]
    for i in range(max(len(inc), len(exc))):
        left = f"{inc[i].trait}\t{inc[i].n_studies} ({inc[i].percent:.2f}%)" if i < len(inc) else "\t"
        right = f"{exc[i].trait}\t{exc[i].n_studies} ({exc[i].percent:.2f}%)" if i < len(exc) else "\t"
        out.append(f"{i + 1}\t{left}\t{right}")
    return "\n".join(out) + "\n"


@dataclass(frozen=True)
class NegationStats:
    inclusion_negated: int
    inclusion_total: int
    inclusion_percent: float
    exclusion_negated: int
    exclusion_total: int
    exclusion_percent: float

    def render(self) -> str:
        return (
            f"{self.inclusion_negated} of the {self.inclusion_total} ({self.inclusion_percent:.2f}%) "
            f"inclusion criteria contained negations; {self.exclusion_negated} of the "
            f"{self.exclusion_total} ({self.exclusion_percent:.2f}%) exclusion criteria contained negations"
        )


def corpus_negation_stats(corpus: Sequence[TrialSpec]) -> NegationStats:
    if not corpus:
        raise ValueError("empty corpus")
    tot, neg = Counter(), Counter()
    for t in corpus:
        for c in t.criteria:
            tot[c.polarity] += 1
            neg[c.polarity] += c.negated

    def pct(p: Polarity) -> float:
        return round(100.0 * neg[p] / tot[p], 2) if tot[p] else 0.0

    return NegationStats(
        neg[Polarity.INCLUDE], tot[Polarity.INCLUDE], pct(Polarity.INCLUDE),
        neg[Polarity.EXCLUDE], tot[Polarity.EXCLUDE], pct(Polarity.EXCLUDE),
    )


@dataclass(frozen=True)
class ComputabilityStats:
    n_patterns: int
    n_noncomputable: int
    percent_noncomputable: float


def corpus_computability(corpus: Sequence[TrialSpec]) -> ComputabilityStats:
    """Unique (polarity, trait) patterns, and how many are never computable."""
    computable: dict[tuple[Polarity, str], bool] = {}
    for t in corpus:
        for c in t.criteria:
            key = (c.polarity, c.trait)
            computable[key] = computable.get(key, False) or c.computable
    n = len(computable)
    bad = sum(1 for v in computable.values() if not v)
    return ComputabilityStats(n, bad, round(100.0 * bad / n, 2) if n else 0.0)
