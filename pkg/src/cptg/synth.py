"""Synthetic CDM cohorts with planted eligibility and a planted ZINB outcome.

Every random draw comes from a Philox counter-based generator. Each table
family owns one stream, derived from the seed through a ``SeedSequence``
spawn key, so changing how one table is generated never shifts the draws of
another::

    stream 0  population  (patient kind, sex, race, age)
    stream 1  timeline    (diagnosis date, treatment dates, follow-up)
    stream 2  labs
    stream 3  codes       (trait diagnoses and procedures)
    stream 4  outcome     (ZINB counts)
    stream 5  sae         (SAE dates, codes, duplicates and decoys)

Labs and codes are emitted so that every computable criterion is decided
unambiguously. Lab values stay at least a rounding quantum away from any
threshold. Trait codes never overlap the SAE map. Eligibility ground truth
is worked out from the emitted events by a small evaluator in this module,
separate from the engine.
"""
from __future__ import annotations

import configparser
import csv
import datetime as dt
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cdm import RaceEthnicity, Sex, _pattern_key
from .criteria import CodePresence, DemographicCompare, LabCompare, NonComputable, Polarity, TrialSpec, load_corpus
from .eligibility import EligibilityMatrix, Policy
from .gist import CptgVector
from .outcomes import BEV_HCPCS, BEV_RXNORM, CRC_ICD9, CRC_ICD10, PatientOutcome, SaeCodeMap
from .stats.design import COLUMNS, design_row
from .stats.zinb import simulate_zinb, zero_probability
from .units import UNITS, compatible_units

STREAMS = ("population", "timeline", "labs", "codes", "outcome", "sae")
ICD10_START = dt.date(2015, 10, 1)
FILLER = {"ICD9CM": "V67.9", "ICD10CM": "Z09"}
GROUND_TRUTH_FILE = "ground_truth.csv"
CONFIG_ECHO_FILE = "synth_config.cfg"


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LabDistribution:
    family: str  # "normal" or "lognormal"
    p1: float
    p2: float
    unit: str

    def draw(self, rng: np.random.Generator) -> float:
        if self.family == "normal":
            return float(rng.normal(self.p1, self.p2))
        return float(rng.lognormal(self.p1, self.p2))

    def __str__(self) -> str:
        return f"{self.family} {self.p1!r} {self.p2!r} {self.unit}"


_RACES = tuple(r.value for r in RaceEthnicity)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 20190315
    n_patients: int = 2600
    frac_non_target: float = 0.03
    trials: str = "bundled"
    phase: str | None = "3"
    window_days: int = 180
    policy: Policy = Policy.MISSING_MEANS_UNMET
    female: float = 0.476
    race: Mapping[str, float] = field(default_factory=lambda: {
        "NHW": 0.422, "NHB": 0.190, "Hispanic": 0.209, "Other": 0.007, "Unknown": 0.172})
    age_mean: float = 59.0
    age_sd: float = 11.4
    n_px_mean: float = 10.8
    follow_up_min: int = 30
    follow_up_mean: float = 150.0
    lab_missing_prob: float = 0.02
    labs: Mapping[str, LabDistribution] = field(default_factory=dict)
    code_prevalence: float = 0.04
    prevalence: Mapping[str, float] = field(default_factory=dict)
    alpha: float = 2.0
    gamma: Mapping[str, float] = field(default_factory=dict)
    beta: Mapping[str, float] = field(default_factory=dict)
    target_zero_fraction: float | None = None
    zero_fraction_tolerance: float = 0.05
    base_dir: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        probs = {"frac_non_target": self.frac_non_target, "female": self.female,
                 "lab_missing_prob": self.lab_missing_prob, "code_prevalence": self.code_prevalence}
        probs.update({f"race.{k}": v for k, v in self.race.items()})
        probs.update({f"prevalence.{k}": v for k, v in self.prevalence.items()})
        if self.target_zero_fraction is not None:
            probs["target_zero_fraction"] = self.target_zero_fraction
        for k, v in probs.items():
            if not 0.0 <= v <= 1.0:
                raise SynthConfigError(f"{k} must be a probability, got {v}")
        if self.n_patients < 1:
            raise SynthConfigError("n_patients must be >= 1")
        if not self.alpha > 0:
            raise SynthConfigError("alpha must be > 0")
        if self.window_days < 0:
            raise SynthConfigError("window_days must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise SynthConfigError("seed must be a 64-bit unsigned integer")
        if set(self.race) - set(_RACES):
            raise SynthConfigError(f"unknown race key(s): {sorted(set(self.race) - set(_RACES))}")
        if not math.isclose(sum(self.race.values()), 1.0, abs_tol=1e-6):
            raise SynthConfigError("race proportions must sum to 1")
        for name, coefs in (("gamma", self.gamma), ("beta", self.beta)):
            bad = set(coefs) - set(COLUMNS)
            if bad:
                raise SynthConfigError(f"unknown {name} covariate(s): {sorted(bad)}")
        if self.follow_up_min < 1:
            raise SynthConfigError("follow_up_min must be >= 1")

    @property
    def gamma_vector(self) -> np.ndarray:
        return np.array([float(self.gamma.get(c, 0.0)) for c in COLUMNS])

    @property
    def beta_vector(self) -> np.ndarray:
        return np.array([float(self.beta.get(c, 0.0)) for c in COLUMNS])

    @classmethod
    def default(cls) -> "SynthConfig":
        text = resources.files("cptg").joinpath("data/synth_default.cfg").read_text(encoding="utf-8")
        return cls.from_text(text)

    @classmethod
    def load(cls, path: Path | str) -> "SynthConfig":
        path = Path(path)
        return cls.from_text(path.read_text(encoding="utf-8"), base_dir=path.parent)

    @classmethod
    def from_text(cls, text: str, base_dir: Path | None = None, **overrides) -> "SynthConfig":
        cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
        cp.optionxform = str
        try:
            cp.read_string("[synth]\n" + text)
        except configparser.Error as exc:
            raise SynthConfigError(f"bad config: {exc}") from None
        kw: dict = {"race": {}, "labs": {}, "prevalence": {}, "gamma": {}, "beta": {}}
        scalars = {f.name: f.type for f in cls.__dataclass_fields__.values()}
        for key, raw in cp.items("synth"):
            raw = raw.strip()
            try:
                head, _, rest = key.partition(".")
                if rest and head in ("race", "prevalence", "gamma", "beta"):
                    kw[head][rest] = float(raw)
                elif rest and head == "lab":
                    parts = raw.split()
                    if len(parts) != 4 or parts[0] not in ("normal", "lognormal") or parts[3] not in UNITS:
                        raise ValueError(f"expected '<normal|lognormal> <p1> <p2> <unit>', got {raw!r}")
                    kw["labs"][rest] = LabDistribution(parts[0], float(parts[1]), float(parts[2]), parts[3])
                elif key in ("seed", "n_patients", "window_days", "follow_up_min"):
                    kw[key] = int(raw)
                elif key in ("trials",):
                    kw[key] = raw
                elif key == "phase":
                    kw[key] = None if raw.lower() in ("", "all", "none") else raw
                elif key == "policy":
                    kw[key] = Policy(raw)
                elif key == "target_zero_fraction":
                    kw[key] = None if raw.lower() in ("", "none") else float(raw)
                elif key in scalars and key not in ("race", "labs", "prevalence", "gamma", "beta", "base_dir"):
                    kw[key] = float(raw)
                else:
                    raise ValueError("unknown key")
            except ValueError as exc:
                raise SynthConfigError(f"config key {key!r}: {exc}") from None
        if not kw["race"]:
            del kw["race"]
        kw.update(overrides)
        return cls(base_dir=base_dir, **kw)

    def replace(self, **changes) -> "SynthConfig":
        from dataclasses import replace

        return replace(self, **changes)

    def to_text(self) -> str:
        lines = [
            f"seed = {self.seed}", f"n_patients = {self.n_patients}",
            f"frac_non_target = {self.frac_non_target!r}", f"trials = {self.trials}",
            f"phase = {self.phase if self.phase is not None else 'all'}",
            f"window_days = {self.window_days}", f"policy = {self.policy.value}",
            f"female = {self.female!r}",
        ]
        lines += [f"race.{k} = {v!r}" for k, v in self.race.items()]
        lines += [f"age_mean = {self.age_mean!r}", f"age_sd = {self.age_sd!r}",
                  f"n_px_mean = {self.n_px_mean!r}", f"follow_up_min = {self.follow_up_min}",
                  f"follow_up_mean = {self.follow_up_mean!r}", f"lab_missing_prob = {self.lab_missing_prob!r}"]
        lines += [f"lab.{k} = {v}" for k, v in sorted(self.labs.items())]
        lines.append(f"code_prevalence = {self.code_prevalence!r}")
        lines += [f"prevalence.{k} = {v!r}" for k, v in sorted(self.prevalence.items())]
        lines.append(f"alpha = {self.alpha!r}")
        lines += [f"gamma.{c} = {self.gamma[c]!r}" for c in COLUMNS if c in self.gamma]
        lines += [f"beta.{c} = {self.beta[c]!r}" for c in COLUMNS if c in self.beta]
        tz = "none" if self.target_zero_fraction is None else repr(self.target_zero_fraction)
        lines += [f"target_zero_fraction = {tz}", f"zero_fraction_tolerance = {self.zero_fraction_tolerance!r}"]
        return "\n".join(lines) + "\n"

    def load_trials(self) -> list[TrialSpec]:
        if self.trials == "bundled":
            corpus = load_corpus(Path(str(resources.files("cptg").joinpath("data/corpus"))))
        else:
            p = Path(self.trials)
            if not p.is_absolute() and self.base_dir is not None:
                p = self.base_dir / p
            corpus = load_corpus(p)
        if self.phase is not None:
            corpus = [t for t in corpus if t.phase.value == self.phase]
        if not corpus:
            raise SynthConfigError("no trials selected")
        return corpus


def streams(seed: int) -> dict[str, np.random.Generator]:
    return {
        name: np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(i,))))
        for i, name in enumerate(STREAMS)
    }


# --------------------------------------------------------------------------
# code helpers


def _overlaps(a: str, b: str) -> bool:
    """Whether two code patterns can match a common code."""
    (sa, pa), (sb, pb) = _pattern_key(a), _pattern_key(b)
    if pa and pb:
        return sa.startswith(sb) or sb.startswith(sa)
    if pa:
        return sb.startswith(sa)
    if pb:
        return sa.startswith(sb)
    return sa == sb


def _oracle_match(pattern: str, code: str) -> bool:
    stem = pattern.replace(".", "").upper()
    code = code.replace(".", "").upper()
    return code.startswith(stem[:-1]) if stem.endswith("*") else code == stem


def _format_code(system: str, stem: str) -> str:
    if system in ("ICD9CM", "ICD10CM") and len(stem) > 3:
        return stem[:3] + "." + stem[3:]
    return stem


def _concretize(pattern: str, system: str, rng: np.random.Generator) -> str:
    stem, is_prefix = _pattern_key(pattern)
    if is_prefix and system in ("ICD9CM", "ICD10CM"):
        k = int(rng.integers(0, min(max(0, 5 - len(stem)), 2) + 1))
        stem += "".join(str(int(d)) for d in rng.integers(0, 10, size=k))
    return _format_code(system, stem)


# --------------------------------------------------------------------------
# cohort model


@dataclass
class _Patient:
    pid: str
    kind: str  # "target", "crc_no_bev", "bev_before_crc", "no_crc"
    birth: dt.date
    sex: Sex
    race: RaceEthnicity
    dx: list = field(default_factory=list)  # (date, system, code)
    px: list = field(default_factory=list)  # (date, system, code)
    med: list = field(default_factory=list)  # (date, rxnorm)
    lab: list = field(default_factory=list)  # (date, loinc, value, unit)
    lab_latent: dict = field(default_factory=dict)  # component -> (value in dist unit, loincs emitted)
    first_px: dt.date | None = None
    last_px: dt.date | None = None
    n_px: int = 0
    follow_up_raw: int = 0


@dataclass(frozen=True)
class _LabComponent:
    loincs: tuple[str, ...]
    dist: LabDistribution
    thresholds: tuple[float, ...]  # in dist.unit


@dataclass
class GroundTruth:
    """Planted per-patient truth for the target population."""

    patients: tuple[str, ...]
    trials: tuple[str, ...]
    e: np.ndarray
    cptg: np.ndarray
    eta_zero: np.ndarray
    eta_count: np.ndarray
    y: np.ndarray
    follow_up_days: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_px: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def mgist(self) -> np.ndarray:
        return self.e.mean(axis=0) if len(self.patients) else np.zeros(len(self.trials))

    def write_csv(self, path: Path | str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["PATID", *(f"E_{t}" for t in self.trials), "CPTG_TRUE", "Y_TRUE",
                        "ETA_ZERO_TRUE", "ETA_COUNT_TRUE"])
            for i, pid in enumerate(self.patients):
                w.writerow([pid, *(int(x) for x in self.e[i]), repr(float(self.cptg[i])), int(self.y[i]),
                            repr(float(self.eta_zero[i])), repr(float(self.eta_count[i]))])

    @classmethod
    def read_csv(cls, path: Path | str) -> "GroundTruth":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        head, body = rows[0], rows[1:]
        trials = tuple(h[2:] for h in head if h.startswith("E_"))
        k = len(trials)
        e = np.array([[int(x) for x in r[1:1 + k]] for r in body], dtype=np.uint8).reshape(len(body), k)
        col = {h: i for i, h in enumerate(head)}
        get = lambda name, typ: np.array([typ(r[col[name]]) for r in body])  # noqa: E731
        return cls(tuple(r[0] for r in body), trials, e, get("CPTG_TRUE", float), get("ETA_ZERO_TRUE", float),
                   get("ETA_COUNT_TRUE", float), get("Y_TRUE", int).astype(np.int64))


@dataclass
class SyntheticCohort:
    config: SynthConfig
    trials: tuple[TrialSpec, ...]
    patients: list[_Patient]
    truth: GroundTruth
    X: np.ndarray  # design rows of the target population, COLUMNS order
    p_zero: np.ndarray  # planted zero probability per target patient

    def write(self, out_dir: Path | str) -> Path:
        return write_cohort(self, out_dir)


def _lab_components(trials: Sequence[TrialSpec], config: SynthConfig) -> list[_LabComponent]:
    groups: list[set[str]] = []
    crits = []
    for t in trials:
        for c in t.criteria:
            if isinstance(c.predicate, LabCompare):
                crits.append(c.predicate)
                s = set(c.predicate.loincs)
                hit = [g for g in groups if g & s]
                for g in hit:
                    groups.remove(g)
                    s |= g
                groups.append(s)
    comps = []
    for g in sorted(groups, key=lambda s: sorted(s)):
        keys = sorted(g & set(config.labs))
        if len(keys) != 1:
            raise SynthConfigError(
                f"need exactly one lab.<loinc> distribution for LOINC group {sorted(g)}, found {keys or 'none'}")
        dist = config.labs[keys[0]]
        thr = set()
        for p in crits:
            if set(p.loincs) & g:
                if UNITS[p.unit][0] != UNITS[dist.unit][0]:
                    raise SynthConfigError(f"criterion unit {p.unit} is incompatible with {dist.unit}")
                f = UNITS[p.unit][1] / UNITS[dist.unit][1]
                thr.add(p.threshold * f)
                if p.upper is not None:
                    thr.add(p.upper * f)
        comps.append(_LabComponent(tuple(sorted(g)), dist, tuple(sorted(thr))))
    return comps


def _code_traits(trials: Sequence[TrialSpec], sae_map: SaeCodeMap) -> dict[str, list[tuple[str, str, str]]]:
    """trait -> [(domain, system, pattern)], refusing patterns that reach into the SAE map."""
    traits: dict[str, list[tuple[str, str, str]]] = {}
    for t in trials:
        for c in t.criteria:
            p = c.predicate
            if not isinstance(p, CodePresence):
                continue
            for pat in p.patterns:
                if p.domain == "diagnosis":
                    for e in sae_map.entries:
                        sp = e.pattern(p.system)
                        if sp and _overlaps(pat, sp):
                            raise SynthConfigError(
                                f"trait {c.trait!r} pattern {pat} overlaps SAE code {sp}; counts would not be planted")
                opt = (p.domain, p.system, pat)
                if opt not in traits.setdefault(c.trait, []):
                    traits[c.trait].append(opt)
    return traits


def _round_sig(x: float, digits: int = 4) -> float:
    return float(f"{x:.{digits}g}")


def _lab_value(comp: _LabComponent, rng: np.random.Generator) -> float:
    v = _round_sig(max(comp.dist.draw(rng), 1e-3))
    for t in comp.thresholds:
        if abs(v - t) <= 1e-6 * max(1.0, abs(t)):
            v = _round_sig(t * (1.0 + (1e-3 if rng.random() < 0.5 else -1e-3)), 6)
    return v


def _random_date(rng, lo: dt.date, hi: dt.date) -> dt.date:
    span = (hi - lo).days
    return lo + dt.timedelta(days=int(rng.integers(0, span + 1))) if span > 0 else lo


def _dx_system(d: dt.date) -> str:
    return "ICD9CM" if d < ICD10_START else "ICD10CM"


def _crc_code(d: dt.date, rng) -> tuple[str, str]:
    system = _dx_system(d)
    pats = CRC_ICD9 if system == "ICD9CM" else CRC_ICD10
    return system, _concretize(pats[int(rng.integers(len(pats)))], system, rng)


def _bev_rows(p: _Patient, dates: Sequence[dt.date], rng) -> None:
    for d in dates:
        u = rng.random()
        if u < 0.75:
            p.px.append((d, "HCPCS", BEV_HCPCS[1]))
        elif u < 0.85:
            p.px.append((d, "HCPCS", BEV_HCPCS[0]))
        elif u < 0.92:
            p.px.append((d, "RXNORM", BEV_RXNORM[0]))
        else:
            p.med.append((d, BEV_RXNORM[0]))
        if rng.random() < 0.05:  # same administration recorded twice
            p.med.append((d, BEV_RXNORM[0]))


def _population(config: SynthConfig, rng) -> list[_Patient]:
    width = max(6, len(str(config.n_patients)))
    races = list(config.race)
    rp = np.array([config.race[r] for r in races], dtype=float)
    rp /= rp.sum()
    out = []
    for i in range(config.n_patients):
        u = rng.random()
        if u >= config.frac_non_target:
            kind = "target"
        else:
            kind = ("crc_no_bev", "bev_before_crc", "no_crc")[int(rng.integers(3))]
        sex = Sex.FEMALE if rng.random() < config.female else Sex.MALE
        race = RaceEthnicity(races[int(rng.choice(len(races), p=rp))])
        age = float(np.clip(rng.normal(config.age_mean - 1.0, config.age_sd), 21.0, 95.0))
        out.append(_Patient(f"P{i + 1:0{width}d}", kind, dt.date(1900, 1, 1), sex, race))
        out[-1].lab_latent["age"] = age
    return out


def _timeline(p: _Patient, config: SynthConfig, rng) -> None:
    d0 = _random_date(rng, dt.date(2010, 1, 1), dt.date(2019, 6, 30))
    age = p.lab_latent.pop("age")
    p.birth = d0 - dt.timedelta(days=int(round(age * 365.25)))
    n_px = min(int(rng.geometric(1.0 / config.n_px_mean)), 120) if config.n_px_mean > 1 else 1
    first = d0 + dt.timedelta(days=int(rng.integers(7, 61)))
    dates = [first]
    for _ in range(n_px - 1):
        dates.append(dates[-1] + dt.timedelta(days=int(rng.integers(14, 29))))
    f_raw = config.follow_up_min + int(round(rng.exponential(max(config.follow_up_mean - config.follow_up_min, 1.0))))
    p.lab_latent["d0"] = d0
    if p.kind == "target":
        system, code = _crc_code(d0, rng)
        p.dx.append((d0, system, code))
        if rng.random() < 0.5:  # repeat diagnosis during treatment
            d = _random_date(rng, d0, dates[-1])
            p.dx.append((d, *_crc_code(d, rng)))
        _bev_rows(p, dates, rng)
        if rng.random() < 0.05:  # an administration before diagnosis never qualifies
            _bev_rows(p, [d0 - dt.timedelta(days=int(rng.integers(1, 30)))], rng)
        p.first_px, p.last_px, p.n_px, p.follow_up_raw = dates[0], dates[-1], len(dates), f_raw
        end = dates[-1] + dt.timedelta(days=f_raw)
    elif p.kind == "crc_no_bev":
        p.dx.append((d0, *_crc_code(d0, rng)))
        end = d0 + dt.timedelta(days=f_raw)
    elif p.kind == "bev_before_crc":
        before = [d0 - (dates[-1] - d) for d in dates]  # last administration on the diagnosis date
        _bev_rows(p, before, rng)
        p.dx.append((d0, *_crc_code(d0, rng)))
        end = d0 + dt.timedelta(days=f_raw)
    else:
        _bev_rows(p, dates, rng)
        end = dates[-1] + dt.timedelta(days=f_raw)
    p.dx.append((end, _dx_system(end), FILLER[_dx_system(end)]))


def _labs(p: _Patient, comps: Sequence[_LabComponent], config: SynthConfig, rng) -> None:
    d0 = p.lab_latent["d0"]
    hi = (p.first_px or d0) - dt.timedelta(days=1)
    lo = hi - dt.timedelta(days=90)
    for ci, comp in enumerate(comps):
        if rng.random() < config.lab_missing_prob:
            continue
        v = _lab_value(comp, rng)
        loincs = [l for l in comp.loincs if rng.random() >= 0.15] or [comp.loincs[int(rng.integers(len(comp.loincs)))]]
        units = compatible_units(comp.dist.unit)
        for loinc in loincs:
            for _ in range(int(rng.integers(1, 4))):
                unit = comp.dist.unit if rng.random() < 0.7 else units[int(rng.integers(len(units)))]
                value = float(f"{v * UNITS[comp.dist.unit][1] / UNITS[unit][1]:.12g}")
                p.lab.append((_random_date(rng, lo, hi), loinc, value, unit))
        p.lab_latent[ci] = (v, tuple(loincs))


def _codes(p: _Patient, traits, config: SynthConfig, rng, sae_map: SaeCodeMap) -> None:
    d0 = p.lab_latent["d0"]
    hi = (p.first_px or d0) - dt.timedelta(days=1)
    lo = d0 - dt.timedelta(days=1000)
    for trait, options in traits.items():
        prev = config.prevalence.get(trait, config.code_prevalence)
        if rng.random() >= prev:
            continue
        when = _random_date(rng, lo, hi)
        era = [o for o in options if o[0] != "diagnosis" or o[1] == _dx_system(when)] or options
        domain, system, pat = era[int(rng.integers(len(era)))]
        for _ in range(20):
            code = _concretize(pat, system, rng)
            if domain != "diagnosis" or sae_map.resolve(system, code) is None:
                break
        else:  # pragma: no cover - ruled out by the overlap check
            continue
        if domain == "diagnosis":
            p.dx.append((when, system, code))
        elif domain == "procedure":
            p.px.append((when, system, code))
        else:
            p.med.append((when, code))


# --------------------------------------------------------------------------
# truth evaluator (independent of the eligibility engine)


def _cmp(v: float, op: str, t: float, upper: float | None) -> bool:
    if op == "in":
        return t <= v <= upper
    return {"<": v < t, "<=": v <= t, ">": v > t, ">=": v >= t, "=": v == t}[op]


def _truth_raw(p: _Patient, pred, comps, index_date: dt.date):
    """True, False or None (missing)."""
    if isinstance(pred, LabCompare):
        for ci, comp in enumerate(comps):
            if set(pred.loincs) & set(comp.loincs):
                latent = p.lab_latent.get(ci)
                if latent is None or not set(latent[1]) & set(pred.loincs):
                    return None
                # compare in the distribution unit, where the latent value is exact
                g = UNITS[pred.unit][1] / UNITS[comp.dist.unit][1]
                upper = None if pred.upper is None else pred.upper * g
                return _cmp(latent[0], pred.comparator, pred.threshold * g, upper)
        return None
    if isinstance(pred, CodePresence):
        if pred.domain == "medication":
            rows = [("RXNORM", c) for _, c in p.med]
        else:
            rows = [(s, c) for _, s, c in (p.dx if pred.domain == "diagnosis" else p.px)]
        hit = any(s == pred.system and _oracle_match(pat, c) for s, c in rows for pat in pred.patterns)
        return hit if pred.present else not hit
    if isinstance(pred, DemographicCompare):
        if pred.field == "sex":
            return p.sex.value == pred.value
        years = index_date.year - p.birth.year - ((index_date.month, index_date.day) < (p.birth.month, p.birth.day))
        thr = pred.value / 12.0 if pred.unit == "months" else pred.value
        return _cmp(years, pred.comparator, thr, None)
    raise TypeError(pred)


def _truth_eligible(p: _Patient, trial: TrialSpec, comps, policy: Policy) -> bool:
    for c in trial.criteria:
        if isinstance(c.predicate, NonComputable):
            continue
        raw = _truth_raw(p, c.predicate, comps, p.first_px)
        if raw is None:
            if policy is Policy.MISSING_MEANS_SKIPPED:
                continue
            raw = False
        met = (not raw) if c.negated else raw
        if met != (c.polarity is Polarity.INCLUDE):
            return False
    return True


# --------------------------------------------------------------------------
# SAE placement


def _sae_code(entry, d: dt.date, sae_map: SaeCodeMap, rng) -> tuple[str, str]:
    system = _dx_system(d)
    pat = entry.pattern(system) or entry.pattern("ICD10CM" if system == "ICD9CM" else "ICD9CM")
    if not entry.pattern(system):
        system = "ICD10CM" if system == "ICD9CM" else "ICD9CM"
    for _ in range(20):
        code = _concretize(pat, system, rng)
        if sae_map.resolve(system, code) == entry.name:
            return system, code
    return system, _format_code(system, _pattern_key(pat)[0])


def _place_saes(p: _Patient, y: int, window: int, sae_map: SaeCodeMap, rng) -> None:
    entries = sae_map.entries
    fu = min(p.follow_up_raw, window)
    lo = p.first_px + dt.timedelta(days=1)
    span = (p.last_px - p.first_px).days + fu  # days in (first_px, last_px + fu]
    if y > span * len(entries):
        raise SynthConfigError(f"patient {p.pid}: {y} SAEs do not fit a {span}-day window")
    if y:
        for cell in sorted(int(c) for c in rng.choice(span * len(entries), size=y, replace=False)):
            d = lo + dt.timedelta(days=cell // len(entries))
            entry = entries[cell % len(entries)]
            p.dx.append((d, *_sae_code(entry, d, sae_map, rng)))
            if rng.random() < 0.15:  # duplicate record of the same event
                p.dx.append((d, *_sae_code(entry, d, sae_map, rng)))
    # decoys outside the window
    if rng.random() < 0.3:
        d = p.first_px
        p.dx.append((d, *_sae_code(entries[int(rng.integers(len(entries)))], d, sae_map, rng)))
    if p.follow_up_raw > window and rng.random() < 0.5:
        d = p.last_px + dt.timedelta(days=window + 1)
        p.dx.append((d, *_sae_code(entries[int(rng.integers(len(entries)))], d, sae_map, rng)))


# --------------------------------------------------------------------------
# public API


def build_cohort(config: SynthConfig, trials: Sequence[TrialSpec] | None = None,
                 sae_map: SaeCodeMap | None = None) -> SyntheticCohort:
    """Generate a cohort in memory."""
    trials = tuple(config.load_trials() if trials is None else trials)
    if not trials:
        raise SynthConfigError("no trials selected")
    sae_map = sae_map or SaeCodeMap.load()
    comps = _lab_components(trials, config)
    traits = _code_traits(trials, sae_map)
    rs = streams(config.seed)

    patients = _population(config, rs["population"])
    for p in patients:
        _timeline(p, config, rs["timeline"])
    for p in patients:
        _labs(p, comps, config, rs["labs"])
    for p in patients:
        _codes(p, traits, config, rs["codes"], sae_map)

    target = [p for p in patients if p.kind == "target"]
    k = len(trials)
    e = np.array([[_truth_eligible(p, t, comps, config.policy) for t in trials] for p in target],
                 dtype=np.uint8).reshape(len(target), k)
    g = e.mean(axis=0) if target else np.zeros(k)
    cptg = (e * g).sum(axis=1) / k

    window = config.window_days
    X = np.array([
        design_row((p.last_px - p.birth).days / 365.25, p.sex, p.race, min(p.follow_up_raw, window), p.n_px, s)
        for p, s in zip(target, cptg)
    ], dtype=np.float64).reshape(len(target), len(COLUMNS))
    gam, bet = config.gamma_vector, config.beta_vector
    p0 = zero_probability(X, X, gam, bet, config.alpha) if target else np.zeros(0)
    _check_zero_fraction(config, p0)
    y = simulate_zinb(rs["outcome"], X, X, gam, bet, config.alpha) if target else np.zeros(0, dtype=np.int64)
    for p, yi in zip(target, y):
        _place_saes(p, int(yi), window, sae_map, rs["sae"])
    for p in patients:
        if p.kind != "target" and rs["sae"].random() < 0.2:  # SAE codes outside the target population
            d = p.dx[-1][0]
            entry = sae_map.entries[int(rs["sae"].integers(len(sae_map.entries)))]
            p.dx.append((d, *_sae_code(entry, d, sae_map, rs["sae"])))

    truth = GroundTruth(tuple(p.pid for p in target), tuple(t.trial_id for t in trials), e, cptg,
                        X @ gam, X @ bet, y.astype(np.int64),
                        np.array([min(p.follow_up_raw, window) for p in target]),
                        np.array([p.n_px for p in target]))
    return SyntheticCohort(config, trials, patients, truth, X, p0)


def _check_zero_fraction(config: SynthConfig, p0: np.ndarray) -> None:
    """Analytic check: planted mean zero probability must match the configured target."""
    if config.target_zero_fraction is None or p0.size < 2:
        return
    slack = config.zero_fraction_tolerance + 3.0 * float(np.std(p0, ddof=1)) / math.sqrt(p0.size)
    got = float(p0.mean())
    if abs(got - config.target_zero_fraction) > slack:
        raise SynthConfigError(
            f"infeasible config: planted parameters give zero fraction {got:.3f}, "
            f"target {config.target_zero_fraction:.3f} (tolerance {slack:.3f})")


def write_cohort(cohort: SyntheticCohort, out_dir: Path | str) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def writer(name, header):
        fh = open(out / name, "w", newline="", encoding="utf-8")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        return fh, w

    files = {
        "demographic": writer("demographic.csv", ["PATID", "BIRTH_DATE", "SEX", "RACE_ETH"]),
        "diagnosis": writer("diagnosis.csv", ["PATID", "CODE_SYSTEM", "CODE", "DATE"]),
        "procedure": writer("procedure.csv", ["PATID", "CODE_SYSTEM", "CODE", "DATE"]),
        "lab": writer("lab.csv", ["PATID", "LOINC", "VALUE", "UNIT", "DATE"]),
        "medication": writer("medication.csv", ["PATID", "RXNORM", "DATE"]),
    }
    try:
        for p in cohort.patients:
            files["demographic"][1].writerow([p.pid, p.birth.isoformat(), p.sex.value, p.race.value])
            for d, s, c in sorted(p.dx):
                files["diagnosis"][1].writerow([p.pid, s, c, d.isoformat()])
            for d, s, c in sorted(p.px):
                files["procedure"][1].writerow([p.pid, s, c, d.isoformat()])
            for d, loinc, v, u in sorted(p.lab):
                files["lab"][1].writerow([p.pid, loinc, repr(v), u, d.isoformat()])
            for d, c in sorted(p.med):
                files["medication"][1].writerow([p.pid, c, d.isoformat()])
    finally:
        for fh, _ in files.values():
            fh.close()
    cohort.truth.write_csv(out / GROUND_TRUTH_FILE)
    (out / CONFIG_ECHO_FILE).write_text(cohort.config.to_text(), encoding="utf-8")
    return out


def generate_cohort(config: SynthConfig, out_dir: Path | str, trials: Sequence[TrialSpec] | None = None,
                    sae_map: SaeCodeMap | None = None) -> tuple[Path, GroundTruth]:
    cohort = build_cohort(config, trials, sae_map)
    return write_cohort(cohort, out_dir), cohort.truth


# --------------------------------------------------------------------------
# verification


@dataclass(frozen=True)
class Discrepancy:
    patient_id: str
    field: str
    expected: str
    observed: str

    def __str__(self) -> str:
        return f"{self.patient_id}\t{self.field}\texpected {self.expected}\tobserved {self.observed}"


def verify_ground_truth(truth: GroundTruth, matrix: EligibilityMatrix, cptg: CptgVector | Mapping[str, float],
                        outcomes: Sequence[PatientOutcome], cptg_tol: float = 1e-12) -> list[Discrepancy]:
    """Compare pipeline exports against the planted truth; empty list means exact agreement."""
    out: list[Discrepancy] = []
    want, got = set(truth.patients), set(matrix.patients)
    for pid in sorted(want - got):
        out.append(Discrepancy(pid, "population", "target", "absent"))
    for pid in sorted(got - want):
        out.append(Discrepancy(pid, "population", "absent", "target"))
    for t in sorted(set(truth.trials) ^ set(matrix.trials)):
        out.append(Discrepancy("*", f"trial {t}", str(t in truth.trials), str(t in matrix.trials)))
    shared = [t for t in truth.trials if t in matrix.trials]
    row = {pid: i for i, pid in enumerate(matrix.patients)}
    scores = cptg.as_dict() if isinstance(cptg, CptgVector) else dict(cptg)
    counts = {o.exposure.patient_id: o.outcome.sae_count for o in outcomes}
    for i, pid in enumerate(truth.patients):
        if pid not in row:
            continue
        for t in shared:
            a, b = int(truth.e[i, truth.trials.index(t)]), int(matrix.e[row[pid], matrix.trials.index(t)])
            if a != b:
                out.append(Discrepancy(pid, f"E_{t}", str(a), str(b)))
        s = scores.get(pid)
        if s is None or abs(s - truth.cptg[i]) > cptg_tol:
            out.append(Discrepancy(pid, "CPTG", repr(float(truth.cptg[i])), repr(s)))
        c = counts.get(pid)
        if c != int(truth.y[i]):
            out.append(Discrepancy(pid, "SAE_COUNT", str(int(truth.y[i])), str(c)))
    return out
