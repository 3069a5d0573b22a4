"""Staged analysis pipeline.

Each stage reads the exports of earlier stages from the output directory
(plus the CDM data, when it needs events) and writes its own exports there,
so any stage can be re-run on its own. ``report`` only formats numbers that
already sit in export files.

Stage order: ingest, eligibility, gist, cptg, saes, describe, wilcoxon,
fit, report.
"""
from __future__ import annotations

import configparser
import csv
import datetime as dt
import json
import logging
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .cdm import CohortStore, ingest_cohort
from .criteria import (TrialSpec, corpus_computability, corpus_negation_stats, load_corpus,
                       render_pattern_table)
from .eligibility import EligibilityMatrix, Policy, eligibility_matrix, write_verdicts_jsonl
from .gist import CptgVector, cptg, gist_report, read_gist_reports, write_gist_reports
from .outcomes import (WINDOW_DAYS, SaeCodeMap, compute_outcomes, exposure_summary, read_outcomes,
                       select_target_population, write_outcomes)
from .stats.descriptive import descriptive_table
from .stats.design import LABELS, analysis_records, build_design_matrices, read_records, write_records
from .stats.ranksum import wilcoxon_rank_sum
from .stats.zinb import dispersion_note, zinb_effect_measures, zinb_fit

log = logging.getLogger(__name__)

STAGES = ("ingest", "eligibility", "gist", "cptg", "saes", "describe", "wilcoxon", "fit", "report")
FAILED_FILE = "FAILED"
WARNINGS_FILE = "warnings.txt"
SUMMARY_FILE = "summary.md"
POPULATION_FILE = "target_population.csv"
CONFIG_KEYS = ("data", "trials", "phase", "sae_map", "window_days", "policy", "out")

# covariate increments for the effect-measure export
EFFECT_DELTAS = {"cptg": 0.1}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: str):
        self.stage, self.cause = stage, cause
        super().__init__(f"stage {stage} failed: {cause}")


@dataclass(frozen=True)
class PipelineConfig:
    data: Path | None = None
    trials: tuple[Path, ...] = ()  # empty means the bundled corpus
    phase: str | None = "3"
    sae_map: Path | None = None
    window_days: int = WINDOW_DAYS
    policy: Policy = Policy.MISSING_MEANS_UNMET
    out: Path = Path("out")

    def __post_init__(self):
        if self.window_days < 0:
            raise ValueError("window_days must be >= 0")

    @staticmethod
    def read_file(path: Path | str) -> dict:
        """Flat ``key = value`` file; relative paths resolve against the file's directory."""
        path = Path(path)
        cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
        cp.optionxform = str
        cp.read_string("[pipeline]\n" + path.read_text(encoding="utf-8"))
        raw = dict(cp.items("pipeline"))
        unknown = sorted(set(raw) - set(CONFIG_KEYS))
        if unknown:
            raise ValueError(f"{path}: unknown config key(s): {', '.join(unknown)}")
        base = path.parent
        out = {}
        for k, v in raw.items():
            v = v.strip()
            if k in ("data", "sae_map", "out"):
                out[k] = base / v
            elif k == "trials":
                out[k] = tuple(base / p.strip() for p in v.split(",") if p.strip())
            else:
                out[k] = v
        return out

    @classmethod
    def build(cls, file_values: dict | None = None, **flags) -> "PipelineConfig":
        """Defaults, then config-file values, then explicit flags (``None`` flags are ignored)."""
        merged = dict(file_values or {})
        merged.update({k: v for k, v in flags.items() if v is not None})
        kw = {}
        if "data" in merged:
            kw["data"] = Path(merged["data"])
        if "trials" in merged:
            t = merged["trials"]
            kw["trials"] = tuple(Path(p) for p in ([t] if isinstance(t, (str, Path)) else t))
        if "phase" in merged:
            p = str(merged["phase"])
            kw["phase"] = None if p.lower() in ("all", "none", "") else p
        if "sae_map" in merged:
            kw["sae_map"] = Path(merged["sae_map"])
        if "window_days" in merged:
            kw["window_days"] = int(merged["window_days"])
        if "policy" in merged:
            kw["policy"] = Policy(merged["policy"])
        if "out" in merged:
            kw["out"] = Path(merged["out"])
        return cls(**kw)


def bundled_corpus_dir() -> Path:
    return Path(str(resources.files("cptg").joinpath("data/corpus")))


def _p_text(p: float) -> str:
    if math.isnan(p):
        return "NA"
    return "<.0001" if p < 1e-4 else f"{p:.4f}"


class Pipeline:
    def __init__(self, config: PipelineConfig):
        self.config = config
        self.out = Path(config.out)
        self._store: CohortStore | None = None
        self._corpus: list[TrialSpec] | None = None

    # ---------------------------------------------------------------- inputs

    def _need(self, name: str) -> Path:
        p = self.out / name
        if not p.is_file():
            raise FileNotFoundError(f"missing {name} in {self.out}; run the earlier stage first")
        return p

    @property
    def store(self) -> CohortStore:
        if self._store is None:
            if self.config.data is None:
                raise ValueError("no data directory given (--data)")
            self._store = ingest_cohort(self.config.data)
        return self._store

    @property
    def corpus(self) -> list[TrialSpec]:
        if self._corpus is None:
            files: list[Path] = []
            for p in self.config.trials or (bundled_corpus_dir(),):
                if not p.exists():
                    raise FileNotFoundError(f"trial path not found: {p}")
                files += sorted(p.glob("*.trial")) if p.is_dir() else [p]
            self._corpus = load_corpus(files)
            if not self._corpus:
                raise ValueError("no trial files found")
        return self._corpus

    @property
    def trials(self) -> list[TrialSpec]:
        sel = [t for t in self.corpus if self.config.phase is None or t.phase.value == self.config.phase]
        if not sel:
            raise ValueError("no trials selected")
        return sel

    def sae_map(self) -> SaeCodeMap:
        return SaeCodeMap.load(self.config.sae_map)

    def population(self) -> tuple[list[str], dict[str, dt.date]]:
        with open(self._need(POPULATION_FILE), newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))[1:]
        return [r[0] for r in rows], {r[0]: dt.date.fromisoformat(r[1]) for r in rows}

    # ---------------------------------------------------------------- stages

    def run_stage(self, name: str) -> list[str]:
        fn: Callable[[], list[str]] = getattr(self, f"stage_{name}")
        self.out.mkdir(parents=True, exist_ok=True)
        failed = self.out / FAILED_FILE
        if failed.exists():
            failed.unlink()
        try:
            warnings = fn()
        except Exception as exc:  # recorded for the operator, then re-raised
            failed.write_text(f"stage {name}: {exc}\n", encoding="utf-8")
            raise StageError(name, str(exc)) from exc
        self._record_warnings(name, warnings)
        return warnings

    def preflight(self) -> None:
        """Fail fast on inputs that no stage could recover from."""
        self.out.mkdir(parents=True, exist_ok=True)
        try:
            self.trials
            if self.config.data is not None and not Path(self.config.data).is_dir():
                raise FileNotFoundError(f"data directory not found: {self.config.data}")
        except Exception as exc:
            (self.out / FAILED_FILE).write_text(f"stage config: {exc}\n", encoding="utf-8")
            raise StageError("config", str(exc)) from exc

    def run(self, stages: Sequence[str] = STAGES) -> list[str]:
        self.preflight()
        warnings = []
        for s in stages:
            log.info("stage %s", s)
            warnings += self.run_stage(s)
        return warnings

    def _record_warnings(self, stage: str, warnings: list[str]) -> None:
        path = self.out / WARNINGS_FILE
        keep = []
        if path.exists():
            keep = [l for l in path.read_text(encoding="utf-8").splitlines() if not l.startswith(f"[{stage}] ")]
        keep += [f"[{stage}] {w}" for w in warnings]
        order = {s: i for i, s in enumerate(STAGES)}
        keep.sort(key=lambda l: order.get(l[1:l.index("]")], len(STAGES)))
        path.write_text("".join(l + "\n" for l in keep), encoding="utf-8")

    def stage_ingest(self) -> list[str]:
        self._store = None
        m = self.store.manifest
        m.write(self.out)
        w = list(m.warnings)
        if m.rejects:
            w.append(f"{len(m.rejects)} input rows rejected (see ingest_rejects.csv)")
        return w

    def stage_eligibility(self) -> list[str]:
        store, trials = self.store, self.trials
        pop = sorted(select_target_population(store))
        if not pop:
            raise ValueError("empty target population: no cancer diagnosis followed by treatment")
        # index date: first qualifying treatment
        index = {pid: exposure_summary(store, pid, self.config.window_days).first_px_date for pid in pop}
        with open(self.out / POPULATION_FILE, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["PATID", "INDEX_DATE"])
            for pid in pop:
                w.writerow([pid, index[pid].isoformat()])
        # corpus-level descriptives cover every loaded trial, not only the selection
        (self.out / "corpus_patterns.tsv").write_text(render_pattern_table(self.corpus), encoding="utf-8")
        neg, comp = corpus_negation_stats(self.corpus), corpus_computability(self.corpus)
        phases: dict[str, int] = {}
        for t in self.corpus:
            phases[t.phase.value] = phases.get(t.phase.value, 0) + 1
        stats = {
            "n_trials": len(self.corpus),
            "trials_by_phase": phases,
            "selected_trials": [t.trial_id for t in trials],
            "negation": neg.__dict__,
            "negation_text": neg.render(),
            "computability": comp.__dict__,
        }
        (self.out / "corpus_stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n",
                                                    encoding="utf-8")
        m, results = eligibility_matrix(store, pop, trials, index, self.config.policy, keep_results=True)
        m.write_csv(self.out / "eligibility_matrix.csv")
        write_verdicts_jsonl(results, trials, self.out / "verdicts.jsonl")
        warn = []
        for t in trials:
            if not t.computable_criteria():
                warn.append(f"{t.trial_id}: no computable criteria, eligibility is vacuous")
        return warn

    def stage_gist(self) -> list[str]:
        pop, index = self.population()
        m = EligibilityMatrix.read_csv(self._need("eligibility_matrix.csv"))
        reports = [gist_report(self.store, t, pop, self.config.policy, index, m) for t in self.trials]
        write_gist_reports(reports, self.out)
        return [w for r in reports for w in r.warnings]

    def stage_cptg(self) -> list[str]:
        m = EligibilityMatrix.read_csv(self._need("eligibility_matrix.csv"))
        g = {r.trial_id: r.mgist for r in read_gist_reports(self._need("gist_report.json"))}
        missing = [t for t in m.trials if t not in g]
        if missing:
            raise ValueError(f"no mGIST for trial(s) {', '.join(missing)}")
        cptg(m, [g[t] for t in m.trials]).write_csv(self.out / "cptg.csv")
        return []

    def stage_saes(self) -> list[str]:
        pop, _ = self.population()
        outc = compute_outcomes(self.store, pop, self.sae_map(), self.config.window_days)
        write_outcomes(outc, self.out / "outcomes.csv")
        with open(self.out / "sae_events.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["PATID", "SAE", "CODE", "DATE"])
            for o in outc:
                for ev in o.outcome.sae_events:
                    w.writerow([o.exposure.patient_id, ev.name, ev.code, ev.date.isoformat()])
        return []

    def stage_describe(self) -> list[str]:
        outc = read_outcomes(self._need("outcomes.csv"))
        scores = CptgVector.read_csv(self._need("cptg.csv")).as_dict()
        recs = analysis_records(self.store, outc, scores)
        write_records(recs, self.out / "analysis_records.csv")
        table = descriptive_table(recs)
        table.write_csv(self.out / "descriptive_table.csv")
        (self.out / "descriptive_table.tsv").write_text(table.render(), encoding="utf-8")
        return []

    def stage_wilcoxon(self) -> list[str]:
        m = EligibilityMatrix.read_csv(self._need("eligibility_matrix.csv"))
        y = {o.exposure.patient_id: o.outcome.sae_count for o in read_outcomes(self._need("outcomes.csv"))}
        counts = np.array([y[p] for p in m.patients], dtype=float)
        warn = []
        with open(self.out / "wilcoxon.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["TRIAL_ID", "N_ELIGIBLE", "MEAN_ELIGIBLE", "SD_ELIGIBLE", "N_NOT_ELIGIBLE",
                        "MEAN_NOT_ELIGIBLE", "SD_NOT_ELIGIBLE", "RANK_SUM", "Z", "P_VALUE", "METHOD"])
            for j, t in enumerate(m.trials):
                el = m.e[:, j].astype(bool)
                a, b = counts[el], counts[~el]
                desc = []
                for s in (a, b):
                    desc += [s.size, float(s.mean()) if s.size else math.nan,
                             float(s.std(ddof=1)) if s.size > 1 else math.nan]
                if a.size and b.size:
                    r = wilcoxon_rank_sum(a, b)
                    test = [r.statistic, r.z, r.p_two_sided, r.method]
                else:
                    warn.append(f"{t}: rank-sum test skipped, one group is empty")
                    test = [math.nan, math.nan, math.nan, "none"]
                w.writerow([t, *(repr(v) if isinstance(v, float) else v for v in desc + test)])
        return warn

    def stage_fit(self) -> list[str]:
        recs = read_records(self._need("analysis_records.csv"))
        spec = build_design_matrices(recs)
        fit = zinb_fit(spec)
        fit.write_csv(self.out / "zinb_fit.csv")
        with open(self.out / "effect_measures.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["PART", "PARAMETER", "COEF", "DELTA", "RATIO", "RELATIVE_CHANGE"])
            for e in zinb_effect_measures(fit, EFFECT_DELTAS):
                w.writerow([e.part, e.parameter, repr(e.coef), repr(e.delta), repr(e.ratio), repr(e.change)])
        lo, hi = fit.dispersion_ci()
        summary = {
            "n_obs": fit.n_obs, "n_zero": int((spec.y == 0).sum()), "converged": fit.converged,
            "n_iter": fit.n_iter, "message": fit.message, "loglik": fit.loglik, "alpha": fit.alpha,
            "alpha_ci": [lo, hi], "se_available": fit.se_available, "dispersion_note": dispersion_note(fit),
        }
        (self.out / "zinb_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                                    encoding="utf-8")
        warn = []
        if not fit.converged:
            warn.append(f"ZINB fit did not converge: {fit.message}")
        if not fit.se_available:
            warn.append("observed information is singular; standard errors unavailable")
        # |eta| > 30 puts the excess-zero probability within 1e-13 of 0 or 1
        n_sep = int(np.sum(np.abs(spec.Z @ fit.gamma) > 30.0))
        if n_sep:
            warn.append(f"zero part is separated: {n_sep} patients have fitted excess-zero probability at 0 or 1, "
                        "so its coefficients are not finite estimates")
        return warn

    def stage_report(self) -> list[str]:
        (self.out / SUMMARY_FILE).write_text(render_summary(self.out), encoding="utf-8")
        return []


# --------------------------------------------------------------------------
# summary document


def _csv_rows(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _md_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def _tsv_as_md(text: str) -> str:
    rows = [l.split("\t") for l in text.rstrip("\n").split("\n")]
    width = max(len(r) for r in rows)
    rows = [r + [""] * (width - len(r)) for r in rows]
    return _md_table(rows[0], rows[1:])


def _num(v: str, digits: int) -> str:
    x = float(v)
    return "NA" if math.isnan(x) else f"{x:.{digits}f}"


def render_summary(out: Path) -> str:
    """Markdown summary built only from export files in ``out``."""
    out = Path(out)
    parts = ["# Trial generalizability and serious adverse events\n"]

    man = json.loads((out / "ingest_manifest.json").read_text(encoding="utf-8"))
    pop = _csv_rows(out / POPULATION_FILE)
    acc = man["accepted_counts"]
    parts.append(f"Data set `{man['source']}`: {acc['demographic']:,} patients, {acc['diagnosis']:,} diagnoses, "
                 f"{acc['procedure']:,} procedures, {acc['lab']:,} lab results, {acc['medication']:,} "
                 f"medication records; {man['n_rejects']} rows rejected. "
                 f"Target population (cancer diagnosis followed by treatment): {len(pop):,} patients.\n")

    stats = json.loads((out / "corpus_stats.json").read_text(encoding="utf-8"))
    parts.append("## Eligibility criteria corpus\n")
    phases = ", ".join(f"{n} phase {p}" for p, n in sorted(stats["trials_by_phase"].items()))
    comp = stats["computability"]
    parts.append(f"{stats['n_trials']} trials ({phases}). {stats['negation_text']}. "
                 f"{comp['n_noncomputable']} ({comp['percent_noncomputable']:.2f}%) of the {comp['n_patterns']} "
                 f"unique criterion patterns were not computable.\n")
    parts.append("Most frequent criterion patterns:\n")
    parts.append(_tsv_as_md((out / "corpus_patterns.tsv").read_text(encoding="utf-8")))

    parts.append("## Characteristics of the target population\n")
    parts.append(_tsv_as_md((out / "descriptive_table.tsv").read_text(encoding="utf-8")))

    parts.append("## Study traits, mGIST and SAEs by eligibility\n")
    gist = {r["TRIAL_ID"]: r for r in _csv_rows(out / "gist_table.csv")}
    rows = []
    for r in _csv_rows(out / "wilcoxon.csv"):
        g = gist[r["TRIAL_ID"]]
        rows.append([r["TRIAL_ID"], g["TOTAL_TRAITS"], g["COMPUTABLE_TRAITS"], _num(g["MGIST"], 3),
                     f"{_num(r['MEAN_ELIGIBLE'], 1)} ({_num(r['SD_ELIGIBLE'], 1)})",
                     f"{_num(r['MEAN_NOT_ELIGIBLE'], 1)} ({_num(r['SD_NOT_ELIGIBLE'], 1)})",
                     _p_text(float(r["P_VALUE"]))])
    parts.append(_md_table(["Trial", "Total # of traits", "# of computable traits", "mGIST",
                            "Mean # of SAEs, eligible (SD)", "Not eligible (SD)", "Wilcoxon rank-sum P"], rows))
    parts.append("Selected trials: " + ", ".join(stats["selected_trials"]) + ". The cPTG score of each patient is "
                 "the mean over these trials of eligibility times mGIST (`cptg.csv`).\n")

    parts.append("## Zero-inflated negative binomial model\n")
    fit = _csv_rows(out / "zinb_fit.csv")
    summ = json.loads((out / "zinb_summary.json").read_text(encoding="utf-8"))
    for part, title, digits in (("zero", "Part 1: logistic part for excess zeros (no SAE)", 2),
                                ("count", "Part 2: negative binomial part", 3)):
        rows = []
        for r in fit:
            if r["PART"] != part:
                continue
            p = float(r["P_VALUE"])
            mark = " < 0.05" if p < 0.05 else ""
            rows.append([LABELS.get(r["PARAMETER"], r["PARAMETER"]), _num(r["ESTIMATE"], digits),
                         f"({_num(r['CI_LOW'], digits)}, {_num(r['CI_HIGH'], digits)})", _p_text(p) + mark])
        parts.append(f"{title}\n")
        parts.append(_md_table(["Parameter", "Estimate", "Wald 95% CI", "P value"], rows))
    disp = next(r for r in fit if r["PART"] == "dispersion")
    parts.append(f"Dispersion alpha = {_num(disp['ESTIMATE'], 3)} (95% CI {_num(disp['CI_LOW'], 3)} to "
                 f"{_num(disp['CI_HIGH'], 3)}); {summ['n_zero']:,} of {summ['n_obs']:,} patients have no SAE; "
                 f"log-likelihood {summ['loglik']:.3f}; converged: {'yes' if summ['converged'] else 'no'} "
                 f"after {summ['n_iter']} iterations.\n")
    if summ.get("dispersion_note"):
        parts.append(summ["dispersion_note"] + "\n")

    parts.append("## Effect measures\n")
    rows = []
    for r in _csv_rows(out / "effect_measures.csv"):
        kind = "odds of no SAE" if r["PART"] == "zero" else "expected SAE count"
        rows.append([LABELS.get(r["PARAMETER"], r["PARAMETER"]), kind, _num(r["DELTA"], 2), _num(r["RATIO"], 3),
                     f"{100 * float(r['RELATIVE_CHANGE']):+.1f}%"])
    parts.append(_md_table(["Covariate", "Outcome", "Increment", "Ratio", "Change"], rows))

    warns = (out / WARNINGS_FILE).read_text(encoding="utf-8").splitlines() if (out / WARNINGS_FILE).exists() else []
    parts.append("## Warnings\n")
    parts.append("".join(f"- {w}\n" for w in warns) if warns else "None.\n")
    return "\n".join(parts)
