import csv
import dataclasses
import datetime as dt
import math
import random

import numpy as np
import pytest

from cptg.criteria import parse_trial_file
from cptg.eligibility import EligibilityMatrix
from cptg.gist import CptgVector
from cptg.outcomes import SaeCodeMap, read_outcomes
from cptg.pipeline import Pipeline, PipelineConfig
from cptg.synth import (GROUND_TRUTH_FILE, GroundTruth, SynthConfig, SynthConfigError, build_cohort, generate_cohort,
                        streams, verify_ground_truth)
from util import read_bytes_tree

SMALL = SynthConfig.default().replace(n_patients=300, seed=11)
UPTO_SAES = ("ingest", "eligibility", "gist", "cptg", "saes")


def _verify(data, out):
    truth = GroundTruth.read_csv(data / GROUND_TRUTH_FILE)
    m = EligibilityMatrix.read_csv(out / "eligibility_matrix.csv")
    return verify_ground_truth(truth, m, CptgVector.read_csv(out / "cptg.csv"), read_outcomes(out / "outcomes.csv"))


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    data, truth = generate_cohort(SMALL, root / "data")
    Pipeline(PipelineConfig(data=data, out=root / "out")).run(UPTO_SAES)
    return root, data, truth


def test_streams_are_independent_and_seeded():
    a, b = streams(5), streams(5)
    assert [g.random() for g in a.values()] == [g.random() for g in b.values()]
    c = streams(5)
    assert len({c[k].random() for k in c}) == len(c)


def test_same_seed_same_bytes(tmp_path):
    generate_cohort(SMALL, tmp_path / "a")
    generate_cohort(SMALL, tmp_path / "b")
    assert read_bytes_tree(tmp_path / "a") == read_bytes_tree(tmp_path / "b")
    generate_cohort(SMALL.replace(seed=12), tmp_path / "c")
    assert read_bytes_tree(tmp_path / "a") != read_bytes_tree(tmp_path / "c")


def test_outcome_parameters_leave_other_tables_alone(tmp_path):
    generate_cohort(SMALL, tmp_path / "a")
    generate_cohort(SMALL.replace(alpha=1.3), tmp_path / "b")
    for name in ("demographic.csv", "procedure.csv", "lab.csv", "medication.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_single_patient(tmp_path):
    _, truth = generate_cohort(SMALL.replace(n_patients=1, frac_non_target=0.0), tmp_path)
    assert len(truth.patients) == 1
    assert truth.cptg.shape == (1,)


def test_zero_fraction_at_scale():
    c = build_cohort(SynthConfig.default().replace(n_patients=5000, frac_non_target=0.0, seed=3))
    n = len(c.truth.y)
    assert n == 5000
    p0 = c.p_zero
    assert abs(p0.mean() - 0.80) <= 0.06
    observed = float(np.mean(c.truth.y == 0))
    half = 2.576 * math.sqrt(float(np.sum(p0 * (1 - p0)))) / n
    assert abs(observed - p0.mean()) <= half


def test_pipeline_recovers_planted_truth(small):
    root, data, truth = small
    assert _verify(data, root / "out") == []
    m = EligibilityMatrix.read_csv(root / "out" / "eligibility_matrix.csv")
    assert np.array_equal(m.e.mean(axis=0), truth.mgist)


def test_one_planted_change_gives_one_discrepancy(small, tmp_path):
    root, data, truth = small
    bumped = dataclasses.replace(truth, y=truth.y.copy())
    bumped.y[3] += 1
    m = EligibilityMatrix.read_csv(root / "out" / "eligibility_matrix.csv")
    found = verify_ground_truth(bumped, m, CptgVector.read_csv(root / "out" / "cptg.csv"),
                                read_outcomes(root / "out" / "outcomes.csv"))
    assert [(d.patient_id, d.field) for d in found] == [(truth.patients[3], "SAE_COUNT")]


def test_one_added_sae_row_gives_one_discrepancy(small, tmp_path):
    root, data, truth = small
    copy = tmp_path / "data"
    copy.mkdir()
    for f in data.iterdir():
        (copy / f.name).write_bytes(f.read_bytes())
    outc = {o.exposure.patient_id: o for o in read_outcomes(root / "out" / "outcomes.csv")}
    pid = truth.patients[0]
    day = outc[pid].exposure.first_px_date + dt.timedelta(days=1)
    with open(copy / "diagnosis.csv", "a", newline="") as fh:
        # R04.0 is epistaxis; a distinct SAE on a fresh day adds exactly one count
        csv.writer(fh, lineterminator="\n").writerow([pid, "ICD10CM", "R04.0", day.isoformat()])
    sae = SaeCodeMap.load()
    with open(data / "diagnosis.csv", newline="") as fh:
        rows = [r for r in csv.reader(fh) if r[0] == pid and r[3] == day.isoformat()]
    assert not any(r[1] == "ICD10CM" and sae.resolve("ICD10CM", r[2]) == "Epistaxis" for r in rows)
    out = tmp_path / "out"
    Pipeline(PipelineConfig(data=copy, out=out)).run(UPTO_SAES)
    found = _verify(copy, out)
    assert [(d.patient_id, d.field) for d in found] == [(pid, "SAE_COUNT")]


def test_shuffled_rows_change_nothing(small, tmp_path):
    root, data, truth = small
    rng = random.Random(0)
    copy = tmp_path / "data"
    copy.mkdir()
    for f in data.iterdir():
        lines = f.read_text().splitlines(keepends=True)
        if f.suffix == ".csv" and f.name != GROUND_TRUTH_FILE:
            body = lines[1:]
            rng.shuffle(body)
            lines = lines[:1] + body
        (copy / f.name).write_text("".join(lines))
    out = tmp_path / "out"
    Pipeline(PipelineConfig(data=copy, out=out)).run(UPTO_SAES)
    assert _verify(copy, out) == []
    for name in ("eligibility_matrix.csv", "cptg.csv", "outcomes.csv", "gist_report.json"):
        assert (out / name).read_bytes() == (root / "out" / name).read_bytes()


def test_infeasible_zero_fraction_raises():
    with pytest.raises(SynthConfigError, match="infeasible"):
        build_cohort(SMALL.replace(target_zero_fraction=0.3, zero_fraction_tolerance=0.02))


def test_config_text_round_trip():
    cfg = SynthConfig.default()
    assert SynthConfig.from_text(cfg.to_text()) == cfg
    assert SynthConfig.from_text(cfg.to_text(), seed=9).seed == 9


@pytest.mark.parametrize("line,msg", [
    ("bogus = 1", "unknown key"),
    ("female = 1.5", "probability"),
    ("race.NHW = 0.9", "sum to 1"),
    ("alpha = -1", "alpha"),
    ("gamma.height = 1", "unknown gamma"),
    ("lab.1920-8 = normal 30 U/L", "expected"),
])
def test_config_errors(line, msg):
    key = line.split("=")[0].strip()
    kept = [ln for ln in SynthConfig.default().to_text().splitlines() if ln.split("=")[0].strip() != key]
    with pytest.raises(SynthConfigError, match=msg):
        SynthConfig.from_text("\n".join(kept + [line]) + "\n")


def test_trial_reaching_into_sae_codes_is_refused():
    t = parse_trial_file("TRIAL X PHASE 3\nEXCLUDE trait=bleed DIAGNOSIS system=ICD10CM codes=I60.* PRESENT\n")
    with pytest.raises(SynthConfigError, match="overlaps SAE"):
        build_cohort(SMALL, trials=[t])


def test_missing_lab_distribution_is_refused():
    t = parse_trial_file("TRIAL X PHASE 3\nINCLUDE trait=ldh LAB loinc=2532-0 <= 250 U/L\n")
    with pytest.raises(SynthConfigError, match="lab.<loinc>"):
        build_cohort(SMALL, trials=[t])


def test_load_resolves_trials_relative_to_file(tmp_path):
    (tmp_path / "t").mkdir()
    (tmp_path / "t" / "x.trial").write_text("TRIAL X PHASE 2\nINCLUDE trait=age DEMOGRAPHIC age_at_index >= 18\n")
    (tmp_path / "s.cfg").write_text("trials = t\nphase = all\nn_patients = 20\n")
    cfg = SynthConfig.load(tmp_path / "s.cfg")
    assert [t.trial_id for t in cfg.load_trials()] == ["X"]
    with pytest.raises(SynthConfigError, match="no trials"):
        cfg.replace(phase="3").load_trials()
