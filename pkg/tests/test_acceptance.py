"""Acceptance criteria, one test per criterion.

Each test records a one-line PASS/FAIL verdict with the measured numbers; the
lines are printed together at the end of the pytest run (see conftest.py).
Run alone with ``python -m pytest tests/test_acceptance.py`` or
``python tests/test_acceptance.py``.
"""
import datetime as dt
import itertools
import math
import random
import time
import timeit

import numpy as np
import pytest

from cptg.cdm import ingest_cohort
from cptg.criteria import DslSyntaxError, load_corpus, parse_trial_file, serialize_trial
from cptg.eligibility import eligibility_matrix
from cptg.gist import cptg, gist_report, mgist, mgist_from_matrix
from cptg.outcomes import (SaeCodeMap, compute_outcomes, count_saes, exposure_summary, select_target_population)
from cptg.pipeline import Pipeline, PipelineConfig, bundled_corpus_dir
from cptg.stats.design import COLUMNS, build_design_matrices, read_records
from cptg.stats.ranksum import exact_p_value, midranks, wilcoxon_rank_sum
from cptg.stats.zinb import (ZinbSpec, odds_ratio, relative_change, simulate_zinb, zinb_fit, zinb_loglik)
from cptg.synth import SynthConfig, build_cohort, write_cohort
from oracles import (column_steps, enumerate_rank_sum_p, fd_gradient, gradient_rel_error, oracle_mgist,
                     zinb_loglik_reference)
from util import ACCEPTANCE, D, StoreBuilder, random_trial_text, random_treated_cohort, read_bytes_tree, treated

N_REPLICATES = 20
RECOVERY_SEEDS = [20190315 + i for i in range(N_REPLICATES)]


def record(number, title, ok, detail):
    ACCEPTANCE[number] = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    assert ok, ACCEPTANCE[number]


# --------------------------------------------------------------------------


def test_criterion_01_cptg_arithmetic():
    e, g = np.array([[1, 1, 0, 0]]), [0.547, 0.750, 0.584, 0.307]
    got = float(cptg(e, g).scores[0])
    per_call = min(timeit.repeat(lambda: cptg(e, g), number=200, repeat=5)) / 200
    ok = abs(got - 0.32425) <= 1e-12 and per_call < 1e-3
    record(1, "cPTG arithmetic", ok, f"cptg = {got!r} (target 0.32425 +-1e-12), {per_call * 1e6:.1f} us per call")


def test_criterion_02_mgist_oracle(tmp_path):
    corpus = load_corpus(bundled_corpus_dir())
    rng = random.Random(2)
    mismatches = bound_violations = 0
    checked = []
    for rep in range(20):
        n = rng.randint(100, 1000)
        trials = rng.sample(corpus, rng.randint(1, 5))
        cfg = SynthConfig.default().replace(seed=7000 + rep, n_patients=n, phase=None, target_zero_fraction=None)
        data = write_cohort(build_cohort(cfg, trials=trials), tmp_path / f"c{rep}")
        store = ingest_cohort(data)
        pop = sorted(select_target_population(store))
        index = {p: exposure_summary(store, p).first_px_date for p in pop}
        m = eligibility_matrix(store, pop, trials, index)
        col = mgist_from_matrix(m)
        for j, t in enumerate(trials):
            want = oracle_mgist(store, t, pop, index)
            direct = mgist(store, t, pop, index_dates=index)
            if not (col[j] == want == direct):
                mismatches += 1
            rep_ = gist_report(store, t, pop, index_dates=index, matrix=m)
            if rep_.sgist and rep_.mgist > min(rep_.sgist.values()):
                bound_violations += 1
            checked.append(len(pop))
    ok = mismatches == 0 and bound_violations == 0
    record(2, "mGIST oracle equivalence", ok,
           f"{len(checked)} trial columns on 20 cohorts (N {min(checked)}..{max(checked)}, K 1..5): "
           f"{mismatches} oracle mismatches, {bound_violations} mGIST > min sGIST")


def test_criterion_03_zinb_gradient():
    c = build_cohort(SynthConfig.default().replace(n_patients=200, frac_non_target=0.0, seed=33))
    spec = ZinbSpec(c.truth.y, c.X, c.X, COLUMNS, COLUMNS)
    assert spec.y.shape == (200,)
    truth = np.concatenate([c.config.gamma_vector, c.config.beta_vector, [math.log(c.config.alpha)]])
    rms = np.concatenate([np.sqrt(np.mean(c.X ** 2, axis=0))] * 2 + [[1.0]])
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        theta = truth + rng.normal(scale=0.5, size=truth.size) / np.maximum(1.0, rms)
        g = zinb_loglik(theta, spec)[1]
        fd = fd_gradient(lambda th: zinb_loglik(th, spec)[0], theta, column_steps(theta, spec))
        worst = max(worst, gradient_rel_error(g, fd))
    elapsed = time.perf_counter() - t0
    record(3, "ZINB gradient check", worst <= 1e-6 and elapsed < 5,
           f"max relative error {worst:.2e} over 20 points (limit 1e-6), {elapsed:.2f} s")


@pytest.fixture(scope="module")
def recovery_fits():
    """Direct fits of the planted design at N = 5000 for each replicate seed."""
    out = []
    for seed in RECOVERY_SEEDS:
        cfg = SynthConfig.default().replace(n_patients=5000, frac_non_target=0.0, seed=seed)
        c = build_cohort(cfg)
        t0 = time.perf_counter()
        fit = zinb_fit(ZinbSpec(c.truth.y, c.X, c.X, COLUMNS, COLUMNS))
        out.append((cfg, c, fit, time.perf_counter() - t0))
    return out


def test_criterion_04_zinb_recovery(recovery_fits):
    cfg = recovery_fits[0][0]
    truth = np.concatenate([cfg.gamma_vector, cfg.beta_vector, [math.log(cfg.alpha)]])
    names = [f"gamma.{n}" for n in COLUMNS] + [f"beta.{n}" for n in COLUMNS] + ["log_alpha"]
    hits = np.zeros(truth.size, dtype=int)
    zero_frac, slowest, all_converged = [], 0.0, True
    for _, c, fit, secs in recovery_fits:
        lo, hi, _ = fit.wald()
        hits += (lo <= truth) & (truth <= hi)
        zero_frac.append(float(np.mean(c.truth.y == 0)))
        slowest = max(slowest, secs)
        all_converged &= fit.converged and fit.se_available
    worst = int(hits.min())
    ok = worst >= 17 and slowest < 60 and all_converged
    record(4, "ZINB recovery", ok,
           f"coverage per parameter min {worst}/20 ({names[int(hits.argmin())]}), median {int(np.median(hits))}/20; "
           f"zeros {min(zero_frac):.3f}..{max(zero_frac):.3f}; slowest fit {slowest:.2f} s; "
           f"all converged: {all_converged}")


def test_criterion_05_zinb_grid_oracle():
    gaps = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        ones = np.ones((50, 1))
        y = simulate_zinb(rng, ones, ones, [-0.5], [0.8], 1.0)
        spec = ZinbSpec(y, ones, ones, ("intercept",), ("intercept",))
        fit = zinb_fit(spec)
        g0 = np.linspace(-3.0, 3.0, 21)
        b0 = np.linspace(-2.0, 3.0, 21)
        la = np.linspace(-3.0, 3.0, 21)
        best = max(zinb_loglik_reference(np.array([a, b, c]), y, ones, ones)
                   for a, b, c in itertools.product(g0, b0, la))
        ll = zinb_loglik_reference(fit.params, y, ones, ones)
        gaps.append(ll - best)
    worst = min(gaps)
    record(5, "ZINB grid oracle", worst >= -1e-4,
           f"fitted minus 21^3 grid maximum log-likelihood, worst over 5 data sets: {worst:+.4f} (limit -1e-4)")


def test_criterion_06_directional(recovery_fits, tmp_path):
    k = COLUMNS.index("cptg") + len(COLUMNS)
    hits, coefs = 0, []
    for _, _, fit, _ in recovery_fits:
        _, _, p = fit.wald()
        coefs.append(fit.params[k])
        hits += fit.params[k] < 0 and p[k] < 0.05
    # the pipeline, run on the first replicate's tables, must fit the same design
    cfg, c, fit, _ = recovery_fits[0]
    out = tmp_path / "out"
    Pipeline(PipelineConfig(data=write_cohort(c, tmp_path / "data"), out=out)).run(
        ("ingest", "eligibility", "gist", "cptg", "saes", "describe"))
    spec = build_design_matrices(read_records(out / "analysis_records.csv"))
    order = np.argsort(np.array(c.truth.patients))
    same_design = np.array_equal(spec.X, c.X[order]) and np.array_equal(spec.y, c.truth.y[order])
    ok = hits >= 18 and same_design
    record(6, "Directional cPTG effect", ok,
           f"beta_cptg < 0 with p < 0.05 in {hits}/20 runs (planted -1.0, estimates "
           f"{min(coefs):.3f}..{max(coefs):.3f}); pipeline design identical to planted: {same_design}")


def test_criterion_07_effect_identities():
    got = [odds_ratio(-0.78), relative_change(0.024), -relative_change(-1.079, 0.1)]
    want = ["0.458", "0.0243", "0.102"]
    shown = [f"{v:.3g}" for v in got]
    record(7, "Effect-measure identities", shown == want,
           f"exp(-0.78) = {shown[0]}, exp(0.024) - 1 = {shown[1]}, 1 - exp(-1.079*0.1) = {shown[2]}")


def test_criterion_08_wilcoxon():
    rng = random.Random(8)
    pairs = [(a, b) for a in range(1, 9) for b in range(1, 9)]
    exact_bad, approx_gaps = 0, []
    for i in range(200):
        na, nb = pairs[i % len(pairs)]
        a = [rng.randint(0, 9) for _ in range(na)]
        b = [rng.randint(0, 9) for _ in range(nb)]
        enum = enumerate_rank_sum_p(a, b)
        ranks = midranks(a + b)
        r = wilcoxon_rank_sum(a, b)
        if r.method != "exact" or exact_p_value(ranks[:na], ranks) != enum or r.p_two_sided != float(enum):
            exact_bad += 1
        if (na, nb) == (8, 8):
            approx_gaps.append(abs(wilcoxon_rank_sum(a, b, method="normal").p_two_sided - float(enum)))
    worst = max(approx_gaps)
    ok = exact_bad == 0 and worst <= 0.01
    record(8, "Wilcoxon exactness", ok,
           f"exact path differs from enumeration on {exact_bad}/200 data sets; normal approximation at 8,8 "
           f"off by at most {worst:.4f} on {len(approx_gaps)} data sets (limit 0.01)")


def test_criterion_09_sae_window():
    sae = SaeCodeMap.load()
    first, last = D(2017, 2, 1), D(2017, 3, 1)
    cases = {"first_px": (first, 0), "first_px + 1": (first + dt.timedelta(days=1), 1),
             "last_px + 180": (last + dt.timedelta(days=180), 1), "last_px + 181": (last + dt.timedelta(days=181), 0)}
    wrong = []
    for label, (day, want) in cases.items():
        s = treated(StoreBuilder(), "A", px_dates=(first, last)).dx("A", "I60.9", day).build()
        if count_saes(s, "A", sae, exposure_summary(s, "A")).sae_count != want:
            wrong.append(label)
    s = random_treated_cohort(random.Random(9), 500)
    pids = select_target_population(s)
    windows = (0, 1, 30, 90, 180, 181, 365, 2000)
    counts = [np.array([o.outcome.sae_count for o in compute_outcomes(s, pids, sae, w)]) for w in windows]
    monotone = all(np.all(a <= b) for a, b in zip(counts, counts[1:]))
    ok = not wrong and monotone and len(pids) == 500
    record(9, "SAE window boundaries", ok,
           f"boundary cases wrong: {wrong or 'none'}; counts monotone over windows {windows} on {len(pids)} "
           f"patients: {monotone}")


def test_criterion_10_parser_round_trip():
    corpus = load_corpus(bundled_corpus_dir())
    bad_corpus = sum(parse_trial_file(serialize_trial(t)) != t for t in corpus)
    bad_random = 0
    for seed in range(100):
        t = parse_trial_file(random_trial_text(random.Random(seed), f"R{seed}"))
        bad_random += parse_trial_file(serialize_trial(t)) != t
    rng = random.Random(10)
    crashes = diagnosed = 0
    for seed in range(300):
        text = random_trial_text(random.Random(1000 + seed), "M")
        i = rng.randrange(len(text) + 1)
        text = text[:i] + rng.choice(["<", "[", '"', "=", ",", "]", "@", " 1e", "\t?"]) + text[i:]
        try:
            parse_trial_file(text)
        except DslSyntaxError as exc:
            diagnosed += all(e.line >= 1 and e.column >= 1 for e in exc.errors)
        except Exception:  # noqa: BLE001 - any other exception is a crash
            crashes += 1
    ok = bad_corpus == 0 and bad_random == 0 and crashes == 0
    record(10, "Parser round-trip", ok,
           f"fixpoint failures: {bad_corpus}/{len(corpus)} bundled, {bad_random}/100 random; "
           f"mutated files: {diagnosed} diagnosed with line:column, {crashes} crashes")


def test_criterion_11_determinism(default_cohort, default_bundle, tmp_path):
    from cptg.cli import main

    data, _ = default_cohort
    again = tmp_path / "again"
    Pipeline(PipelineConfig(data=data, out=again)).run()
    a, b = read_bytes_tree(default_bundle), read_bytes_tree(again)
    diff = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    status = main(["verify", "--data", str(data), "--out", str(default_bundle)])
    ok = not diff and status == 0
    record(11, "End-to-end determinism", ok,
           f"{len(a)} bundle files, {len(diff)} differ between runs; verify exit status {status} "
           f"({'0 discrepancies' if status == 0 else 'discrepancies found'})")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
