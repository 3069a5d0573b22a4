"""Command-line entry point.

    cptg synth --out data/ [--config synth.cfg] [--seed N]
    cptg run --data data/ --out bundle/ [--phase 3] [--policy missing_means_unmet]
    cptg <stage> --data data/ --out bundle/      # re-run one stage

Pipeline stages: ingest, eligibility, gist, cptg, saes, describe, wilcoxon,
fit, report. Each reads earlier exports from ``--out``. A ``--config`` file
(flat ``key = value``) supplies defaults; flags given on the command line
take precedence over it.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .eligibility import EligibilityMatrix, Policy
from .gist import CptgVector
from .outcomes import read_outcomes
from .pipeline import STAGES, Pipeline, PipelineConfig, StageError
from .synth import GROUND_TRUTH_FILE, GroundTruth, SynthConfig, SynthConfigError, generate_cohort, verify_ground_truth

log = logging.getLogger("cptg")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value file with defaults for the flags below")
    p.add_argument("--data", type=Path, help="directory holding the five CDM tables")
    p.add_argument("--trials", type=Path, action="append",
                   help="trial file or directory (repeatable; default: bundled corpus)")
    p.add_argument("--phase", help="keep trials of this phase only, or 'all' (default 3)")
    p.add_argument("--sae-map", dest="sae_map", type=Path, help="SAE code map CSV (default: bundled)")
    p.add_argument("--window-days", dest="window_days", type=int, help="days after last treatment (default 180)")
    p.add_argument("--policy", choices=[p.value for p in Policy], help="missing-data policy")
    p.add_argument("--out", type=Path, help="output directory (default ./out)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cptg", description="Trial generalizability scores and SAE outcome models.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic CDM cohort with ground truth")
    s.add_argument("--config", type=Path, help="synthetic cohort config (default: bundled)")
    s.add_argument("--out", type=Path, required=True, help="directory for the generated tables")
    s.add_argument("--seed", type=int)
    s.add_argument("--n-patients", dest="n_patients", type=int)
    s.add_argument("--trials", help="trial file or directory the eligibility structure is planted for")
    s.add_argument("--phase")

    for name in STAGES + ("run",):
        _common(sub.add_parser(name, help="full pipeline" if name == "run" else f"{name} stage"))

    v = sub.add_parser("verify", help="compare a pipeline bundle with synthetic ground truth")
    v.add_argument("--data", type=Path, required=True, help="synthetic data directory (holds ground_truth.csv)")
    v.add_argument("--out", type=Path, required=True, help="pipeline output directory")
    return ap


def _synth(args) -> int:
    cfg = SynthConfig.load(args.config) if args.config else SynthConfig.default()
    changes = {k: getattr(args, k) for k in ("seed", "n_patients", "trials", "phase") if getattr(args, k) is not None}
    if "phase" in changes and changes["phase"].lower() == "all":
        changes["phase"] = None
    cfg = cfg.replace(**changes)
    out, truth = generate_cohort(cfg, args.out)
    print(f"wrote {cfg.n_patients} patients ({len(truth.patients)} in the target population) to {out}")
    return 0


def _verify(args) -> int:
    truth = GroundTruth.read_csv(args.data / GROUND_TRUTH_FILE)
    m = EligibilityMatrix.read_csv(args.out / "eligibility_matrix.csv")
    scores = CptgVector.read_csv(args.out / "cptg.csv")
    outc = read_outcomes(args.out / "outcomes.csv")
    found = verify_ground_truth(truth, m, scores, outc)
    for d in found:
        print(d)
    print(f"{len(found)} discrepancies")
    return 1 if found else 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "synth":
            return _synth(args)
        if args.command == "verify":
            return _verify(args)
        file_values = PipelineConfig.read_file(args.config) if args.config else {}
        cfg = PipelineConfig.build(file_values, **{k: getattr(args, k) for k in
                                                   ("data", "trials", "phase", "sae_map", "window_days",
                                                    "policy", "out")})
        pipe = Pipeline(cfg)
        if args.command == "run":
            warnings = pipe.run()
        else:
            warnings = pipe.run_stage(args.command)
    except StageError as exc:
        print(f"error: stage {exc.stage} failed: {exc.cause}", file=sys.stderr)
        return 1
    except (SynthConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"{args.command}: done, outputs in {cfg.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
