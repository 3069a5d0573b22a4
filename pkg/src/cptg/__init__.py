"""Trial generalizability (GIST, cPTG) and serious-adverse-event modeling over CDM-style patient tables.

Modules:
    cdm          ingest and query the five CDM tables
    criteria     eligibility-criteria language, parser and corpus statistics
    eligibility  per-criterion verdicts and the patient x trial matrix
    gist         sGIST, mGIST and the composite cPTG score
    outcomes     target population, treatment exposure and SAE counts
    stats        rank-sum test, ZINB model, descriptive tables
    synth        synthetic cohorts with planted truth
    pipeline     staged batch run behind the ``cptg`` command
"""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
