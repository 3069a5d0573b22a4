import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from cptg.pipeline import Pipeline, PipelineConfig  # noqa: E402
from cptg.synth import SynthConfig, generate_cohort  # noqa: E402


@pytest.fixture(scope="session")
def default_cohort(tmp_path_factory):
    """The bundled default synthetic cohort, written once per session."""
    root = tmp_path_factory.mktemp("synthetic") / "data"
    _, truth = generate_cohort(SynthConfig.default(), root)
    return root, truth


@pytest.fixture(scope="session")
def default_bundle(default_cohort, tmp_path_factory):
    data, truth = default_cohort
    out = tmp_path_factory.mktemp("bundle") / "out"
    Pipeline(PipelineConfig(data=data, out=out)).run()
    return out


def pytest_report_header(config):
    from cptg.kernels import BACKEND

    return f"cptg kernel backend: {BACKEND}"


def pytest_terminal_summary(terminalreporter):
    from util import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
