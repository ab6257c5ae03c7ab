import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# Filled by tests/test_acceptance.py; printed after the run.
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def toy_config():
    from scod.config import load_config
    return load_config("toy")


@pytest.fixture(scope="session")
def reference_config():
    from scod.config import load_config
    return load_config("reference")


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    from scod.data import generate_synthetic_dataset
    out = tmp_path_factory.mktemp("synth_small")
    generate_synthetic_dataset(24, 3, 0.2, str(out))
    return out
