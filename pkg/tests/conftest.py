import os

from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("quick", deadline=None, max_examples=10)
settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))

import pytest

from hclinpaint.config import RunConfig
from hclinpaint.synth import NoiseSource, make_dataset
from hclinpaint.training import load_dataset


@pytest.fixture(scope="session")
def small_dir(tmp_path_factory):
    """Sixteen 32x32 corrupted samples on disk."""
    d = tmp_path_factory.mktemp("small")
    make_dataset(16, 32, (0.1, 0.4), NoiseSource("image"), 0, d)
    return d


@pytest.fixture(scope="session")
def small_data(small_dir):
    return load_dataset(small_dir)


@pytest.fixture
def small_cfg():
    cfg = RunConfig()
    cfg.model.image_size = 32
    cfg.train.steps = 4
    return cfg


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance verdict: criterion(n, passed, detail)."""
    table = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(n: int, passed: bool, detail: str) -> bool:
        table[n] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    table = config.stash.get(ACCEPTANCE_KEY, {})
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(table):
        ok, detail = table[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
