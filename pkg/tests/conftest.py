import os
import warnings

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.register_profile("ci", max_examples=15, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def unit_grid():
    from kantoreg import Grid1D

    return Grid1D(0.0, 1.0, 1001)


@pytest.fixture(scope="session")
def demo_1d():
    from kantoreg.synth import gen_demo_1d

    return gen_demo_1d(2001)


@pytest.fixture(scope="session")
def disk_fixture_32():
    from kantoreg.synth import gen_demo_2d

    return gen_demo_2d(32)


@pytest.fixture(scope="session")
def disk_dataset_32(disk_fixture_32):
    from kantoreg.synth import demo_dataset_2d

    return demo_dataset_2d(32, fixture=disk_fixture_32)


@pytest.fixture(scope="session")
def small_mixed():
    """Small two-predictor, one-covariate synthetic dataset."""
    from kantoreg import Grid1D
    from kantoreg.synth import SynthConfig1D, gen_mixed_dataset

    return gen_mixed_dataset(SynthConfig1D(12, seed=3, grid=Grid1D(0.0, 1.0, 401)))


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion and echo it."""
    def emit(name: str, ok: bool, detail: str, seconds: float):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail} [{seconds:.2f} s]"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return emit
