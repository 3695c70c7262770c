import warnings

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo",
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("repo")

ACCEPTANCE = {}


@pytest.fixture(scope="session")
def prototype_ar():
    from rxoptics.designer.ar import PROTOTYPE, build_ar_system

    return build_ar_system(PROTOTYPE)


@pytest.fixture(scope="session")
def lens_minus1():
    """Optimised -1 D prescription lens (step one of the design pipeline)."""
    from rxoptics.designer.lens import design_prescription_lens
    from rxoptics.eye import Prescription

    return design_prescription_lens(Prescription(-1.0), 5.0, "COP")


@pytest.fixture(scope="session")
def lens_astig():
    from rxoptics.designer.lens import design_prescription_lens
    from rxoptics.eye import Prescription

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return design_prescription_lens(Prescription(-2.0, -2.0, 30.0), 5.0, "COP")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    number, title = marker.args
    ok = call.excinfo is None
    prev = ACCEPTANCE.get(number)
    ACCEPTANCE[number] = (title, ok if prev is None else prev[1] and ok)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title}")
