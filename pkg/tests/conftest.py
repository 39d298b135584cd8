import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------- acceptance reporting

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number n")


def pytest_runtest_logreport(report):
    n = dict(report.user_properties).get("criterion")
    if n is None:
        return
    detail = dict(report.user_properties).get("detail", "")
    if report.when == "call" or report.failed:
        if report.failed:
            _criteria[n] = ("FAIL", detail or report.longreprtext.strip().splitlines()[-1][:160])
        elif n not in _criteria or report.when == "call":
            _criteria[n] = ("PASS", detail)


@pytest.fixture
def criterion(request, record_property):
    """Tag the test with its criterion number; call ``.detail(text)`` to attach measured values."""
    mark = request.node.get_closest_marker("criterion")
    record_property("criterion", mark.args[0])

    class _Detail:
        @staticmethod
        def detail(text: str) -> None:
            props = request.node.user_properties
            props[:] = [p for p in props if p[0] != "detail"] + [("detail", text)]
            print(f"criterion {mark.args[0]}: {text}")

    return _Detail


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        status, detail = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
