import numpy as np
import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number")


@pytest.fixture
def rng():
    return np.random.default_rng(20191107)


@pytest.fixture
def detail(request):
    """Tests append human-readable measurements shown in the criterion summary."""
    notes = []
    request.node.user_properties.append(("detail", notes))
    return notes


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    notes = dict(item.user_properties).get("detail", [])
    n, title = mark.args
    _CRITERIA[n] = (title, "PASS" if rep.passed else "FAIL", "; ".join(notes),
                    rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, notes, seconds = _CRITERIA[n]
        line = f"criterion {n:2d} {status}  {title} ({seconds:.1f} s)"
        tr.write_line(line + (f"  [{notes}]" if notes else ""))
