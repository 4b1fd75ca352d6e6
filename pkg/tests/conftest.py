"""Acceptance bookkeeping: one pass/fail line per criterion in the terminal summary."""
import pytest

_RESULTS = {}
_DETAILS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    key = marker.args
    failed = rep.failed or (rep.when == "call" and rep.skipped)
    if rep.when == "call" or failed:
        previous = _RESULTS.get(key, "PASS")
        _RESULTS[key] = "FAIL" if failed or previous == "FAIL" else "PASS"


@pytest.fixture
def measured(request):
    """Record a measured value shown next to the criterion's pass/fail line."""
    marker = request.node.get_closest_marker("criterion")

    def note(text):
        if marker is not None:
            _DETAILS.setdefault(marker.args, []).append(text)

    return note


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), status in sorted(_RESULTS.items()):
        detail = "; ".join(_DETAILS.get((number, title), []))
        line = f"criterion {number:2d} {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
