import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture
def note(request):
    """Attach a measurement summary to the current acceptance criterion line."""
    marker = request.node.get_closest_marker("criterion")

    def add(text):
        if marker is not None:
            _RESULTS.setdefault(marker.args[0], {"title": marker.args[1]}).setdefault("notes", []).append(text)

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    num, title = marker.args
    entry = _RESULTS.setdefault(num, {"title": title})
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        entry["passed"] = entry.get("passed", True) and rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_RESULTS):
        e = _RESULTS[num]
        status = "PASS" if e.get("passed") else "FAIL"
        notes = "; ".join(e.get("notes", []))
        terminalreporter.write_line(f"{status}  {num:>2}. {e['title']}" + (f"  [{notes}]" if notes else ""))
