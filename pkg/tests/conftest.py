"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""
import pytest

_CRITERIA = {}   # nodeid -> (id, title, gating)
_RESULTS = {}    # nodeid -> (outcome, detail)


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _CRITERIA[item.nodeid] = (m.args[0], m.args[1], m.kwargs.get("gating", True))


def pytest_runtest_logreport(report):
    if report.nodeid not in _CRITERIA:
        return
    detail = dict(report.user_properties).get("detail", "")
    if report.when == "call" or report.failed:
        outcome = "PASS" if report.passed else "FAIL"
        if report.failed and not detail:
            msg = str(report.longrepr).strip().splitlines()
            detail = msg[-1] if msg else ""
        prev = _RESULTS.get(report.nodeid)
        if prev is None or prev[0] == "PASS":
            _RESULTS[report.nodeid] = (outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for nodeid, (cid, title, gating) in _CRITERIA.items():
        if nodeid not in _RESULTS:
            continue
        outcome, detail = _RESULTS[nodeid]
        if not gating:
            outcome = "INFO" if outcome == "PASS" else "INFO-ERROR"
        tr.write_line(f"{outcome:<5} {cid:<8} {title}" + (f" :: {detail}" if detail else ""))


@pytest.fixture
def detail(record_property):
    """Attach a one-line measurement summary to the criterion line."""
    def put(text):
        record_property("detail", text)
        print(text)
    return put
