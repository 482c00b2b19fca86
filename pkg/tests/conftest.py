import sys
from collections import defaultdict
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> list of (test id, outcome, details)
_CRITERIA = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion exercised by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    # a failure in setup (e.g. a training fixture) or the call phase counts against the criterion
    if report.when == "call" or (report.when == "setup" and not report.passed):
        details = [v for k, v in item.user_properties if k == "detail"]
        _CRITERIA[marker.args[0]].append((item.name, report.outcome, details))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        runs = _CRITERIA[number]
        ok = all(outcome == "passed" for _, outcome, _ in runs)
        details = "; ".join(d for _, _, ds in runs for d in ds)
        failed = [name for name, outcome, _ in runs if outcome != "passed"]
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {details}"
        if failed:
            line += f"  [failed: {', '.join(failed)}]"
        tr.write_line(line)
