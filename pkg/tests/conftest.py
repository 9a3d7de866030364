import re

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")
_outcomes: dict[tuple[int, str], str] = {}
_details: dict[tuple[int, str], str] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    key = (int(m.group(1)), m.group(2))
    if report.when == "call" and report.capstdout:
        _details[key] = report.capstdout
    if report.when == "call" or report.outcome != "passed":
        if _outcomes.get(key) != "FAIL":
            _outcomes[key] = {"passed": "PASS", "skipped": "SKIP"}.get(report.outcome, "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for (num, name), outcome in sorted(_outcomes.items()):
        terminalreporter.write_line(f"criterion {num} ({name.replace('_', ' ')}): {outcome}")
    for (num, _), text in sorted(_details.items()):
        for line in text.strip().splitlines():
            terminalreporter.write_line(f"  [{num}] {line}")
