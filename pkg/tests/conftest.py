"""Collects acceptance-test outcomes and prints one line per criterion
at the end of the run."""

import re

_CRITERIA = {
    1: "loss correctness",
    2: "gradient fidelity",
    3: "metric oracle equivalence",
    4: "Pearson correctness",
    5: "end-to-end learning",
    6: "ranking-vs-regression contrast",
    7: "determinism",
    8: "format robustness",
}

_NODE = re.compile(r"test_acceptance\.py::test_c(\d+)")
_outcomes: dict[int, bool] = {}


def pytest_runtest_logreport(report):
    match = _NODE.search(report.nodeid)
    if not match:
        return
    n = int(match.group(1))
    if report.failed:
        _outcomes[n] = False
    elif report.when == "call" and report.passed and n not in _outcomes:
        _outcomes[n] = True


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        title = _CRITERIA.get(n, "unknown")
        status = "PASS" if _outcomes[n] else "FAIL"
        terminalreporter.write_line(f"criterion {n} ({title}): {status}")
