import re

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_")
_outcomes = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.outcome != "passed":
        _outcomes[n] = (report.outcome, report.longrepr)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    from test_acceptance import DESCRIPTIONS

    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        outcome, longrepr = _outcomes[n]
        status = "PASS" if outcome == "passed" else "FAIL"
        line = f"{status} criterion {n:2d}: {DESCRIPTIONS[n]}"
        if status == "FAIL" and longrepr is not None:
            crash = getattr(longrepr, "reprcrash", None)
            if crash is not None:
                line += f" -- {crash.message.splitlines()[0]}"
        terminalreporter.write_line(line)
