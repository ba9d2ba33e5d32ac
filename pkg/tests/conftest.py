import re

_CRITERIA: dict[int, list[tuple[str, bool]]] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_c(\d+)_(\S+)", report.nodeid)
    # a failing fixture fails the criterion without reaching the call phase
    if m and (report.when == "call" or report.failed):
        _CRITERIA.setdefault(int(m.group(1)), []).append((m.group(2), report.passed))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        parts = _CRITERIA[n]
        ok = all(p for _, p in parts)
        detail = ", ".join(f"{name}={'pass' if p else 'FAIL'}" for name, p in parts)
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  ({detail})")
