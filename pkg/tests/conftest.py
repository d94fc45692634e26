import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_criteria: list[tuple[str, str, str]] = []


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        outcome = "PASS" if report.passed else "FAIL"
        _criteria.append((props["criterion"], outcome, props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, outcome, detail in sorted(_criteria, key=lambda c: int(c[0].split()[0])):
        terminalreporter.write_line(f"{outcome} criterion {name}" + (f": {detail}" if detail else ""))
