"""Collects the acceptance criteria outcomes and prints one line per criterion."""

ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        outcome = "PASS" if report.outcome == "passed" else "FAIL"
        ACCEPTANCE[props["criterion"]] = (props.get("title", ""), outcome, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, outcome, detail = ACCEPTANCE[n]
        line = f"criterion {n:2d} {outcome}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
