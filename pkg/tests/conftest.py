_ACCEPTANCE = []


def pytest_runtest_logreport(report):
    if report.when == "call":
        _ACCEPTANCE.extend(v for k, v in report.user_properties if k == "acceptance")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
