"""Collects acceptance-criterion outcomes and prints one PASS/FAIL line per criterion."""

CRITERIA = {}  # nodeid -> (number, title)
OUTCOMES = {}  # number -> {test name: passed}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            CRITERIA[item.nodeid] = mark.args


def pytest_runtest_logreport(report):
    if report.nodeid not in CRITERIA:
        return
    if report.when == "call" or (report.failed or report.skipped) and report.when == "setup":
        num, _ = CRITERIA[report.nodeid]
        OUTCOMES.setdefault(num, {})[report.nodeid.split("::")[-1]] = report.passed


def pytest_terminal_summary(terminalreporter):
    if not OUTCOMES:
        return
    titles = {num: title for num, title in CRITERIA.values()}
    terminalreporter.section("acceptance criteria")
    for num in sorted(OUTCOMES):
        parts = OUTCOMES[num]
        failed = [name for name, ok in parts.items() if not ok]
        line = f"criterion {num} ({titles[num]}): {'FAIL' if failed else 'PASS'}"
        if failed:
            line += f"  [failing: {', '.join(failed)}]"
        terminalreporter.write_line(line)
