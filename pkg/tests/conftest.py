import acceptance_report


def pytest_terminal_summary(terminalreporter):
    if not acceptance_report.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(acceptance_report.LINES, key=lambda item: item[0]):
        terminalreporter.write_line(line)
