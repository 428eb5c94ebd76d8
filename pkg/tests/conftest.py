import acceptance_report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not acceptance_report.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in acceptance_report.RESULTS:
        terminalreporter.write_line(
            acceptance_report.format_line(name, passed, detail))
