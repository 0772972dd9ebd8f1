import acceptance_log


def pytest_terminal_summary(terminalreporter):
    ran = any(
        "test_acceptance" in getattr(rep, "nodeid", "")
        for reports in terminalreporter.stats.values()
        for rep in reports
    )
    if not ran:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in range(1, acceptance_log.CRITERIA + 1):
        terminalreporter.write_line(acceptance_log.format_line(number))
