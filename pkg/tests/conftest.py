"""Shared pytest wiring: the acceptance tests report one verdict line per
criterion; collecting them here keeps the lines visible after capture."""

accept_lines: list = []


def pytest_terminal_summary(terminalreporter):
    if accept_lines:
        terminalreporter.section("acceptance criteria")
        for line in accept_lines:
            terminalreporter.write_line(line)
