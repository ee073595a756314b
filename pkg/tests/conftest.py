# PASS/FAIL lines from the acceptance suite, echoed in the terminal summary so that they
# survive pytest's output capture
CRITERION_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)
