"""Shared test plumbing: the acceptance suite records one line per criterion
and this hook replays them in the terminal summary so they are visible even
when output capture is on."""

_criterion_lines = []


def record_criterion(line: str):
    _criterion_lines.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for line in _criterion_lines:
            terminalreporter.write_line(line)
