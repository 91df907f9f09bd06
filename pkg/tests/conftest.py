import sys

ACCEPTANCE = {}


def record(number: int, passed: bool, detail: str) -> None:
    """Store a criterion outcome and echo it past pytest's output capture."""
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    sys.__stdout__.write("\n" + line + "\n")
    sys.__stdout__.flush()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
