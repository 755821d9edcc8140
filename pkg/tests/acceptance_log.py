"""Shared PASS/FAIL log for the acceptance criteria, printed at the end of the session."""

RESULTS = []


def report(criterion: int, name: str, passed: bool, detail: str) -> None:
    line = f"criterion {criterion:2d} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    RESULTS.append((criterion, line))
    print(line)
