from __future__ import annotations

# (criterion number, passed, detail) recorded by the acceptance suite
ACCEPTANCE: list[tuple[int, bool, str]] = []


def record(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE.append((number, bool(passed), detail))
    print(_line(number, passed, detail))


def _line(number: int, passed: bool, detail: str) -> str:
    return f"acceptance {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(_line(number, passed, detail))
