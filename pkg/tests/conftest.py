"""Collects the acceptance criteria verdicts and prints one line per criterion."""

ACCEPTANCE: dict[int, tuple[bool, str]] = {}
CRITERIA = 8


def pytest_terminal_summary(terminalreporter):
    if not any(i.nodeid.startswith("tests/test_acceptance.py") or "test_acceptance" in i.nodeid
               for i in terminalreporter.stats.get("passed", []) + terminalreporter.stats.get("failed", [])):
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, CRITERIA + 1):
        ok, detail = ACCEPTANCE.get(n, (False, "no verdict (not selected, or errored before checking)"))
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
