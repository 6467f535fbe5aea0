"""Collects acceptance verdicts and prints them after the run."""

ACCEPTANCE: dict[int, tuple[bool, str]] = {}
N_CRITERIA = 10


def record(n: int, ok: bool, detail: str) -> bool:
    ok = bool(ok)
    prev = ACCEPTANCE.get(n)
    if prev is not None:
        ok, detail = prev[0] and ok, f"{prev[1]}; {detail}"
    ACCEPTANCE[n] = (ok, detail)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            tr.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            tr.write_line(f"criterion {n:2d}: FAIL  (not evaluated)")
