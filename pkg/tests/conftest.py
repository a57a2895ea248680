ACCEPTANCE = {}


def record(criterion, ok, detail=""):
    """Store a criterion outcome; the terminal summary prints one line per criterion."""
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}".rstrip())


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[c]
        terminalreporter.write_line(f"criterion {c:>2}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip())
