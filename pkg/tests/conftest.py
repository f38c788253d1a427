import pytest

_ACCEPTANCE = []


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for an acceptance criterion.

    Call ``acceptance(n, ok, detail)``, with ``ok=None`` for a skip.  A test
    that errors before recording is reported as a failure of its criterion.
    """
    seen = []

    def record(n, ok, detail=""):
        seen.append(n)
        _ACCEPTANCE.append((n, ok, detail))
        return ok

    yield record
    if not seen:
        n = getattr(request.function, "criterion", "?")
        _ACCEPTANCE.append((n, False, f"{request.node.name} did not complete"))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(_ACCEPTANCE, key=lambda r: str(r[0])):
        word = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"{word} criterion {n}: {detail}")
