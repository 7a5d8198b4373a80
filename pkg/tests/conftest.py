import pytest

ACCEPTANCE: list[dict] = []


@pytest.fixture
def criterion(request):
    """Register an acceptance criterion; its pass/fail line is printed in the summary."""

    def record(number: int, title: str) -> dict:
        state = {"number": number, "title": title, "detail": "", "passed": False}
        request.node.acceptance = state
        ACCEPTANCE.append(state)
        return state

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    state = getattr(item, "acceptance", None)
    if state is not None and rep.when == "call":
        state["passed"] = rep.passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for s in sorted(ACCEPTANCE, key=lambda s: s["number"]):
        line = f"[{'PASS' if s['passed'] else 'FAIL'}] criterion {s['number']}: {s['title']} {s['detail']}"
        terminalreporter.write_line(line.rstrip())
