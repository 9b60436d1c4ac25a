import pytest

CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records the acceptance line for criterion ``n``."""
    def record(n: int, ok: bool, detail: str) -> bool:
        CRITERIA[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    name = item.name
    if rep.when == "call" and rep.failed and name.startswith("test_criterion_"):
        n = int(name.split("_")[2])
        if n not in CRITERIA:
            CRITERIA[n] = f"criterion {n}: FAIL  raised {call.excinfo.typename}: {call.excinfo.value}"
