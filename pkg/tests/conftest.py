import pytest

CRITERIA = {
    1: "block-Cholesky append equivalence and cost",
    2: "EI closed form vs Monte Carlo",
    3: "static storage response vs vertex oracle",
    4: "price-scaling invariance of the response",
    5: "noise gap at the true parameters",
    6: "end-to-end one-storage identification",
    7: "beta deviation trend over training days",
    8: "full-fleet forward smoke run",
}

_results: dict[int, tuple[bool, str]] = {}


class AcceptanceLog:
    def record(self, number: int, passed: bool, detail: str) -> None:
        _results[number] = (bool(passed), detail)


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        if n in _results:
            ok, detail = _results[n]
            terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {title} | {detail}")
        else:
            terminalreporter.write_line(f"criterion {n} NOT RUN: {title}")
