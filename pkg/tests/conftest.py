import pytest
import torch


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


class OracleField:
    """Exact rectified velocity ``x_s - x_t``; counts calls."""

    def __init__(self, x_s, x_t):
        self.v = x_s - x_t
        self.calls = 0

    def __call__(self, z, t):
        self.calls += 1
        return self.v.expand_as(z)


@pytest.fixture
def oracle():
    return OracleField


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line per criterion; the test outcome decides PASS or FAIL."""
    state = {}

    def register(number: int, title: str):
        state["number"], state["title"] = number, title

    yield register
    if "number" in state:
        rep = getattr(request.node, "rep_call", None)
        ok = rep is not None and rep.passed
        _CRITERIA[state["number"]] = f"criterion {state['number']:2d} {'PASS' if ok else 'FAIL'}  {state['title']}"
        detail = getattr(request.node, "criterion_detail", "")
        if detail:
            _CRITERIA[state["number"]] += f"  [{detail}]"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
