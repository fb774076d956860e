import pytest

_CRITERIA = {}


class CriterionRecorder:
    """Collects one verdict per acceptance criterion for the terminal summary."""

    def __init__(self, number: int, title: str):
        self.number, self.title, self.notes = number, title, []
        _CRITERIA[number] = self

    verdict = "FAIL"

    def note(self, text: str) -> None:
        self.notes.append(text)


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    rec = CriterionRecorder(*marker.args)
    yield rec
    call = getattr(request.node, "rep_call", None)
    rec.verdict = "PASS" if call is not None and call.passed else "FAIL"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        rec = _CRITERIA[n]
        extra = f" ({'; '.join(rec.notes)})" if rec.notes else ""
        terminalreporter.write_line(f"criterion {n:2d} {rec.verdict}: {rec.title}{extra}")
