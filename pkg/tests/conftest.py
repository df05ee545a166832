import pytest

from gcprof.heap import Heap, HeapConfig
from gcprof.recorder import FakeClock, ProfileRecorder, arena_rss


def make_heap(nursery=1024, threshold=512, **kw):
    config = HeapConfig(nursery_size=nursery, large_object_threshold=threshold,
                        page_round=kw.pop("page_round", 64), **kw)
    return Heap(config, ProfileRecorder(clock=FakeClock(), rss=arena_rss))


@pytest.fixture
def heap():
    return make_heap()


@pytest.fixture
def node_type(heap):
    return heap.recorder.types.register("Node")


# -- acceptance summary: one line per criterion ------------------------------

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = getattr(item, "criterion_detail", "")
        _criteria[number] = (title, report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, outcome, detail = _criteria[number]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        line = f"criterion {number:>2} [{verdict}] {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
