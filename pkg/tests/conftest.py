import numpy as np
import pytest

from crossmap import navworld as nw
from crossmap.numerics import tune_allocator

tune_allocator()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def world20():
    graph, _ = nw.generate_world(3, nw.WorldSpec(num_nodes=20, d_sem=8, d_vis=8), graph_id="w20")
    return graph


# one line per acceptance criterion, repeated in the terminal summary
VERDICTS: list[str] = []


class Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.line = number, title, None

    def judge(self, checks: dict, detail: str = "") -> None:
        failed = [name for name, ok in checks.items() if not ok]
        status = "FAIL" if failed else "PASS"
        self.line = f"criterion {self.number} {status}: {self.title}" + (f" ({detail})" if detail else "")
        if failed:
            self.line += f" failed checks: {', '.join(failed)}"
        VERDICTS.append(self.line)
        print(self.line, flush=True)
        assert not failed, self.line


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    c = Criterion(*marker.args)
    yield c
    if c.line is None:
        line = f"criterion {c.number} FAIL: {c.title} (raised before a verdict)"
        VERDICTS.append(line)
        print(line, flush=True)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion with a PASS/FAIL line")


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
