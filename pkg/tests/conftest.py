import os
from pathlib import Path

import numpy as np
import pytest

from stacknas.data import GraphRecord, normalize_edges

FIXTURES = Path(__file__).parent / "fixtures"


def random_graph(rng: np.random.Generator, n: int, p: float = 0.4, d: int = 3, label: int = 0) -> GraphRecord:
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    edges = normalize_edges(np.asarray(pairs, dtype=np.int64).reshape(-1, 2))
    return GraphRecord(n, edges, rng.normal(size=(n, d)), label)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def triangle() -> GraphRecord:
    return GraphRecord(3, np.array([[0, 1], [0, 2], [1, 2]]), np.ones((3, 1)), 0)


@pytest.fixture
def path3() -> GraphRecord:
    return GraphRecord(3, np.array([[0, 1], [1, 2]]), np.ones((3, 1)), 1)


@pytest.fixture
def small_records(rng):
    return [random_graph(rng, int(rng.integers(2, 9)), label=i % 2) for i in range(12)]


def tu_dataset_dir(name: str) -> Path | None:
    """Location of a TU dataset under $STACKNAS_DATA (default ./data), if present."""
    root = Path(os.environ.get("STACKNAS_DATA", "data"))
    path = root / name
    return path if (path / f"{name}_A.txt").is_file() else None


# ---------------------------------------------------------------------------
# acceptance reporting: tests marked ``criterion(n, title)`` get one summary line each

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not (rep.when == "setup" and rep.outcome != "passed")):
        return
    number, title = mark.args
    status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
    if rep.skipped and isinstance(rep.longrepr, tuple):
        detail = rep.longrepr[2]
    else:
        detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    _CRITERIA[number] = {"status": status, "title": title, "seconds": rep.duration, "detail": detail}


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        c = _CRITERIA[n]
        line = f"criterion {n:>2} {c['status']}  {c['title']} ({c['seconds']:.1f}s)"
        if c["detail"]:
            line += f"  [{c['detail']}]"
        terminalreporter.write_line(line)
