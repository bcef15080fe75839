from __future__ import annotations

import random

import pytest

from roma.task_model import SubtaskGraph, TaskNode, TaskSpec


def random_expression(rng: random.Random, depth: int, top: bool = False) -> str:
    """Fully parenthesized expression whose tree depth is at most ``depth``; ``top`` forces an operator."""
    if depth == 0 or (not top and rng.random() < 0.25):
        return str(rng.randint(0, 20))
    op = rng.choice("+-*")
    return f"({random_expression(rng, depth - 1)}{op}{random_expression(rng, depth - 1)})"


def expression_corpus(n: int = 200, seed: int = 7, max_depth: int = 4) -> list[str]:
    rng = random.Random(seed)
    return [random_expression(rng, max_depth, top=True) for _ in range(n)]


def random_dag(rng: random.Random, n: int, p: float = 0.3, parent: str = "root") -> SubtaskGraph:
    """Acyclic by construction: edges only go forward in a shuffled order."""
    ids = [f"{parent}.{i}" for i in range(n)]
    order = ids[:]
    rng.shuffle(order)
    edges = [(order[i], order[j]) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    nodes = [TaskNode(i, TaskSpec(f"goal {i}"), parent, 1) for i in ids]
    return SubtaskGraph(nodes, edges)


def graph_of(ids, edges, parent: str = "root") -> SubtaskGraph:
    return SubtaskGraph([TaskNode(i, TaskSpec(f"goal {i}"), parent, 1) for i in ids], edges)


@pytest.fixture(scope="session")
def corpus() -> list[str]:
    return expression_corpus()


# -- acceptance reporting --------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _CRITERIA[number] = (title, "PASS" if rep.outcome == "passed" else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, verdict = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {verdict}  {title}")
