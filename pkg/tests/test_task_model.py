from __future__ import annotations

import itertools
import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from roma.task_model import (
    GraphError,
    IllegalTransition,
    NodeStatus,
    StatusTable,
    SubtaskGraph,
    TaskNode,
    TaskSpec,
    TaskType,
    Violation,
    ready_set,
    topological_waves,
    validate_graph,
)

from conftest import graph_of, random_dag


def has_cycle_oracle(ids, edges) -> bool:
    """Recursive three-colour DFS, written independently of the library."""
    succ = {i: [] for i in ids}
    for a, b in edges:
        succ[a].append(b)
    state = {}

    def visit(u):
        state[u] = "open"
        for v in succ[u]:
            if state.get(v) == "open":
                return True
            if v not in state and visit(v):
                return True
        state[u] = "done"
        return False

    return any(i not in state and visit(i) for i in ids)


def test_task_type_parse_is_case_insensitive():
    assert TaskType.parse("WRITE") is TaskType.WRITE
    assert TaskType.parse(TaskType.CODE) is TaskType.CODE
    with pytest.raises(ValueError):
        TaskType.parse("draw")


def test_task_spec_rejects_empty_goal_and_round_trips():
    with pytest.raises(ValueError):
        TaskSpec("  ")
    spec = TaskSpec("sum", TaskType.THINK, "be exact", {"k": "1"})
    assert TaskSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


def test_two_hundred_forward_dags_accepted_then_back_edge_is_a_cycle():
    rng = random.Random(1)
    for _ in range(200):
        n = rng.randint(2, 9)
        g = random_dag(rng, n)
        assert validate_graph(g).accepted
        assert not has_cycle_oracle(g.ids, g.edges)
        # close a loop: find a path u ~> v and add v -> u, or add a 2-cycle
        if g.edges:
            a, b = sorted(g.edges)[rng.randrange(len(g.edges))]
            bad = SubtaskGraph(g.nodes, set(g.edges) | {(b, a)})
        else:
            bad = SubtaskGraph(g.nodes, {(g.ids[0], g.ids[1]), (g.ids[1], g.ids[0])})
        assert has_cycle_oracle(bad.ids, bad.edges)
        assert Violation.CYCLE in validate_graph(bad).kinds()


@settings(max_examples=150, deadline=None)
@given(st.integers(2, 7), st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), max_size=15))
def test_cycle_detection_agrees_with_oracle(n, raw):
    ids = [f"root.{i}" for i in range(n)]
    edges = {(ids[a % n], ids[b % n]) for a, b in raw}
    report = validate_graph(graph_of(ids, edges))
    assert (Violation.CYCLE in report.kinds()) == has_cycle_oracle(ids, edges)


def test_structural_violations():
    assert validate_graph(SubtaskGraph([])).kinds() == [Violation.EMPTY_GRAPH]
    assert Violation.DANGLING_EDGE in validate_graph(graph_of(["root.0"], [("root.0", "root.9")])).kinds()
    dup = SubtaskGraph([TaskNode("root.0", TaskSpec("a"), "root"), TaskNode("root.0", TaskSpec("b"), "root")])
    assert Violation.DUPLICATE_ID in validate_graph(dup).kinds()
    cross = SubtaskGraph(
        [TaskNode("a.0", TaskSpec("x"), "a"), TaskNode("b.0", TaskSpec("y"), "b")], [("a.0", "b.0")]
    )
    assert Violation.DANGLING_EDGE in validate_graph(cross).kinds()


def brute_ready(g, statuses):
    out = []
    for nid in g.ids:
        if statuses.get(nid, NodeStatus.PENDING) not in (NodeStatus.PENDING, NodeStatus.BLOCKED):
            continue
        if all(statuses.get(a) is NodeStatus.DONE for a, b in g.edges if b == nid):
            out.append(nid)
    return out


def test_ready_set_matches_brute_force():
    rng = random.Random(3)
    choices = list(NodeStatus)
    for _ in range(200):
        g = random_dag(rng, rng.randint(1, 8))
        statuses = {nid: rng.choice(choices) for nid in g.ids if rng.random() < 0.8}
        assert ready_set(g, statuses) == brute_ready(g, statuses)


def test_ready_set_unknown_id_raises():
    with pytest.raises(KeyError):
        ready_set(graph_of(["root.0"], []), {"ghost": NodeStatus.DONE})


def test_waves_respect_every_edge_and_are_tight():
    rng = random.Random(4)
    for _ in range(100):
        g = random_dag(rng, rng.randint(1, 9))
        waves = topological_waves(g)
        level = {nid: i for i, w in enumerate(waves) for nid in w}
        assert sorted(level) == sorted(g.ids)
        for a, b in g.edges:
            assert level[a] < level[b]
        for nid in g.ids:
            preds = g.dependencies(nid)
            assert level[nid] == (1 + max(level[p] for p in preds) if preds else 0)


def test_waves_reject_cycles():
    with pytest.raises(GraphError):
        topological_waves(graph_of(["root.0", "root.1"], [("root.0", "root.1"), ("root.1", "root.0")]))


def test_diamond_waves():
    g = graph_of(["root.a", "root.b", "root.c", "root.d"], [("root.a", "root.b"), ("root.a", "root.c"), ("root.b", "root.d"), ("root.c", "root.d")])
    assert topological_waves(g) == [["root.a"], ["root.b", "root.c"], ["root.d"]]
    assert g.dependencies("root.d") == ["root.b", "root.c"]
    assert g.dependents("root.a") == ["root.b", "root.c"]


def test_status_transitions():
    table = StatusTable(["x"])
    for s in (NodeStatus.READY, NodeStatus.RUNNING, NodeStatus.DONE):
        table.set("x", s)
    with pytest.raises(IllegalTransition):
        table.set("x", NodeStatus.RUNNING)
    t2 = StatusTable(["y"])
    with pytest.raises(IllegalTransition):
        t2.set("y", NodeStatus.DONE)
    t2.set("y", NodeStatus.CANCELLED)
    assert t2["y"].terminal


def test_transition_table_is_closed_over_terminals():
    for a, b in itertools.product(NodeStatus, NodeStatus):
        if a.terminal:
            assert not a.can_become(b)


def test_graph_json_round_trip_is_canonical():
    rng = random.Random(5)
    g = random_dag(rng, 6)
    again = SubtaskGraph.from_dict(json.loads(g.canonical_json()))
    assert again.canonical_json() == g.canonical_json()
