from __future__ import annotations

import threading

import pytest

from roma.agents.base import TokenCost
from roma.engine import Engine
from roma.trace import (
    ScheduleRecord,
    Trace,
    TraceError,
    TraceEvent,
    check_trace_shape,
    config_hash,
    format_breakdown,
    max_observed_parallelism,
    render_tree,
    role_breakdown,
)


def test_event_ids_are_sequential():
    t = Trace()
    assert [t.record("atomize", "root", end_time=1) for _ in range(3)] == [1, 2, 3]


def test_concurrent_appends_keep_ids_dense():
    t = Trace()
    barrier = threading.Barrier(8)

    def worker(w):
        barrier.wait()
        for i in range(50):
            t.record("schedule", f"n{w}.{i}", end_time=0)

    threads = [threading.Thread(target=worker, args=(w,)) for w in range(8)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    assert [e.event_id for e in t.events] == list(range(1, 401))
    assert len({e.node_id for e in t.events}) == 400


def test_parent_must_precede_child():
    t = Trace()
    t.record("atomize", "root")
    with pytest.raises(TraceError):
        t.record("agent_call", "root", parent_event_id=5)
    with pytest.raises(TraceError):
        t.record("agent_call", "root", parent_event_id=2)


def test_closed_trace_rejects_events_and_open_trace_rejects_export():
    t = Trace()
    with pytest.raises(TraceError):
        t.export()
    t.finish()
    with pytest.raises(TraceError):
        t.record("atomize", "root")


def test_unknown_kind_rejected():
    with pytest.raises(TraceError):
        Trace().record("dance", "root")


def test_open_close_sets_interval_and_accounting():
    t = Trace()
    ev = t.open("execute", "root")
    t.close(ev, payload={"output": "x"}, accounting=TokenCost(3, 4))
    got = t.events[0]
    assert got.end_time >= got.start_time
    assert got.payload == {"output": "x"}
    with pytest.raises(TraceError):
        t.close(ev)


def test_append_reassigns_ids():
    t = Trace()
    t.record("atomize", "root", end_time=0)
    eid = t.append(TraceEvent(99, "root", "execute", 5, 6))
    assert eid == 2 and t.events[1].event_id == 2


def test_export_import_export_is_byte_identical():
    out = Engine.with_mocks().run("((1+2)*(3-4))+5")
    text = out.trace.export()
    assert text.splitlines()[0].startswith('{"config_hash"')
    assert Trace.load(text).export() == text


@pytest.mark.parametrize(
    "text",
    ["", "not json\n", '{"kind":"event"}\n', '{"kind":"meta","run_id":"r"}\n{"event_id":2}\n'],
)
def test_load_rejects_corrupt_documents(text):
    with pytest.raises(TraceError):
        Trace.load(text)


def test_oversize_payload_goes_to_store():
    from roma.context_store import ArtifactStore

    store = ArtifactStore()
    t = Trace(store=store, payload_cap=64)
    t.record("execute", "root", payload={"output": "x" * 500}, end_time=0)
    p = t.events[0].payload
    assert p["oversize_payload"] and p["artifact_ref"] in store


def test_role_breakdown_with_known_costs_is_exact():
    costs = {"arith_atomizer": TokenCost(10, 0), "arith_executor": TokenCost(20, 0)}
    out = Engine.with_mocks(costs=costs).run("2+3")
    rows = role_breakdown(out.trace)
    assert list(rows) == ["atomizer", "planner", "executor", "aggregator", "total"]
    assert rows["atomizer"].input_tokens == 10
    assert rows["executor"].input_tokens == 20
    assert rows["planner"].input_tokens == rows["aggregator"].input_tokens == 0
    assert rows["total"].input_tokens == 30
    table = format_breakdown(rows)
    assert table.splitlines()[-1].split()[:3] == ["Total", "0.0000", "30"]


def test_role_breakdown_total_is_column_sum_on_a_tree():
    costs = {
        "arith_atomizer": TokenCost(7, 1, 0.25),
        "arith_planner": TokenCost(11, 5, 0.5),
        "arith_executor": TokenCost(13, 2, 0.125),
        "arith_aggregator": TokenCost(17, 3, 0.0625),
    }
    rows = role_breakdown(Engine.with_mocks(costs=costs).run("((1+2)+(3+4))*(5-6)").trace)
    body = [c for r, c in rows.items() if r != "total"]
    assert rows["total"].input_tokens == sum(c.input_tokens for c in body)
    assert rows["total"].output_tokens == sum(c.output_tokens for c in body)


def _well_formed_leaf(t: Trace, nid: str, parent: int | None = None) -> None:
    a = t.record("atomize", nid, parent_event_id=parent, start_time=1, end_time=2)
    t.record("agent_call", nid, parent_event_id=a, payload={"role": "atomizer"}, start_time=1, end_time=2)
    t.record("execute", nid, parent_event_id=parent, start_time=3, end_time=4)


def test_shape_check_accepts_a_minimal_leaf():
    t = Trace()
    _well_formed_leaf(t, "root")
    t.finish(root={"node_id": "root", "status": "Done", "summary": "", "goal": "g"})
    assert check_trace_shape(t) == []


def test_shape_check_flags_double_atomize_and_mixed_roles():
    t = Trace()
    _well_formed_leaf(t, "root")
    t.record("atomize", "root", start_time=5, end_time=6)
    t.record("plan", "root", start_time=7, end_time=8)
    t.finish(root={"node_id": "root", "status": "Done", "summary": "", "goal": "g"})
    found = "\n".join(check_trace_shape(t))
    assert "exactly 1 atomize" in found
    assert "both execute and plan" in found


def test_shape_check_flags_orphan_agent_call():
    t = Trace()
    _well_formed_leaf(t, "root")
    t.record("agent_call", "root", payload={"role": "executor"}, start_time=3, end_time=4)
    t.finish(root={"node_id": "root", "status": "Done", "summary": "", "goal": "g"})
    assert any("not nested" in v for v in check_trace_shape(t))


def test_shape_check_flags_child_before_plan_end():
    run = Engine.with_mocks().run("(1+2)*3").trace
    text = run.export()
    loaded = Trace.load(text)
    plan = next(e for e in loaded.events if e.kind == "plan" and e.node_id == "root")
    child = next(e for e in loaded.events if e.kind == "atomize" and e.node_id == "root.0")
    child.start_time = plan.end_time - 1
    assert any("before parent root finished planning" in v for v in check_trace_shape(loaded))


def test_max_observed_parallelism_half_open():
    recs = [ScheduleRecord("a", 0, 10, 0, 0), ScheduleRecord("b", 10, 20, 0, 0), ScheduleRecord("c", 5, 15, 1, 0)]
    assert max_observed_parallelism(recs) == 2
    assert max_observed_parallelism([]) == 0


def test_config_hash_is_order_independent():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_render_tree_indents_children():
    tree = render_tree(Engine.with_mocks().run("(1+2)*3").trace).splitlines()
    assert tree[0].startswith("root [Done]")
    assert any(line.startswith("  root.0 [Done]") for line in tree)
