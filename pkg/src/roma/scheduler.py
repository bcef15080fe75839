"""Dependency-aware execution of one subtask graph with bounded concurrency.

There are no wave barriers: a node starts the moment its own dependencies
are Done and a worker slot is free. When several nodes are ready at once the
one earliest in planner order gets the slot.
"""

from __future__ import annotations

import asyncio
import logging
import time
from dataclasses import dataclass
from typing import Awaitable, Callable, Mapping

from .task_model import NodeStatus, StatusTable, SubtaskGraph, TaskNode, topological_waves
from .trace import ScheduleRecord, max_observed_parallelism

log = logging.getLogger(__name__)

STRICT = "strict"
PARTIAL = "partial"

# solve_node(node, dependency_results, slot) -> result with a .status attribute
SolveFn = Callable[[TaskNode, Mapping[str, object], int], Awaitable[object]]


@dataclass
class GraphRun:
    results: dict[str, object]
    statuses: dict[str, NodeStatus]
    records: list[ScheduleRecord]
    start_order: list[str]

    @property
    def parallelism(self) -> int:
        return max_observed_parallelism(self.records)


async def run_graph(
    graph: SubtaskGraph,
    solve_node: SolveFn,
    *,
    concurrency_limit: int = 4,
    policy: str = STRICT,
    node_timeout: float | None = None,
    clock: Callable[[], int] | None = None,
    on_failure: Callable[[TaskNode, BaseException], object] | None = None,
    on_record: Callable[[TaskNode, NodeStatus, ScheduleRecord | None, list[str]], None] | None = None,
) -> GraphRun:
    """Run every node of ``graph`` to a terminal status.

    ``solve_node`` gets the node, the results of its dependencies, and the
    worker slot it occupies. A result whose ``status`` is Done marks the node
    Done; anything else marks it Failed. An exception (or timeout) inside
    ``solve_node`` is turned into a failed result by ``on_failure``.

    Under ``strict``, dependents of a failed node are Cancelled (transitively)
    without running. Under ``partial`` they run once all their dependencies
    are terminal, and the failures are visible in ``dependency_results``.
    """
    if concurrency_limit < 1:
        raise ValueError("concurrency_limit must be >= 1")
    if policy not in (STRICT, PARTIAL):
        raise ValueError(f"unknown failure policy {policy!r}")
    clock = clock or time.monotonic_ns
    order = graph.ids
    index = {nid: i for i, nid in enumerate(order)}
    deps = {nid: graph.dependencies(nid) for nid in order}
    wave_of = {nid: w for w, wave in enumerate(topological_waves(graph)) for nid in wave}
    nodes = {n.id: n for n in graph.nodes}

    st = StatusTable(order)
    for nid in order:
        st.set(nid, NodeStatus.BLOCKED if deps[nid] else NodeStatus.READY)

    results: dict[str, object] = {}
    records: list[ScheduleRecord] = []
    start_order: list[str] = []
    free_slots = list(range(concurrency_limit))
    running: dict[asyncio.Task, tuple[str, int, int]] = {}

    def runnable(nid: str) -> bool:
        s = st[nid]
        if s not in (NodeStatus.READY, NodeStatus.BLOCKED):
            return False
        dep_states = [st[d] for d in deps[nid]]
        if policy == STRICT:
            return all(d is NodeStatus.DONE for d in dep_states)
        return all(d.terminal for d in dep_states)

    def cancel_dependents(nid: str) -> None:
        stack = [nid]
        while stack:
            cur = stack.pop()
            for child in graph.dependents(cur):
                if st[child] in (NodeStatus.BLOCKED, NodeStatus.READY, NodeStatus.PENDING):
                    st.set(child, NodeStatus.CANCELLED)
                    if on_record:
                        on_record(nodes[child], NodeStatus.CANCELLED, None, [])
                    stack.append(child)

    async def guarded(node: TaskNode, dep_results: dict, slot: int):
        try:
            if node_timeout:
                result = await asyncio.wait_for(solve_node(node, dep_results, slot), node_timeout)
            else:
                result = await solve_node(node, dep_results, slot)
        except asyncio.CancelledError:
            raise
        except Exception as e:  # noqa: BLE001 - surfaced as a failed node
            if on_failure is None:
                raise
            if isinstance(e, asyncio.TimeoutError):
                log.warning("node %s timed out after %ss", node.id, node_timeout)
            result = on_failure(node, e)
        return result, clock()

    while True:
        for nid in order:
            if not free_slots:
                break
            if not runnable(nid):
                continue
            if st[nid] is NodeStatus.BLOCKED:
                st.set(nid, NodeStatus.READY)
            st.set(nid, NodeStatus.RUNNING)
            slot = min(free_slots)
            free_slots.remove(slot)
            dep_results = {d: results[d] for d in deps[nid]}
            start = clock()
            task = asyncio.ensure_future(guarded(nodes[nid], dep_results, slot))
            running[task] = (nid, slot, start)
            start_order.append(nid)
        for nid in order:
            if st[nid] is NodeStatus.BLOCKED and all(st[d] is NodeStatus.DONE for d in deps[nid]):
                st.set(nid, NodeStatus.READY)
        if not running:
            break
        done, _ = await asyncio.wait(list(running), return_when=asyncio.FIRST_COMPLETED)
        # settle completions in planner order so slot reuse is reproducible
        for task in sorted(done, key=lambda t: index[running[t][0]]):
            nid, slot, start = running.pop(task)
            result, finished = task.result()
            end = max(finished, start + 1)
            results[nid] = result
            ok = getattr(result, "status", None) is NodeStatus.DONE
            st.set(nid, NodeStatus.DONE if ok else NodeStatus.FAILED)
            rec = ScheduleRecord(nid, start, end, slot, wave_of[nid])
            records.append(rec)
            free_slots.append(slot)
            if on_record:
                failed_deps = [d for d in deps[nid] if st[d] is not NodeStatus.DONE]
                on_record(nodes[nid], st[nid], rec, failed_deps)
            if not ok and policy == STRICT:
                cancel_dependents(nid)

    leftovers = [nid for nid in order if not st[nid].terminal]
    for nid in leftovers:
        # unreachable for validated graphs; kept so every node ends terminal
        st.set(nid, NodeStatus.CANCELLED)
        if on_record:
            on_record(nodes[nid], NodeStatus.CANCELLED, None, [])
    return GraphRun(results, st.snapshot(), records, start_order)
