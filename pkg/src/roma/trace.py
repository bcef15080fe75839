"""Append-only hierarchical execution trace.

Role events (atomize/plan/execute/aggregate) are opened when the role starts
and closed once when it finishes, so that the agent calls made inside them can
point at an already-recorded parent. Times are monotonic nanoseconds since run
start.

Export format: one JSON object per line. Line 1 is the ``meta`` header; each
following line is one event, in event-id order, with sorted keys.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable

from .agents.base import TokenCost

KINDS = ("atomize", "plan", "execute", "aggregate", "tool_call", "agent_call", "schedule", "error")
ROLE_KINDS = ("atomize", "plan", "execute", "aggregate")
ROLE_ORDER = ("atomizer", "planner", "executor", "aggregator")
DEFAULT_PAYLOAD_CAP = 64 * 1024
FORMAT_VERSION = 1


class TraceError(RuntimeError):
    pass


@dataclass
class TraceEvent:
    event_id: int
    node_id: str
    kind: str
    start_time: int
    end_time: int | None = None
    parent_event_id: int | None = None
    payload: dict = field(default_factory=dict)
    accounting: TokenCost = field(default_factory=TokenCost)

    def to_dict(self) -> dict:
        return {
            "event_id": self.event_id,
            "node_id": self.node_id,
            "kind": self.kind,
            "parent_event_id": self.parent_event_id,
            "start_time": self.start_time,
            "end_time": self.end_time,
            "payload": self.payload,
            "accounting": self.accounting.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TraceEvent":
        return cls(
            event_id=d["event_id"],
            node_id=d["node_id"],
            kind=d["kind"],
            start_time=d["start_time"],
            end_time=d["end_time"],
            parent_event_id=d["parent_event_id"],
            payload=d["payload"],
            accounting=TokenCost.from_dict(d["accounting"]),
        )


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


class Trace:
    def __init__(self, run_id: str = "run", *, store=None, payload_cap: int = DEFAULT_PAYLOAD_CAP, meta: dict | None = None):
        self.run_id = run_id
        self.meta: dict = dict(meta or {})
        self.store = store
        self.payload_cap = payload_cap
        self._events: list[TraceEvent] = []
        self._lock = threading.Lock()
        self._t0 = time.monotonic_ns()
        self._closed = False

    def now(self) -> int:
        return time.monotonic_ns() - self._t0

    @property
    def closed(self) -> bool:
        return self._closed

    @property
    def events(self) -> list[TraceEvent]:
        with self._lock:
            return list(self._events)

    def _cap(self, payload: dict, node_id: str) -> dict:
        text = _dumps(payload)
        if len(text.encode("utf-8")) <= self.payload_cap or self.store is None:
            return payload
        ref = self.store.put(text, "note", node_id)
        return {"artifact_ref": ref, "oversize_payload": True}

    def record(
        self,
        kind: str,
        node_id: str,
        *,
        parent_event_id: int | None = None,
        payload: dict | None = None,
        accounting: TokenCost | None = None,
        start_time: int | None = None,
        end_time: int | None = None,
    ) -> int:
        """Append one event and return its id. ``end_time=None`` leaves it open for ``close``."""
        if kind not in KINDS:
            raise TraceError(f"unknown event kind {kind!r}")
        payload = self._cap(payload or {}, node_id)
        with self._lock:
            if self._closed:
                raise TraceError("trace is closed")
            next_id = len(self._events) + 1
            if parent_event_id is not None and not (1 <= parent_event_id < next_id):
                raise TraceError(f"parent event {parent_event_id} does not precede event {next_id}")
            start = self.now() if start_time is None else start_time
            ev = TraceEvent(next_id, node_id, kind, start, end_time, parent_event_id, payload, accounting or TokenCost())
            self._events.append(ev)
            return next_id

    def open(self, kind: str, node_id: str, *, parent_event_id: int | None = None, payload: dict | None = None) -> int:
        return self.record(kind, node_id, parent_event_id=parent_event_id, payload=payload)

    def close(self, event_id: int, *, payload: dict | None = None, accounting: TokenCost | None = None) -> None:
        with self._lock:
            ev = self._events[event_id - 1]
            if ev.end_time is not None:
                raise TraceError(f"event {event_id} already closed")
            end = self.now()
            ev.end_time = max(end, ev.start_time)
            if payload:
                ev.payload = self._cap({**ev.payload, **payload}, ev.node_id)
            if accounting is not None:
                ev.accounting = accounting

    def append(self, event: TraceEvent) -> int:
        """Record a fully-formed event; its ``event_id`` is reassigned to the next slot."""
        return self.record(
            event.kind,
            event.node_id,
            parent_event_id=event.parent_event_id,
            payload=event.payload,
            accounting=event.accounting,
            start_time=event.start_time,
            end_time=event.end_time if event.end_time is not None else event.start_time,
        )

    def finish(self, **meta) -> "Trace":
        with self._lock:
            for ev in self._events:
                if ev.end_time is None:
                    ev.end_time = max(self.now(), ev.start_time)
            self.meta.update(meta)
            self._closed = True
        return self

    # -- export / import -----------------------------------------------------

    def export(self) -> str:
        if not self._closed:
            raise TraceError("export requires a closed run")
        header = {"kind": "meta", "run_id": self.run_id, "format": FORMAT_VERSION, **self.meta}
        lines = [_dumps(header)]
        lines += [_dumps(ev.to_dict()) for ev in self._events]
        return "\n".join(lines) + "\n"

    @classmethod
    def load(cls, text: str) -> "Trace":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise TraceError("empty trace document")
        try:
            header = json.loads(lines[0])
            events = [TraceEvent.from_dict(json.loads(ln)) for ln in lines[1:]]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise TraceError(f"corrupt trace: {e}") from e
        if header.get("kind") != "meta":
            raise TraceError("first line must be the meta header")
        header = dict(header)
        header.pop("kind")
        run = cls(header.pop("run_id", "run"))
        header.pop("format", None)
        run.meta = header
        for i, ev in enumerate(events, start=1):
            if ev.event_id != i:
                raise TraceError(f"event ids must be 1..n in order; got {ev.event_id} at position {i}")
            if ev.kind not in KINDS:
                raise TraceError(f"unknown event kind {ev.kind!r}")
        run._events = events
        run._closed = True
        return run


def config_hash(config_dict: dict) -> str:
    return hashlib.sha256(_dumps(config_dict).encode()).hexdigest()[:16]


# -- queries -------------------------------------------------------------------


def role_breakdown(run: Trace) -> dict[str, TokenCost]:
    """Sum agent-call accounting by role, with a ``total`` row equal to the column sums."""
    by_role: dict[str, TokenCost] = defaultdict(TokenCost)
    for ev in run.events:
        if ev.kind == "agent_call":
            role = ev.payload.get("role", "unknown")
            by_role[role] = by_role[role] + ev.accounting
    rows = {r: by_role.get(r, TokenCost()) for r in ROLE_ORDER}
    for r in sorted(by_role):
        rows.setdefault(r, by_role[r])
    rows["total"] = TokenCost.total(rows.values())
    return rows


def format_breakdown(rows: dict[str, TokenCost]) -> str:
    out = [f"{'Component':<12}{'Cost ($)':>12}{'Input tokens':>15}{'Output tokens':>15}{'Latency (s)':>13}"]
    for role, c in rows.items():
        label = "Total" if role == "total" else role.capitalize()
        out.append(f"{label:<12}{c.dollars:>12.4f}{c.input_tokens:>15,}{c.output_tokens:>15,}{c.latency_seconds:>13.3f}")
    return "\n".join(out)


@dataclass(frozen=True)
class ScheduleRecord:
    node_id: str
    start_time: int
    end_time: int
    worker_slot: int
    wave_index: int


def schedule_records(run: Trace, parent_event_id: int | None = None) -> list[ScheduleRecord]:
    """Schedule records of started nodes, optionally only those of one plan."""
    out = []
    for ev in run.events:
        if ev.kind != "schedule" or ev.payload.get("worker_slot") is None:
            continue
        if parent_event_id is not None and ev.parent_event_id != parent_event_id:
            continue
        out.append(
            ScheduleRecord(ev.node_id, ev.start_time, ev.end_time, ev.payload["worker_slot"], ev.payload.get("wave_index", 0))
        )
    return out


def _tree(run: Trace):
    events = run.events
    by_node: dict[str, list[TraceEvent]] = defaultdict(list)
    for ev in events:
        by_node[ev.node_id].append(ev)
    plans: dict[str, dict] = {}
    for ev in events:
        if ev.kind == "plan" and "graph" in ev.payload:
            plans[ev.node_id] = ev.payload["graph"]
    return events, by_node, plans


def check_trace_shape(run: Trace) -> list[str]:
    """Structural violations of a closed run; an empty list means well-formed."""
    events, by_node, plans = _tree(run)
    out: list[str] = []
    status = node_statuses(run)
    parent_of: dict[str, str] = {}
    deps_of: dict[str, list[str]] = {}
    for parent, graph in plans.items():
        for n in graph["nodes"]:
            parent_of[n["id"]] = parent
            deps_of[n["id"]] = []
        for a, b in graph["edges"]:
            if b in deps_of:
                deps_of[b].append(a)

    ids = {ev.event_id: ev for ev in events}
    for ev in events:
        if ev.end_time is None or ev.end_time < ev.start_time:
            out.append(f"event {ev.event_id}: bad time interval")
        if ev.parent_event_id is not None and ev.parent_event_id not in ids:
            out.append(f"event {ev.event_id}: unknown parent event {ev.parent_event_id}")
        if ev.kind == "agent_call":
            parent = ids.get(ev.parent_event_id)
            if parent is None or parent.kind not in ROLE_KINDS:
                out.append(f"event {ev.event_id}: agent_call not nested under a role event")

    nodes = set(by_node) | set(parent_of)
    for nid in sorted(nodes):
        evs = by_node.get(nid, [])
        count = {k: sum(1 for e in evs if e.kind == k) for k in ROLE_KINDS}
        st = status.get(nid)
        if st == "Cancelled":
            if any(count.values()):
                out.append(f"{nid}: cancelled node has role events")
            continue
        if count["atomize"] != 1:
            out.append(f"{nid}: expected exactly 1 atomize event, found {count['atomize']}")
        if count["execute"] > 1 or count["plan"] > 1 or count["aggregate"] > 1:
            out.append(f"{nid}: repeated role events")
        has_exec = count["execute"] == 1
        has_plan = count["plan"] == 1
        has_agg = count["aggregate"] == 1
        if has_exec and (has_plan or has_agg):
            out.append(f"{nid}: both execute and plan/aggregate events")
        elif st == "Done" and not has_exec and not (has_plan and has_agg):
            out.append(f"{nid}: Done without execute or plan+aggregate")
        elif has_agg and not has_plan:
            out.append(f"{nid}: aggregate without plan")

        # children lie inside [plan.end, aggregate.start]
        plan_ev = next((e for e in evs if e.kind == "plan"), None)
        agg_ev = next((e for e in evs if e.kind == "aggregate"), None)
        if plan_ev is not None and nid in plans:
            for child in plans[nid]["nodes"]:
                for ce in _subtree_role_events(child["id"], by_node, plans):
                    if ce.start_time < plan_ev.end_time:
                        out.append(f"{ce.node_id}: {ce.kind} starts before parent {nid} finished planning")
                    if agg_ev is not None and ce.end_time > agg_ev.start_time:
                        out.append(f"{ce.node_id}: {ce.kind} ends after parent {nid} started aggregating")

    sched = {ev.node_id: ev for ev in events if ev.kind == "schedule" and ev.payload.get("worker_slot") is not None}
    for v, us in deps_of.items():
        if v not in sched:
            continue
        for u in us:
            if u in sched and sched[u].end_time > sched[v].start_time:
                out.append(f"edge {u}->{v}: {v} started before {u} finished")
            elif u not in sched and not sched[v].payload.get("disclosed_failures"):
                out.append(f"edge {u}->{v}: {v} ran although {u} never ran")
    return out


def _subtree_role_events(nid, by_node, plans):
    stack = [nid]
    while stack:
        cur = stack.pop()
        for e in by_node.get(cur, []):
            if e.kind in ROLE_KINDS:
                yield e
        if cur in plans:
            stack.extend(n["id"] for n in plans[cur]["nodes"])


def node_statuses(run: Trace) -> dict[str, str]:
    out = {}
    for ev in run.events:
        if ev.kind == "schedule":
            out[ev.node_id] = ev.payload.get("status")
    root = run.meta.get("root")
    if root:
        out[root["node_id"]] = root["status"]
    return out


def context_locality_violations(run: Trace) -> list[str]:
    """Check that every execute event saw only its parent and declared dependencies.

    Artifact references must be outputs of those dependencies.
    """
    _, by_node, plans = _tree(run)
    parent_of, deps_of = {}, {}
    for parent, graph in plans.items():
        for n in graph["nodes"]:
            parent_of[n["id"]] = parent
            deps_of[n["id"]] = set()
        for a, b in graph["edges"]:
            deps_of.setdefault(b, set()).add(a)
    outputs: dict[str, set[str]] = defaultdict(set)
    for ev in run.events:
        if ev.kind in ("execute", "aggregate") and ev.payload.get("output"):
            outputs[ev.node_id].add(ev.payload["output"])
    out = []
    for ev in run.events:
        if ev.kind != "execute":
            continue
        ctx = ev.payload.get("context")
        if ctx is None:
            out.append(f"{ev.node_id}: execute event without recorded context")
            continue
        if ctx.get("parent_id") != parent_of.get(ev.node_id):
            out.append(f"{ev.node_id}: context parent {ctx.get('parent_id')} is not its parent")
        declared = deps_of.get(ev.node_id, set())
        seen = set(ctx.get("dependency_ids", [])) | set(ctx.get("failed_dependency_ids", []))
        for foreign in sorted(seen - declared):
            out.append(f"{ev.node_id}: context references undeclared node {foreign}")
        allowed = set().union(*(outputs[d] for d in declared)) if declared else set()
        for ref in ctx.get("artifact_refs", []):
            if ref not in allowed:
                out.append(f"{ev.node_id}: context references foreign artifact {ref[:12]}")
    return out


def max_observed_parallelism(records: Iterable[ScheduleRecord]) -> int:
    """Maximum number of overlapping half-open [start, end) intervals."""
    points = []
    for r in records:
        points.append((r.start_time, 1))
        points.append((r.end_time, -1))
    # ends sort before starts at the same instant: [a,b) and [b,c) do not overlap
    points.sort(key=lambda p: (p[0], p[1]))
    cur = best = 0
    for _, d in points:
        cur += d
        best = max(best, cur)
    return best


def render_tree(run: Trace) -> str:
    """Indented view of the task tree with status, type and cost per node."""
    events, by_node, plans = _tree(run)
    status = node_statuses(run)
    cost: dict[str, TokenCost] = defaultdict(TokenCost)
    for ev in events:
        if ev.kind == "agent_call":
            cost[ev.node_id] = cost[ev.node_id] + ev.accounting
    root = run.meta.get("root", {}).get("node_id", "root")
    goals, types = {}, {}
    for ev in events:
        if ev.kind == "atomize":
            goals[ev.node_id] = ev.payload.get("goal", "")
            types[ev.node_id] = ev.payload.get("task_type", "")
    lines = []

    def walk(nid: str, depth: int) -> None:
        c = cost[nid]
        atomic = "plan" if nid in plans else "leaf"
        lines.append(
            f"{'  ' * depth}{nid} [{status.get(nid, '?')}] {types.get(nid, '?')}/{atomic} "
            f"tok={c.input_tokens}+{c.output_tokens} ${c.dollars:.4f}  {goals.get(nid, '')[:60]}"
        )
        for child in plans.get(nid, {}).get("nodes", []):
            walk(child["id"], depth + 1)

    walk(root, 0)
    return "\n".join(lines)
