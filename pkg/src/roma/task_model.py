"""Task tree domain types and structural checks over subtask graphs."""

from __future__ import annotations

import enum
import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping


class TaskType(str, enum.Enum):
    SEARCH = "search"
    THINK = "think"
    WRITE = "write"
    CODE = "code"

    @classmethod
    def parse(cls, value: str | "TaskType") -> "TaskType":
        if isinstance(value, TaskType):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(
                f"unknown task_type {value!r}; expected one of "
                f"{', '.join(t.value for t in cls)}"
            ) from None


class NodeStatus(str, enum.Enum):
    PENDING = "Pending"
    BLOCKED = "Blocked"
    READY = "Ready"
    RUNNING = "Running"
    DONE = "Done"
    FAILED = "Failed"
    CANCELLED = "Cancelled"

    @property
    def terminal(self) -> bool:
        return self in _TERMINAL

    def can_become(self, other: "NodeStatus") -> bool:
        if self.terminal:
            return False
        if other is NodeStatus.CANCELLED:
            return True
        return other in _TRANSITIONS[self]


_TERMINAL = frozenset({NodeStatus.DONE, NodeStatus.FAILED, NodeStatus.CANCELLED})
_TRANSITIONS = {
    NodeStatus.PENDING: {NodeStatus.BLOCKED, NodeStatus.READY},
    NodeStatus.BLOCKED: {NodeStatus.READY},
    NodeStatus.READY: {NodeStatus.RUNNING},
    NodeStatus.RUNNING: {NodeStatus.DONE, NodeStatus.FAILED},
}


class IllegalTransition(RuntimeError):
    pass


class GraphError(ValueError):
    """Raised when an operation needs a structurally valid graph and gets one that is not."""


@dataclass(frozen=True)
class TaskSpec:
    goal: str
    task_type: TaskType = TaskType.THINK
    constraints: str | None = None
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not isinstance(self.goal, str) or not self.goal.strip():
            raise ValueError("task goal must be non-empty")
        object.__setattr__(self, "task_type", TaskType.parse(self.task_type))
        object.__setattr__(self, "metadata", dict(self.metadata))

    def with_type(self, task_type: TaskType) -> "TaskSpec":
        return TaskSpec(self.goal, task_type, self.constraints, self.metadata)

    def to_dict(self) -> dict:
        d: dict = {"goal": self.goal, "task_type": self.task_type.value}
        if self.constraints is not None:
            d["constraints"] = self.constraints
        if self.metadata:
            d["metadata"] = dict(sorted(self.metadata.items()))
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TaskSpec":
        return cls(
            goal=d["goal"],
            task_type=TaskType.parse(d.get("task_type", "think")),
            constraints=d.get("constraints"),
            metadata=d.get("metadata", {}),
        )


@dataclass
class TaskNode:
    """One node of the task tree.

    Only ``status``, ``atomic`` and ``result_ref`` change after construction,
    and only from the engine/scheduler.
    """

    id: str
    spec: TaskSpec
    parent_id: str | None = None
    depth: int = 0
    status: NodeStatus = NodeStatus.PENDING
    atomic: bool | None = None
    result_ref: str | None = None

    def __post_init__(self) -> None:
        if self.depth < 0:
            raise ValueError("depth must be non-negative")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "parent_id": self.parent_id,
            "depth": self.depth,
            "spec": self.spec.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TaskNode":
        return cls(
            id=d["id"],
            spec=TaskSpec.from_dict(d["spec"]),
            parent_id=d.get("parent_id"),
            depth=d.get("depth", 0),
        )


@dataclass(frozen=True)
class SubtaskGraph:
    """Planner output: an ordered list of nodes plus ``(src, dst)`` edges where dst consumes src."""

    nodes: tuple[TaskNode, ...]
    edges: frozenset[tuple[str, str]] = frozenset()

    def __init__(self, nodes: Iterable[TaskNode], edges: Iterable[tuple[str, str]] = ()):
        object.__setattr__(self, "nodes", tuple(nodes))
        object.__setattr__(self, "edges", frozenset((str(a), str(b)) for a, b in edges))

    @property
    def ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def node(self, node_id: str) -> TaskNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def dependencies(self, node_id: str) -> list[str]:
        """Predecessors of ``node_id`` in planner order."""
        preds = {a for a, b in self.edges if b == node_id}
        return [i for i in self.ids if i in preds]

    def dependents(self, node_id: str) -> list[str]:
        succs = {b for a, b in self.edges if a == node_id}
        return [i for i in self.ids if i in succs]

    def to_dict(self) -> dict:
        order = {nid: i for i, nid in enumerate(self.ids)}
        edges = sorted(self.edges, key=lambda e: (order.get(e[0], len(order)), order.get(e[1], len(order)), e))
        return {"nodes": [n.to_dict() for n in self.nodes], "edges": [list(e) for e in edges]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SubtaskGraph":
        return cls([TaskNode.from_dict(n) for n in d["nodes"]], [tuple(e) for e in d["edges"]])

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


class Violation(str, enum.Enum):
    CYCLE = "Cycle"
    DANGLING_EDGE = "DanglingEdge"
    DUPLICATE_ID = "DuplicateId"
    EMPTY_GRAPH = "EmptyGraph"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[tuple[Violation, str], ...] = ()

    @property
    def accepted(self) -> bool:
        return not self.violations

    def kinds(self) -> list[Violation]:
        return [v for v, _ in self.violations]

    def __str__(self) -> str:
        if self.accepted:
            return "accepted"
        return "; ".join(f"{v.value}: {detail}" for v, detail in self.violations)


def validate_graph(graph: SubtaskGraph) -> ValidationReport:
    out: list[tuple[Violation, str]] = []
    if not graph.nodes:
        out.append((Violation.EMPTY_GRAPH, "graph has no nodes"))
    seen: set[str] = set()
    for nid in graph.ids:
        if nid in seen:
            out.append((Violation.DUPLICATE_ID, nid))
        seen.add(nid)
    parents = {n.id: n.parent_id for n in graph.nodes}
    good_edges = []
    for a, b in sorted(graph.edges):
        if a not in parents or b not in parents:
            out.append((Violation.DANGLING_EDGE, f"{a}->{b}"))
        elif parents[a] != parents[b]:
            # only sibling edges are allowed
            out.append((Violation.DANGLING_EDGE, f"{a}->{b} crosses subtrees"))
        else:
            good_edges.append((a, b))
    cycle = _find_cycle(list(dict.fromkeys(graph.ids)), good_edges)
    if cycle:
        out.append((Violation.CYCLE, "->".join(cycle)))
    return ValidationReport(tuple(out))


def _find_cycle(ids: list[str], edges: list[tuple[str, str]]) -> list[str] | None:
    succ: dict[str, list[str]] = defaultdict(list)
    for a, b in edges:
        succ[a].append(b)
    white, grey, black = 0, 1, 2
    color = dict.fromkeys(ids, white)
    for root in ids:
        if color[root] != white:
            continue
        stack = [(root, iter(succ[root]))]
        path = [root]
        color[root] = grey
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                stack.pop()
                path.pop()
                color[node] = black
            elif color[nxt] == grey:
                return path[path.index(nxt):] + [nxt]
            elif color[nxt] == white:
                color[nxt] = grey
                stack.append((nxt, iter(succ[nxt])))
                path.append(nxt)
    return None


def ready_set(graph: SubtaskGraph, statuses: Mapping[str, NodeStatus]) -> list[str]:
    """Nodes still Pending/Blocked whose every dependency is Done, in planner order."""
    ids = set(graph.ids)
    unknown = set(statuses) - ids
    if unknown:
        raise KeyError(f"unknown node ids in statuses: {sorted(unknown)}")
    out = []
    for nid in graph.ids:
        st = statuses.get(nid, NodeStatus.PENDING)
        if st not in (NodeStatus.PENDING, NodeStatus.BLOCKED):
            continue
        if all(statuses.get(d, NodeStatus.PENDING) is NodeStatus.DONE for d in graph.dependencies(nid)):
            out.append(nid)
    return out


def topological_waves(graph: SubtaskGraph) -> list[list[str]]:
    """Group nodes by the length of their longest incoming dependency path."""
    report = validate_graph(graph)
    if Violation.CYCLE in report.kinds():
        raise GraphError(f"graph is cyclic: {report}")
    level: dict[str, int] = {}
    remaining = list(graph.ids)
    while remaining:
        progressed = []
        for nid in remaining:
            deps = graph.dependencies(nid)
            if all(d in level for d in deps):
                level[nid] = 1 + max((level[d] for d in deps), default=-1)
                progressed.append(nid)
        if not progressed:
            raise GraphError("graph has unresolved dependencies")
        remaining = [n for n in remaining if n not in level]
    waves: list[list[str]] = [[] for _ in range(max(level.values(), default=-1) + 1)]
    for nid in graph.ids:
        waves[level[nid]].append(nid)
    return waves


class StatusTable:
    """Status map that refuses illegal transitions. Single writer: the scheduler."""

    def __init__(self, ids: Iterable[str]):
        self._st = {i: NodeStatus.PENDING for i in ids}

    def __getitem__(self, node_id: str) -> NodeStatus:
        return self._st[node_id]

    def set(self, node_id: str, status: NodeStatus) -> None:
        cur = self._st[node_id]
        if cur is status:
            return
        if not cur.can_become(status):
            raise IllegalTransition(f"{node_id}: {cur.value} -> {status.value}")
        self._st[node_id] = status

    def snapshot(self) -> dict[str, NodeStatus]:
        return dict(self._st)
