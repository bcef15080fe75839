"""Structured output parsing for atomizer verdicts and planner graphs.

Agents wrap their structured answer in a fenced block; the last fenced block
holding a well-formed JSON object wins. A bare JSON object (no fence) is also
accepted.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass

from ..task_model import SubtaskGraph, TaskNode, TaskSpec, TaskType
from .base import ParseError

log = logging.getLogger(__name__)

FENCE = re.compile(r"```[ \t]*([A-Za-z0-9_+-]*)[ \t]*\n(.*?)```", re.DOTALL)


@dataclass(frozen=True)
class AtomicityDecision:
    atomic: bool
    rationale: str
    suggested_task_type: TaskType | None = None
    forced: bool = False

    def __post_init__(self) -> None:
        if not self.rationale.strip():
            raise ValueError("atomicity decisions need a rationale")

    def to_dict(self) -> dict:
        return {
            "atomic": self.atomic,
            "rationale": self.rationale,
            "task_type": self.suggested_task_type.value if self.suggested_task_type else None,
            "forced": self.forced,
        }


def fenced_blocks(text: str) -> list[tuple[str, str]]:
    return [(m.group(1).lower(), m.group(2)) for m in FENCE.finditer(text)]


def extract_object(text: str) -> dict:
    """Return the last well-formed JSON object found in ``text``."""
    for _, body in reversed(fenced_blocks(text)):
        try:
            obj = json.loads(body)
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    try:
        obj = json.loads(text.strip())
    except json.JSONDecodeError:
        raise ParseError("no well-formed JSON object block found") from None
    if not isinstance(obj, dict):
        raise ParseError("structured block must be a JSON object")
    return obj


def extract_text_block(text: str) -> str:
    """Body of the last fenced block, or the whole text when there is none."""
    blocks = fenced_blocks(text)
    if blocks:
        return blocks[-1][1].rstrip("\n")
    return text.strip()


def parse_atomizer_output(text: str) -> AtomicityDecision:
    obj = extract_object(text)
    atomic = obj.get("atomic")
    if not isinstance(atomic, bool):
        raise ParseError(f"'atomic' must be true or false, got {atomic!r}")
    rationale = obj.get("rationale")
    if not isinstance(rationale, str) or not rationale.strip():
        raise ParseError("'rationale' must be a non-empty string")
    tt = obj.get("task_type")
    suggested = None
    if tt is not None:
        try:
            suggested = TaskType.parse(tt)
        except ValueError as e:
            raise ParseError(str(e)) from None
    return AtomicityDecision(atomic, rationale.strip(), suggested)


def parse_planner_output(text: str, parent_id: str = "root", depth: int = 1) -> SubtaskGraph:
    """Build a graph from the plan block, rewriting positional indices to node ids.

    Child ids are ``<parent_id>.<index>``. Out-of-range dependency indices are
    kept as edges to non-existent ids so ``validate_graph`` reports them as
    dangling.
    """
    obj = extract_object(text)
    subtasks = obj.get("subtasks")
    if not isinstance(subtasks, list):
        raise ParseError("'subtasks' must be a list")
    nodes: list[TaskNode] = []
    edges: list[tuple[str, str]] = []
    for i, sub in enumerate(subtasks):
        if not isinstance(sub, dict):
            raise ParseError(f"subtask {i} is not an object")
        goal = sub.get("goal")
        if not isinstance(goal, str) or not goal.strip():
            raise ParseError(f"subtask {i} has no goal")
        try:
            tt = TaskType.parse(sub.get("task_type", "think"))
        except ValueError as e:
            raise ParseError(f"subtask {i}: {e}") from None
        deps = sub.get("depends_on", [])
        if not isinstance(deps, list) or not all(isinstance(d, int) and not isinstance(d, bool) for d in deps):
            raise ParseError(f"subtask {i}: 'depends_on' must be a list of integers")
        node_id = f"{parent_id}.{i}"
        nodes.append(TaskNode(node_id, TaskSpec(goal.strip(), tt), parent_id=parent_id, depth=depth))
        for d in deps:
            edges.append((f"{parent_id}.{d}", node_id))
    seen: dict[str, int] = {}
    for i, n in enumerate(nodes):
        key = " ".join(n.spec.goal.lower().split())
        if key in seen:
            log.warning("plan for %s: subtask %d duplicates subtask %d (%r)", parent_id, i, seen[key], n.spec.goal)
        else:
            seen[key] = i
    return SubtaskGraph(nodes, edges)
