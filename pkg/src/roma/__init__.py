"""Recursive atomize/plan/execute/aggregate agent engine with a multi-proposer prompt optimizer."""

__version__ = "0.1.0"

from .engine import Engine, RunConfig, RunOutcome, TaskResult  # noqa: E402
from .task_model import NodeStatus, SubtaskGraph, TaskNode, TaskSpec, TaskType  # noqa: E402

__all__ = [
    "Engine",
    "NodeStatus",
    "RunConfig",
    "RunOutcome",
    "SubtaskGraph",
    "TaskNode",
    "TaskResult",
    "TaskSpec",
    "TaskType",
    "__version__",
]
