"""Deterministic offline agents.

The arithmetic family solves fully parenthesized integer expressions through
the full atomize/plan/execute/aggregate loop and is the main test oracle for
the engine. They read their inputs from the ``## Section`` headings that the
default templates and ``LocalContext.render`` produce.
"""

from __future__ import annotations

import ast
import asyncio
import hashlib
import json
import re
import threading
from typing import Callable

from .base import AgentError, Completion, Decoding, SyncAgent, TokenCost, ZERO_COST

OPS = "+-*"
_APPLY: dict[str, Callable[[int, int], int]] = {
    "+": lambda a, b: a + b,
    "-": lambda a, b: a - b,
    "*": lambda a, b: a * b,
}


def sections(prompt: str) -> dict[str, str]:
    """Split a prompt on ``## Heading`` lines."""
    out: dict[str, str] = {}
    current = None
    buf: list[str] = []
    for line in prompt.splitlines():
        if line.startswith("## "):
            if current is not None:
                out[current] = "\n".join(buf).strip()
            current = line[3:].strip().lower()
            buf = []
        elif current is not None:
            buf.append(line)
    if current is not None:
        out[current] = "\n".join(buf).strip()
    return out


# -- arithmetic helpers -------------------------------------------------------


def strip_outer(expr: str) -> str:
    expr = expr.strip().replace(" ", "")
    while expr.startswith("(") and expr.endswith(")") and _closing(expr, 0) == len(expr) - 1:
        expr = expr[1:-1]
    return expr


def _closing(expr: str, start: int) -> int:
    depth = 0
    for i in range(start, len(expr)):
        if expr[i] == "(":
            depth += 1
        elif expr[i] == ")":
            depth -= 1
            if depth == 0:
                return i
    raise ValueError(f"unbalanced parentheses in {expr!r}")


def count_operators(expr: str) -> int:
    expr = expr.replace(" ", "")
    n = 0
    for i, ch in enumerate(expr):
        # a leading or post-"(" minus is a sign, not an operator
        if ch in OPS and not (ch == "-" and (i == 0 or expr[i - 1] in "(" + OPS)):
            n += 1
    return n


def split_top(expr: str) -> tuple[str, str, str] | None:
    """Split at the operator that is evaluated last, or None for a bare number."""
    expr = strip_outer(expr)
    depth = 0
    last_add = last_mul = -1
    for i, ch in enumerate(expr):
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        elif depth == 0 and i > 0 and expr[i - 1] not in "(" + OPS:
            if ch in "+-":
                last_add = i
            elif ch == "*":
                last_mul = i
    at = last_add if last_add >= 0 else last_mul
    if at < 0:
        return None
    return strip_outer(expr[:at]), expr[at], strip_outer(expr[at + 1:])


def evaluate(expr: str) -> int:
    tree = ast.parse(expr.strip(), mode="eval")

    def ev(node) -> int:
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, int) and not isinstance(node.value, bool):
            return node.value
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
            return -ev(node.operand)
        if isinstance(node, ast.BinOp):
            op = {ast.Add: "+", ast.Sub: "-", ast.Mult: "*"}.get(type(node.op))
            if op:
                return _APPLY[op](ev(node.left), ev(node.right))
        raise ValueError(f"unsupported expression: {expr!r}")

    return ev(tree)


def is_expression(text: str) -> bool:
    return bool(text) and re.fullmatch(r"[0-9+\-*() ]+", text) is not None


_COMBINE = re.compile(r"^combine with ([+\-*])$")
_DEP_LINE = re.compile(r"^- \[([^\]]+)\] (.*)$")
_CHILD_LINE = re.compile(r"^- \[([^\]]+)\] goal: (.*?) => (.*)$")
_FAILED_LINE = re.compile(r"^- \[([^\]]+)\] FAILED")


def _goal(prompt: str) -> str:
    return sections(prompt).get("goal", "").strip()


def _fenced(obj: dict) -> str:
    return "```json\n" + json.dumps(obj) + "\n```"


class MockAgent(SyncAgent):
    """Base for deterministic mocks; charges a fixed configured cost per call."""

    name = "mock"

    def __init__(self, cost: TokenCost = ZERO_COST):
        self.cost = cost
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, prompt, *, system=None, decoding=Decoding()):
        with self._lock:
            self.calls += 1
        return Completion(self.respond(prompt, decoding), self.cost)

    def respond(self, prompt: str, decoding: Decoding) -> str:
        raise NotImplementedError


class ArithmeticAtomizer(MockAgent):
    """Atomic iff the goal has at most one operator (combine steps are always atomic)."""

    name = "arith_atomizer"

    def respond(self, prompt, decoding):
        goal = _goal(prompt)
        if _COMBINE.match(goal):
            return _fenced({"atomic": True, "rationale": "combine step", "task_type": "think"})
        if not is_expression(goal):
            return _fenced({"atomic": True, "rationale": "not an expression; execute directly"})
        n = count_operators(goal)
        return "Verdict follows.\n" + _fenced(
            {"atomic": n <= 1, "rationale": f"{n} operator(s)", "task_type": "think"}
        )


class ArithmeticPlanner(MockAgent):
    """Decompose by the top-level operator: left, right, then a combine step on both."""

    name = "arith_planner"

    def respond(self, prompt, decoding):
        goal = _goal(prompt)
        parts = split_top(goal) if is_expression(goal) else None
        if parts is None:
            return _fenced({"subtasks": [{"goal": goal, "task_type": "think", "depends_on": []}]})
        left, op, right = parts
        return _fenced(
            {
                "subtasks": [
                    {"goal": left, "task_type": "think", "depends_on": []},
                    {"goal": right, "task_type": "think", "depends_on": []},
                    {"goal": f"combine with {op}", "task_type": "think", "depends_on": [0, 1]},
                ]
            }
        )


class ArithmeticExecutor(MockAgent):
    """Evaluates its goal, or folds dependency values for a combine step."""

    name = "arith_executor"

    def respond(self, prompt, decoding):
        goal = _goal(prompt)
        m = _COMBINE.match(goal)
        if m:
            values = []
            for line in sections(prompt).get("dependency results", "").splitlines():
                dm = _DEP_LINE.match(line.strip())
                if dm:
                    values.append(int(dm.group(2).strip()))
            if not values:
                raise AgentError("combine step without dependency values")
            acc = values[0]
            for v in values[1:]:
                acc = _APPLY[m.group(1)](acc, v)
            return str(acc)
        return str(evaluate(goal))


class ArithmeticAggregator(MockAgent):
    """Applies the parent's top-level operator to the matching child values."""

    name = "arith_aggregator"

    def respond(self, prompt, decoding):
        sec = sections(prompt)
        goal = sec.get("goal", "")
        children = []
        for line in sec.get("child results", "").splitlines():
            cm = _CHILD_LINE.match(line.strip())
            if cm:
                children.append((cm.group(2).strip(), cm.group(3).strip()))
        parts = split_top(goal) if is_expression(goal) else None
        if parts is not None:
            left, op, right = parts
            pool = list(children)
            vals = []
            for want in (left, right):
                hit = next((c for c in pool if strip_outer(c[0]) == want), None)
                if hit is None:
                    break
                pool.remove(hit)
                vals.append(int(hit[1]))
            if len(vals) == 2:
                return str(_APPLY[op](vals[0], vals[1]))
        if len(children) == 1:
            return children[0][1]
        combine = [c for c in children if _COMBINE.match(c[0])]
        if combine:
            return combine[-1][1]
        return "partial: " + ", ".join(v for _, v in children)


class EchoAgent(MockAgent):
    name = "echo"

    def respond(self, prompt, decoding):
        return prompt


class FixedAgent(MockAgent):
    name = "fixed"

    def __init__(self, text: str, cost: TokenCost = ZERO_COST):
        super().__init__(cost)
        self.text = text

    def respond(self, prompt, decoding):
        return self.text


class ScriptedAgent(MockAgent):
    """Replays ``responses`` in order; an Exception instance in the script is raised."""

    name = "scripted"

    def __init__(self, responses: list, cost: TokenCost = ZERO_COST):
        super().__init__(cost)
        self._script = list(responses)
        self._i = 0

    def respond(self, prompt, decoding):
        with self._lock:
            item = self._script[min(self._i, len(self._script) - 1)]
            self._i += 1
        if isinstance(item, BaseException):
            raise item
        return item


class HeadCompressor(MockAgent):
    name = "head_compressor"

    def respond(self, prompt, decoding):
        m = re.search(r"at most (\d+) characters", prompt)
        budget = int(m.group(1)) if m else 200
        return sections(prompt).get("text", "")[:budget]


class SeededAgent(MockAgent):
    """Output is a hash of (prompt, seed): a stand-in for a sampled model."""

    name = "seeded"

    def respond(self, prompt, decoding):
        h = hashlib.sha256(f"{decoding.seed}\x00{prompt}".encode()).hexdigest()
        return h[:16]


class FailingAgent(SyncAgent):
    """Raises ``error`` for the first ``failures`` calls, then defers to ``inner``."""

    def __init__(self, inner, failures: float = float("inf"), error: type[Exception] = AgentError):
        self.inner = inner
        self.failures = failures
        self.error = error
        self.calls = 0
        self._lock = threading.Lock()
        self.name = f"fail{failures}:{getattr(inner, 'name', 'agent')}"

    def complete(self, prompt, *, system=None, decoding=Decoding()):
        with self._lock:
            self.calls += 1
            n = self.calls
        if n <= self.failures:
            raise self.error(f"{self.name}: injected failure #{n}")
        return self.inner.complete(prompt, system=system, decoding=decoding)


class DelayAgent(SyncAgent):
    """Sleeps (cooperatively) before delegating; ``delays`` may key on the prompt goal."""

    def __init__(self, inner, seconds: float = 0.0, delays: dict[str, float] | None = None):
        self.inner = inner
        self.seconds = seconds
        self.delays = delays or {}
        self.name = f"delay:{getattr(inner, 'name', 'agent')}"

    def complete(self, prompt, *, system=None, decoding=Decoding()):
        return self.inner.complete(prompt, system=system, decoding=decoding)

    async def acomplete(self, prompt, *, system=None, decoding=Decoding()):
        await asyncio.sleep(self.delays.get(_goal(prompt), self.seconds))
        return await self.inner.acomplete(prompt, system=system, decoding=decoding)


ARITHMETIC_ROLES = {
    "atomizer": "arith_atomizer",
    "planner": "arith_planner",
    "executor": "arith_executor",
    "aggregator": "arith_aggregator",
    "compressor": "head_compressor",
}


def mock_suite(costs: dict[str, TokenCost] | None = None) -> dict[str, MockAgent]:
    """Fresh registry of the deterministic agents, keyed by mock id.

    ``costs`` maps a mock id to the fixed TokenCost it charges per call.
    """
    costs = costs or {}
    agents: dict[str, MockAgent] = {
        "arith_atomizer": ArithmeticAtomizer(),
        "arith_planner": ArithmeticPlanner(),
        "arith_executor": ArithmeticExecutor(),
        "arith_aggregator": ArithmeticAggregator(),
        "head_compressor": HeadCompressor(),
        "echo": EchoAgent(),
        "seeded": SeededAgent(),
    }
    for mock_id, cost in costs.items():
        agents[mock_id].cost = cost
    return agents


def build_mock(mock_id: str, params: dict | None = None, registry: dict | None = None):
    """Construct a mock by id, including the parameterised wrappers used in configs."""
    params = dict(params or {})
    registry = registry if registry is not None else mock_suite()
    cost = TokenCost(**params.pop("cost", {}))
    if mock_id == "fixed":
        return FixedAgent(params["text"], cost)
    if mock_id == "delay":
        return DelayAgent(build_mock(params.get("inner", "echo"), params.get("inner_params"), registry), float(params.get("seconds", 0.0)))
    if mock_id == "fail":
        inner = build_mock(params.get("inner", "echo"), params.get("inner_params"), registry)
        return FailingAgent(inner, float(params.get("times", float("inf"))))
    if mock_id in registry:
        agent = registry[mock_id]
        if cost != ZERO_COST:
            agent.cost = cost
        return agent
    raise KeyError(f"unknown mock agent {mock_id!r}")
