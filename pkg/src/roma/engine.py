"""The recursive solve loop: atomize, then either execute or plan/solve-children/aggregate."""

from __future__ import annotations

import asyncio
import json
import logging
from dataclasses import dataclass, field
from typing import Mapping

from .agents.base import (
    Agent,
    AgentBinding,
    AgentError,
    Decoding,
    ParseError,
    ProtocolError,
    TokenCost,
    ZERO_COST,
)
from .agents.mocks import ARITHMETIC_ROLES, mock_suite
from .agents.parsing import AtomicityDecision, extract_text_block, parse_atomizer_output, parse_planner_output
from .agents.templates import TemplateRegistry
from .context_store import (
    DEFAULT_CONTEXT_BUDGET,
    DEFAULT_SUMMARY_BUDGET,
    ArtifactStore,
    LocalContext,
    StorageError,
    assemble_context,
    compress_summary,
    truncate,
)
from .scheduler import PARTIAL, STRICT, run_graph
from .task_model import NodeStatus, SubtaskGraph, TaskNode, TaskSpec, TaskType, validate_graph
from .tools import Toolbox
from .trace import Trace, config_hash

log = logging.getLogger(__name__)

ROOT_ID = "root"


@dataclass(frozen=True)
class RunConfig:
    max_depth: int = 5
    max_children_per_plan: int = 8
    concurrency_limit: int = 4
    summary_budget: int = DEFAULT_SUMMARY_BUDGET
    context_budget: int = DEFAULT_CONTEXT_BUDGET
    retry_limit: int = 2
    failure_policy: str = STRICT
    node_timeout: float | None = None
    # "role" or "role:task_type" -> agent id
    assignments: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.concurrency_limit < 1:
            raise ValueError("concurrency_limit must be >= 1")
        if self.max_children_per_plan < 1:
            raise ValueError("max_children_per_plan must be >= 1")
        if self.summary_budget < 1 or self.context_budget < 1:
            raise ValueError("budgets must be positive")
        if self.retry_limit < 0:
            raise ValueError("retry_limit must be >= 0")
        if self.failure_policy not in (STRICT, PARTIAL):
            raise ValueError(f"failure_policy must be {STRICT!r} or {PARTIAL!r}")
        object.__setattr__(self, "assignments", dict(self.assignments))

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["assignments"] = dict(sorted(self.assignments.items()))
        return d


@dataclass(frozen=True)
class TaskResult:
    node_id: str
    status: NodeStatus
    summary: str = ""
    output: str | None = None
    accounting: TokenCost = ZERO_COST
    diagnostic: str | None = None
    citations: tuple[str, ...] = ()
    artifacts: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return self.status is NodeStatus.DONE


class PlanRejected(ParseError):
    def __init__(self, message: str, graph: SubtaskGraph | None = None):
        super().__init__(message)
        self.graph = graph


class RoleFailure(RuntimeError):
    def __init__(self, message: str, cost: TokenCost):
        super().__init__(message)
        self.cost = cost


@dataclass
class RunOutcome:
    result: TaskResult
    trace: Trace
    store: ArtifactStore


def _default_decoding(role: str, task_type: TaskType | None) -> Decoding:
    if role == "executor" and task_type is TaskType.WRITE:
        return Decoding(temperature=0.7)
    return Decoding(temperature=0.0)


class Engine:
    """Holds configuration and agents; each ``run`` gets its own trace and run state.

    ``agents`` maps agent ids to Agent objects; ``config.assignments`` maps
    roles (optionally ``role:task_type``) to those ids. ``bindings`` may
    provide per-agent template ids and decoding settings.
    """

    def __init__(
        self,
        config: RunConfig,
        agents: Mapping[str, Agent],
        *,
        bindings: Mapping[str, AgentBinding] | None = None,
        templates: TemplateRegistry | None = None,
        instructions: Mapping[str, str] | None = None,
        tools: Toolbox | None = None,
        store: ArtifactStore | None = None,
    ):
        self.config = config
        self.agents = dict(agents)
        self.bindings = dict(bindings or {})
        self.templates = templates or TemplateRegistry.default()
        self.instructions = dict(instructions if instructions is not None else default_instructions())
        self.tools = tools or Toolbox()
        self.store = store
        for key, agent_id in config.assignments.items():
            if agent_id not in self.agents:
                raise KeyError(f"role {key!r} is assigned to unknown agent {agent_id!r}")

    @classmethod
    def with_mocks(cls, config: RunConfig | None = None, *, costs=None, **kw) -> "Engine":
        """Engine wired to the arithmetic mock suite."""
        config = config or RunConfig()
        agents = mock_suite(costs)
        assignments = {**ARITHMETIC_ROLES, **config.assignments}
        config = RunConfig(**{**config.to_dict(), "assignments": assignments})
        return cls(config, {**agents, **kw.pop("agents", {})}, **kw)

    def run(self, task: TaskSpec | str, *, run_id: str = "run") -> RunOutcome:
        return asyncio.run(self.arun(task, run_id=run_id))

    async def arun(self, task: TaskSpec | str, *, run_id: str = "run") -> RunOutcome:
        if isinstance(task, str):
            task = TaskSpec(task)
        store = self.store if self.store is not None else ArtifactStore()
        trace = Trace(run_id, store=store, meta={"config_hash": config_hash(self.config.to_dict()), "versions": _versions()})
        session = Session(self, trace, store)
        root = TaskNode(ROOT_ID, task, None, 0)
        result = await session.solve(root)
        trace.finish(
            root={
                "node_id": ROOT_ID,
                "status": result.status.value,
                "summary": result.summary,
                "goal": task.goal,
            }
        )
        return RunOutcome(result, trace, store)


def _versions() -> dict:
    from . import __version__

    return {"roma": __version__}


def default_instructions() -> dict[str, str]:
    from importlib import resources

    text = (resources.files("roma") / "data" / "instructions.json").read_text(encoding="utf-8")
    return json.loads(text)


class Session:
    """State of one run: trace, store, and the role operations."""

    def __init__(self, engine: Engine, trace: Trace, store: ArtifactStore):
        self.engine = engine
        self.config = engine.config
        self.trace = trace
        self.store = store

    # -- agent plumbing -------------------------------------------------------

    def _agent_id(self, role: str, task_type: TaskType | None = None) -> str:
        a = self.config.assignments
        if task_type is not None and f"{role}:{task_type.value}" in a:
            return a[f"{role}:{task_type.value}"]
        if role in a:
            return a[role]
        raise KeyError(f"no agent assigned to role {role!r}")

    def _template(self, role: str, agent_id: str, task_type: TaskType | None):
        binding = self.engine.bindings.get(agent_id)
        if binding and binding.prompt_template_id:
            return self.engine.templates.get(binding.prompt_template_id)
        if role == "executor":
            return self.engine.templates.get(f"executor.{(task_type or TaskType.THINK).value}")
        return self.engine.templates.get(f"{role}.default")

    def _instruction(self, role: str, task_type: TaskType | None) -> str:
        ins = self.engine.instructions
        if role == "executor" and task_type is not None and f"executor:{task_type.value}" in ins:
            return ins[f"executor:{task_type.value}"]
        return ins.get(role, "")

    async def call_agent(
        self,
        role: str,
        node_id: str,
        parent_event: int,
        bindings: dict[str, str],
        *,
        task_type: TaskType | None = None,
        parser=None,
    ):
        """Render, call and parse with bounded retries. Every attempt is one agent_call event.

        Returns ``(value, cost)``; raises RoleFailure after the last attempt.
        """
        agent_id = self._agent_id(role, task_type)
        agent = self.engine.agents[agent_id]
        binding = self.engine.bindings.get(agent_id)
        decoding = binding.decoding if binding else _default_decoding(role, task_type)
        template = self._template(role, agent_id, task_type)
        prompt = template.render({"instruction": self._instruction(role, task_type), **bindings})
        cost = ZERO_COST
        feedback = None
        last = "no attempts"
        for attempt in range(self.config.retry_limit + 1):
            full = prompt if feedback is None else f"{prompt}\n\n## Previous attempt failed\n{feedback}\n"
            ev = self.trace.open(
                "agent_call",
                node_id,
                parent_event_id=parent_event,
                payload={"role": role, "agent": agent_id, "attempt": attempt, "prompt_chars": len(full)},
            )
            try:
                comp = await agent.acomplete(full, decoding=decoding)
            except ProtocolError as e:
                self._fail_call(ev, node_id, parent_event, role, attempt, e)
                raise RoleFailure(f"{role}: {e}", cost) from e
            except Exception as e:  # noqa: BLE001 - AgentError and anything unexpected are retriable
                self._fail_call(ev, node_id, parent_event, role, attempt, e)
                feedback = last = f"{type(e).__name__}: {e}"
                continue
            cost = cost + comp.cost
            value = comp.text
            if parser is not None:
                try:
                    value = parser(comp.text)
                except ParseError as e:
                    extra = {}
                    if isinstance(e, PlanRejected):
                        extra["rejected_plan"] = e.graph.to_dict() if e.graph is not None else comp.text[:2000]
                    self._fail_call(ev, node_id, parent_event, role, attempt, e, comp.cost, extra)
                    feedback = last = f"{type(e).__name__}: {e}"
                    continue
            self.trace.close(ev, payload={"ok": True, "output_chars": len(comp.text)}, accounting=comp.cost)
            return value, cost
        raise RoleFailure(f"{role} failed after {self.config.retry_limit + 1} attempt(s): {last}", cost)

    def _fail_call(self, ev, node_id, parent_event, role, attempt, exc, cost=ZERO_COST, extra=None) -> None:
        self.trace.close(ev, payload={"ok": False, "error": str(exc)}, accounting=cost)
        now = self.trace.now()
        self.trace.record(
            "error",
            node_id,
            parent_event_id=ev,
            payload={"role": role, "attempt": attempt, "error_type": type(exc).__name__, "error": str(exc), **(extra or {})},
            start_time=now,
            end_time=now,
        )

    async def summarize(self, text: str, node_id: str, parent_event: int) -> tuple[str, TokenCost]:
        budget = self.config.summary_budget
        if len(text) <= budget:
            return text, ZERO_COST
        try:
            self._agent_id("compressor")
        except KeyError:
            return compress_summary(text, budget), ZERO_COST
        try:
            out, cost = await self.call_agent("compressor", node_id, parent_event, {"budget": str(budget), "text": text})
        except RoleFailure as f:
            err = f

            def failing(*_):
                raise err

            return compress_summary(text, budget, failing), f.cost
        return compress_summary(text, budget, lambda *_: out), cost

    # -- the control loop ----------------------------------------------------

    async def solve(
        self,
        node: TaskNode,
        *,
        parent_goal: str | None = None,
        dep_results: Mapping[str, TaskResult] | None = None,
        parent_event: int | None = None,
    ) -> TaskResult:
        dep_results = dict(dep_results or {})
        ctx = assemble_context(
            node,
            dep_results,
            self.config.context_budget,
            parent_goal=parent_goal,
            dependencies=list(dep_results),
            allow_failed=self.config.failure_policy == PARTIAL,
        )
        try:
            decision, cost = await self.atomize(node, ctx, parent_event)
        except RoleFailure as f:
            return self._failed(node, f"atomizer: {f}", f.cost)
        node.atomic = decision.atomic
        spec = node.spec.with_type(decision.suggested_task_type) if decision.suggested_task_type else node.spec
        if decision.atomic:
            result = await self.execute(node, spec, ctx, parent_event)
            return _add_cost(result, cost)

        try:
            graph, plan_event, c = await self.plan(node, spec, ctx, parent_event)
        except RoleFailure as f:
            return self._failed(node, f"planner: {f}", cost + f.cost)
        cost = cost + c

        async def solve_child(child: TaskNode, deps: Mapping[str, TaskResult], slot: int) -> TaskResult:
            return await self.solve(child, parent_goal=spec.goal, dep_results=deps, parent_event=plan_event)

        def on_failure(child: TaskNode, exc: BaseException) -> TaskResult:
            if isinstance(exc, StorageError):
                raise exc
            now = self.trace.now()
            self.trace.record(
                "error",
                child.id,
                parent_event_id=plan_event,
                payload={"role": "scheduler", "error_type": type(exc).__name__, "error": str(exc)},
                start_time=now,
                end_time=now,
            )
            return TaskResult(child.id, NodeStatus.FAILED, diagnostic=f"{type(exc).__name__}: {exc}")

        def on_record(child: TaskNode, status: NodeStatus, rec, failed_deps) -> None:
            child.status = status
            payload = {"status": status.value, "worker_slot": None, "wave_index": None}
            if rec is None:
                now = self.trace.now()
                self.trace.record("schedule", child.id, parent_event_id=plan_event, payload=payload, start_time=now, end_time=now)
                return
            payload.update(worker_slot=rec.worker_slot, wave_index=rec.wave_index)
            if failed_deps:
                payload["disclosed_failures"] = failed_deps
            self.trace.record(
                "schedule", child.id, parent_event_id=plan_event, payload=payload, start_time=rec.start_time, end_time=rec.end_time
            )

        run = await run_graph(
            graph,
            solve_child,
            concurrency_limit=self.config.concurrency_limit,
            policy=self.config.failure_policy,
            node_timeout=self.config.node_timeout,
            clock=self.trace.now,
            on_failure=on_failure,
            on_record=on_record,
        )
        children = [run.results[nid] for nid in graph.ids if nid in run.results]
        child_cost = TokenCost.total(r.accounting for r in children)
        bad = [nid for nid in graph.ids if run.statuses[nid] is not NodeStatus.DONE]
        if bad and (self.config.failure_policy == STRICT or len(bad) == len(graph.ids)):
            detail = ", ".join(f"{nid}={run.statuses[nid].value}" for nid in bad)
            return self._failed(node, f"children not done: {detail}", cost + child_cost)
        failures = [
            (nid, run.results[nid].diagnostic if nid in run.results else run.statuses[nid].value)
            for nid in bad
        ]
        done = [r for r in children if r.ok]
        result = await self.aggregate(node, spec, done, parent_event, failures=failures, graph=graph)
        return _add_cost(result, cost + child_cost)

    async def atomize(self, node: TaskNode, ctx: LocalContext, parent_event: int | None):
        ev = self.trace.open(
            "atomize",
            node.id,
            parent_event_id=parent_event,
            payload={
                "goal": node.spec.goal,
                "task_type": node.spec.task_type.value,
                "depth": node.depth,
                "parent_id": node.parent_id,
                "context": ctx.to_dict(),
            },
        )
        if node.depth >= self.config.max_depth:
            decision = AtomicityDecision(True, f"depth cap {self.config.max_depth} reached", forced=True)
            self.trace.close(ev, payload={"decision": decision.to_dict(), "forced": True})
            return decision, ZERO_COST
        try:
            decision, cost = await self.call_agent(
                "atomizer", node.id, ev, {"context": ctx.render()}, parser=parse_atomizer_output
            )
        except RoleFailure as f:
            self.trace.close(ev, payload={"failed": str(f)})
            raise
        self.trace.close(ev, payload={"decision": decision.to_dict(), "forced": False})
        return decision, cost

    async def plan(self, node: TaskNode, spec: TaskSpec, ctx: LocalContext, parent_event: int | None):
        ev = self.trace.open("plan", node.id, parent_event_id=parent_event, payload={"goal": spec.goal})
        limit = self.config.max_children_per_plan

        def parse(text: str) -> SubtaskGraph:
            graph = parse_planner_output(text, parent_id=node.id, depth=node.depth + 1)
            report = validate_graph(graph)
            if not report.accepted:
                raise PlanRejected(f"invalid plan: {report}", graph)
            if len(graph.nodes) > limit:
                raise PlanRejected(f"plan has {len(graph.nodes)} subtasks; at most {limit} allowed", graph)
            return graph

        try:
            graph, cost = await self.call_agent(
                "planner", node.id, ev, {"context": ctx.render(), "max_children": str(limit)}, parser=parse
            )
        except RoleFailure as f:
            self.trace.close(ev, payload={"failed": str(f)})
            raise
        ref = self.store.put(graph.canonical_json(), "plan", node.id)
        self.trace.close(ev, payload={"graph": graph.to_dict(), "artifact": ref})
        return graph, ev, cost

    async def execute(self, node: TaskNode, spec: TaskSpec, ctx: LocalContext, parent_event: int | None) -> TaskResult:
        ev = self.trace.open(
            "execute",
            node.id,
            parent_event_id=parent_event,
            payload={"task_type": spec.task_type.value, "context": ctx.to_dict()},
        )
        cost = ZERO_COST
        citations: list[str] = []
        artifacts: list[str] = []
        tools_text = ""
        try:
            if spec.task_type is TaskType.SEARCH:
                docs = await self._tool_search(node, spec.goal, ev)
                citations.extend(docs)
                per_doc = max(200, self.config.context_budget // max(1, len(docs)) // 2)
                tools_text = "\n## Retrieved documents\n" + "\n".join(
                    f"[doc:{d}] {truncate(self.store.get(d).text(), per_doc)}" for d in docs
                ) + "\n"
            elif spec.task_type is TaskType.CODE:
                program, c = await self.call_agent(
                    "executor", node.id, ev, {"context": ctx.render(), "tools": ""},
                    task_type=spec.task_type, parser=extract_text_block,
                )
                cost = cost + c
                transcript_id = await self._tool_sandbox(node, program, ev)
                artifacts.append(transcript_id)
                tools_text = "\n## Sandbox transcript\n" + truncate(
                    self.store.get(transcript_id).text(), self.config.context_budget // 2
                ) + "\n"
            text, c = await self.call_agent(
                "executor", node.id, ev, {"context": ctx.render(), "tools": tools_text}, task_type=spec.task_type
            )
            cost = cost + c
        except RoleFailure as f:
            self.trace.close(ev, payload={"failed": str(f)})
            return self._failed(node, f"executor: {f}", cost + f.cost)
        return await self._finish(node, ev, text, cost, citations=citations, artifacts=artifacts)

    async def aggregate(
        self,
        node: TaskNode,
        spec: TaskSpec,
        children: list[TaskResult],
        parent_event: int | None,
        *,
        failures: list[tuple[str, str]] = (),
        graph: SubtaskGraph | None = None,
    ) -> TaskResult:
        ev = self.trace.open(
            "aggregate",
            node.id,
            parent_event_id=parent_event,
            payload={"children": [r.node_id for r in children], "failures": [list(f) for f in failures]},
        )
        goals = {n.id: n.spec.goal for n in graph.nodes} if graph is not None else {}
        lines = [f"- [{r.node_id}] goal: {goals.get(r.node_id, r.node_id)} => {r.summary}" for r in children]
        if failures:
            lines.append("")
            lines.append("Some subtasks failed; their results are missing:")
            lines += [f"- [{nid}] FAILED: {diag}" for nid, diag in failures]
        refs = [r.output for r in children if r.output]
        block = "\n".join(lines)
        if refs:
            block += "\n\n## Child artifacts\n" + "\n".join(f"- {r}" for r in refs)
        block = truncate(block, self.config.context_budget)
        try:
            text, cost = await self.call_agent("aggregator", node.id, ev, {"goal": spec.goal, "children": block})
        except RoleFailure as f:
            self.trace.close(ev, payload={"failed": str(f)})
            return self._failed(node, f"aggregator: {f}", f.cost)
        return await self._finish(node, ev, text, cost)

    # -- helpers ---------------------------------------------------------------

    async def _finish(self, node, ev, text, cost, *, citations=(), artifacts=()) -> TaskResult:
        if not text.strip():
            self.trace.close(ev, payload={"failed": "empty output"})
            return self._failed(node, "empty output", cost)
        output = self.store.put(text, "result", node.id)
        summary, c = await self.summarize(text, node.id, ev)
        cost = cost + c
        self.trace.close(
            ev,
            payload={
                "output": output,
                "summary": summary,
                "citations": list(citations),
                "artifacts": list(artifacts),
            },
        )
        node.result_ref = output
        return TaskResult(node.id, NodeStatus.DONE, summary, output, cost, None, tuple(citations), tuple(artifacts))

    def _failed(self, node: TaskNode, diagnostic: str, cost: TokenCost) -> TaskResult:
        log.info("node %s failed: %s", node.id, diagnostic)
        return TaskResult(node.id, NodeStatus.FAILED, "", None, cost, diagnostic)

    async def _tool_search(self, node: TaskNode, query: str, parent_event: int) -> list[str]:
        ev = self.trace.open("tool_call", node.id, parent_event_id=parent_event, payload={"tool": "search", "request": query})
        try:
            res = await asyncio.to_thread(self.engine.tools.search.search, query)
        except Exception as e:
            self.trace.close(ev, payload={"ok": False, "error": str(e)})
            raise RoleFailure(f"search tool: {e}", ZERO_COST) from e
        ids = list(dict.fromkeys(self.store.put(d, "document", node.id) for d in res.documents))
        self.trace.close(ev, payload={"ok": True, "documents": ids})
        return ids

    async def _tool_sandbox(self, node: TaskNode, program: str, parent_event: int) -> str:
        ev = self.trace.open("tool_call", node.id, parent_event_id=parent_event, payload={"tool": "sandbox", "program_chars": len(program)})
        try:
            res = await asyncio.to_thread(self.engine.tools.sandbox.run, program)
        except Exception as e:
            self.trace.close(ev, payload={"ok": False, "error": str(e)})
            raise RoleFailure(f"sandbox: {e}", ZERO_COST) from e
        tid = self.store.put(res.transcript or "(empty transcript)", "tool_transcript", node.id)
        self.trace.close(ev, payload={"ok": True, "transcript": tid})
        return tid


def _add_cost(result: TaskResult, extra: TokenCost) -> TaskResult:
    if extra == ZERO_COST:
        return result
    return TaskResult(
        result.node_id, result.status, result.summary, result.output, result.accounting + extra,
        result.diagnostic, result.citations, result.artifacts,
    )
