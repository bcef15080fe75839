from __future__ import annotations

import ast
import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer
from pathlib import Path

import httpx
import pytest

from roma.agents import (
    AgentBinding,
    AgentError,
    ParseError,
    ProtocolError,
    TokenCost,
)
from roma.agents.base import Decoding
from roma.agents.llm import ChatCompletionsAgent, Endpoint, Price
from roma.agents.mocks import (
    ArithmeticAtomizer,
    ArithmeticPlanner,
    ScriptedAgent,
    build_mock,
    count_operators,
    evaluate,
    split_top,
)
from roma.agents.parsing import extract_object, extract_text_block, parse_atomizer_output, parse_planner_output
from roma.agents.templates import PromptTemplate, RenderError, TemplateRegistry, render_prompt
from roma.engine import Engine, RunConfig
from roma.task_model import TaskType, Violation, validate_graph

from conftest import expression_corpus

FIXTURES = Path(__file__).parent / "fixtures"


# -- templates -------------------------------------------------------------------


def test_render_substitutes_once_and_reports_missing():
    t = PromptTemplate("executor.custom", "executor", "Do {goal} with {context}")
    assert render_prompt(t, {"goal": "{context}", "context": "care"}) == "Do {context} with care"
    with pytest.raises(RenderError) as e:
        t.render({"goal": "x"})
    assert "context" in str(e.value)


def test_default_registry_has_every_role_template():
    reg = TemplateRegistry.default()
    for tid in ("atomizer.default", "planner.default", "aggregator.default", "executor.search", "executor.code", "judge.default", "proposer.default", "merger.default"):
        assert tid in reg
    assert "instruction" in reg.get("planner.default").required_placeholders


def test_registry_load_dir_overrides(tmp_path):
    (tmp_path / "planner.default.txt").write_text("Plan: {goal}\n{instruction}")
    reg = TemplateRegistry.default()
    reg.load_dir(tmp_path)
    assert reg.get("planner.default").render({"goal": "g", "instruction": "i"}) == "Plan: g\ni"


# -- parsing ---------------------------------------------------------------------


def test_last_wellformed_block_wins():
    text = '```json\n{"atomic": false, "rationale": "a"}\n```\nthen\n```json\n{"atomic": true, "rationale": "b"}\n```\n```json\n{broken\n```'
    d = parse_atomizer_output(text)
    assert d.atomic is True and d.rationale == "b"


def test_bare_json_is_accepted_and_junk_is_not():
    assert extract_object('{"a": 1}') == {"a": 1}
    with pytest.raises(ParseError):
        extract_object("no json here")
    with pytest.raises(ParseError):
        extract_object("[1, 2]")
    assert extract_text_block("```text\nhello\n```") == "hello"


@pytest.mark.parametrize(
    "body",
    [
        '{"atomic": "yes", "rationale": "r"}',
        '{"atomic": true, "rationale": "  "}',
        '{"atomic": true, "rationale": "r", "task_type": "paint"}',
    ],
)
def test_atomizer_parse_errors(body):
    with pytest.raises(ParseError):
        parse_atomizer_output(body)


def test_planner_ids_and_edges():
    text = json.dumps({"subtasks": [{"goal": "a"}, {"goal": "b", "task_type": "write", "depends_on": [0]}]})
    g = parse_planner_output(text, parent_id="root.1", depth=2)
    assert g.ids == ["root.1.0", "root.1.1"]
    assert g.edges == {("root.1.0", "root.1.1")}
    assert g.node("root.1.1").spec.task_type is TaskType.WRITE
    assert all(n.depth == 2 and n.parent_id == "root.1" for n in g.nodes)


def test_planner_out_of_range_index_is_dangling():
    g = parse_planner_output(json.dumps({"subtasks": [{"goal": "a", "depends_on": [4]}]}))
    assert validate_graph(g).kinds() == [Violation.DANGLING_EDGE]


@pytest.mark.parametrize(
    "obj",
    [{"subtasks": "x"}, {"subtasks": [{"goal": ""}]}, {"subtasks": [{"goal": "a", "depends_on": [True]}]}, {"subtasks": [3]}],
)
def test_planner_parse_errors(obj):
    with pytest.raises(ParseError):
        parse_planner_output(json.dumps(obj))


# -- mocks -----------------------------------------------------------------------


def binop_count(expr: str) -> int:
    return sum(isinstance(n, ast.BinOp) for n in ast.walk(ast.parse(expr, mode="eval")))


def atomizer_prompt(goal: str) -> str:
    return f"## Goal\n{goal}\n\n## Task type\nthink\n"


def test_atomizer_matches_operator_count_oracle():
    for expr in expression_corpus(50, seed=21):
        n = binop_count(expr)
        assert count_operators(expr) == n
        verdict = parse_atomizer_output(ArithmeticAtomizer().complete(atomizer_prompt(expr)).text)
        assert verdict.atomic is (n <= 1)


def test_planner_split_preserves_value():
    for expr in expression_corpus(50, seed=22):
        parts = split_top(expr)
        if parts is None:
            continue
        left, op, right = parts
        assert evaluate(f"({left}){op}({right})") == evaluate(expr)
        g = parse_planner_output(ArithmeticPlanner().complete(atomizer_prompt(expr)).text)
        assert validate_graph(g).accepted and len(g.ids) == 3


def test_scripted_agent_raises_scripted_errors():
    a = ScriptedAgent([AgentError("flaky"), "ok"])
    with pytest.raises(AgentError):
        a.complete("p")
    assert a.complete("p").text == "ok"


def test_build_mock_wrappers():
    assert build_mock("fixed", {"text": "hi", "cost": {"input_tokens": 2}}).complete("x").cost == TokenCost(2, 0)
    failing = build_mock("fail", {"inner": "echo", "times": 1})
    with pytest.raises(AgentError):
        failing.complete("x")
    assert failing.complete("x").text == "x"
    with pytest.raises(KeyError):
        build_mock("nonexistent")


def test_binding_validation():
    with pytest.raises(ValueError):
        AgentBinding("a", "planner", backend="llm_endpoint", model_name="m")
    with pytest.raises(ValueError):
        AgentBinding("a", "planner", backend="mock")
    with pytest.raises(ValueError):
        AgentBinding("a", "painter", mock_id="echo")
    assert AgentBinding("a", "planner", mock_id="echo").role.value == "planner"


# -- HTTP backend ----------------------------------------------------------------

ATOMIC_REPLY = '```json\n{"atomic": true, "rationale": "direct", "task_type": "think"}\n```'


class _Handler(BaseHTTPRequestHandler):
    def log_message(self, *args):
        pass

    def do_POST(self):
        server = self.server
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        with server.lock:
            server.requests.append((body, dict(self.headers)))
            status = server.statuses.pop(0) if server.statuses else 200
        if status != 200:
            self.send_response(status)
            self.end_headers()
            self.wfile.write(b"upstream busy")
            return
        prompt = body["messages"][-1]["content"]
        content = ATOMIC_REPLY if "Decide whether the goal" in prompt else "42"
        payload = {"choices": [{"message": {"content": content}}], "usage": {"prompt_tokens": 100, "completion_tokens": 10}}
        data = json.dumps(payload).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


@pytest.fixture
def chat_server():
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    server.lock = threading.Lock()
    server.requests = []
    server.statuses = []
    th = threading.Thread(target=server.serve_forever, daemon=True)
    th.start()
    yield server
    server.shutdown()
    server.server_close()


def _endpoint(server, **kw) -> Endpoint:
    host, port = server.server_address
    return Endpoint("local", f"http://{host}:{port}/v1/chat/completions", **kw)


def test_retries_after_two_server_errors_are_all_traced(chat_server, monkeypatch):
    chat_server.statuses = [500, 500]
    monkeypatch.setenv("ROMA_TEST_TOKEN", "s3cret")
    ep = _endpoint(chat_server, auth_env="ROMA_TEST_TOKEN", prices={"m": Price(1.0, 2.0)})
    llm = ChatCompletionsAgent(ep, "m")
    cfg = RunConfig(retry_limit=2, assignments={"atomizer": "llm", "executor": "llm"})
    out = Engine(cfg, {"llm": llm}).run("what is six times seven")
    assert out.result.ok and out.result.summary == "42"
    calls = [e for e in out.trace.events if e.kind == "agent_call" and e.payload["role"] == "atomizer"]
    assert [c.payload["attempt"] for c in calls] == [0, 1, 2]
    assert [c.payload["ok"] for c in calls] == [False, False, True]
    errors = [e for e in out.trace.events if e.kind == "error"]
    assert len(errors) == 2 and all("HTTP 500" in e.payload["error"] for e in errors)
    body, headers = chat_server.requests[0]
    assert headers["Authorization"] == "Bearer s3cret"
    assert body["model"] == "m" and body["temperature"] == 0.0
    assert out.result.accounting.input_tokens == 200
    assert out.result.accounting.dollars == pytest.approx(2 * (100 * 1.0 + 10 * 2.0) / 1e6)


def test_http_error_after_retry_budget_fails_the_node(chat_server):
    chat_server.statuses = [503] * 5
    llm = ChatCompletionsAgent(_endpoint(chat_server), "m")
    cfg = RunConfig(retry_limit=1, assignments={"atomizer": "llm", "executor": "llm"})
    out = Engine(cfg, {"llm": llm}).run("anything")
    assert not out.result.ok
    assert len(chat_server.requests) == 2


def _replay_transport(payload: dict, status: int = 200):
    def handler(request: httpx.Request) -> httpx.Response:
        return httpx.Response(status, json=payload)

    return httpx.MockTransport(handler)


def test_recorded_fixture_replay():
    payload = json.loads((FIXTURES / "chat_completion_ok.json").read_text())
    ep = Endpoint("fixture", "http://fixture.invalid/v1/chat/completions", prices={"fixture-model": Price(3.0, 15.0)})
    agent = ChatCompletionsAgent(ep, "fixture-model", client=httpx.Client(transport=_replay_transport(payload)))
    comp = agent.complete("prompt", system="sys", decoding=Decoding(temperature=0.3))
    d = parse_atomizer_output(comp.text)
    assert d.atomic and d.suggested_task_type is TaskType.SEARCH
    assert (comp.cost.input_tokens, comp.cost.output_tokens) == (123, 45)
    assert comp.cost.dollars == pytest.approx((123 * 3.0 + 45 * 15.0) / 1e6)


def test_malformed_body_is_a_protocol_error():
    agent = ChatCompletionsAgent(Endpoint("x", "http://x.invalid"), "m", client=httpx.Client(transport=_replay_transport({"nope": 1})))
    with pytest.raises(ProtocolError):
        agent.complete("p")


def test_protocol_error_is_not_retried():
    agent = ChatCompletionsAgent(Endpoint("x", "http://x.invalid"), "m", client=httpx.Client(transport=_replay_transport({"nope": 1})))
    cfg = RunConfig(retry_limit=3, assignments={"atomizer": "llm", "executor": "llm"})
    out = Engine(cfg, {"llm": agent}).run("anything")
    assert not out.result.ok
    assert sum(e.kind == "agent_call" for e in out.trace.events) == 1
