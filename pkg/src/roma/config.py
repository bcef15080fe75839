"""TOML configuration: schema, loading, and builders for engines and optimizer pools.

Unknown keys anywhere are rejected. Secrets never appear in the file; an
endpoint names the environment variable that holds its bearer token.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .agents.base import Agent, AgentBinding, Decoding, Role
from .agents.llm import ChatCompletionsAgent, Endpoint, Price
from .agents.mocks import build_mock, mock_suite
from .agents.templates import TemplateRegistry
from .context_store import DEFAULT_CONTEXT_BUDGET, DEFAULT_SUMMARY_BUDGET, ArtifactStore
from .engine import Engine, RunConfig, default_instructions
from .gepa import oracle
from .gepa.optimizer import Proposer
from .gepa.scoring import Budget, Weights
from .scheduler import STRICT
from .tools import StubSearch, Toolbox

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """Raised for unreadable, malformed, or inconsistent configuration."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class RunSection(_Strict):
    max_depth: int = Field(5, ge=1)
    max_children_per_plan: int = Field(8, ge=1)
    concurrency_limit: int = Field(4, ge=1)
    summary_budget: int = Field(DEFAULT_SUMMARY_BUDGET, ge=1)
    context_budget: int = Field(DEFAULT_CONTEXT_BUDGET, ge=1)
    retry_limit: int = Field(2, ge=0)
    failure_policy: Literal["strict", "partial"] = STRICT
    node_timeout: Optional[float] = Field(None, gt=0)


class PriceSection(_Strict):
    input_per_mtok: float = Field(0.0, ge=0)
    output_per_mtok: float = Field(0.0, ge=0)


class EndpointSection(_Strict):
    url: str
    auth_env: Optional[str] = None
    max_in_flight: int = Field(8, ge=1)
    timeout_s: float = Field(120.0, gt=0)
    prices: dict[str, PriceSection] = {}


class AgentSection(_Strict):
    role: Role
    backend: Literal["mock", "llm_endpoint"] = "mock"
    mock_id: Optional[str] = None
    params: dict = {}
    model_name: Optional[str] = None
    endpoint: Optional[str] = None
    template: Optional[str] = None
    temperature: Optional[float] = Field(None, ge=0)
    max_output_tokens: int = Field(1024, ge=1)
    seed: int = 0


class TemplatesSection(_Strict):
    paths: list[str] = []


class ToolsSection(_Strict):
    search_corpus: dict[str, list[str]] = {}


class BudgetSection(_Strict):
    max_metric_calls: int = Field(150, ge=0)
    max_judge_calls: int = Field(1_000, ge=0)
    max_verifier_runs: int = Field(10_000, ge=0)
    max_proposals_per_round: int = Field(3, ge=0)
    max_selected: int = Field(2, ge=0)
    wall_clock_limit: Optional[float] = Field(None, gt=0)


class WeightsSection(_Strict):
    alpha: float = Field(1.0, ge=0)
    beta: float = Field(1.0, ge=0)
    gamma: float = Field(0.5, ge=0)
    delta: float = Field(0.1, ge=0)


VERIFIERS = {
    "no_placeholder": lambda: oracle.no_placeholder_verifier,
    "length": oracle.length_verifier,
}
METRICS = {"keyword_coverage": oracle.keyword_coverage}


class GepaSection(_Strict):
    modules: list[str] = []
    proposers: list[str] = []
    judge: Optional[str] = None
    merger: Optional[str] = None
    merge: bool = True
    metric: Literal["keyword_coverage"] = "keyword_coverage"
    verifiers: list[str] = []
    patience: int = Field(5, ge=1)
    seed: int = 0
    minibatch_size: int = Field(3, ge=0)
    target_utility: Optional[float] = None
    weights: WeightsSection = WeightsSection()
    budget: BudgetSection = BudgetSection()

    @model_validator(mode="after")
    def _known_verifiers(self):
        unknown = [v for v in self.verifiers if v not in VERIFIERS]
        if unknown:
            raise ValueError(f"unknown verifiers {unknown}; known: {sorted(VERIFIERS)}")
        return self


class ConfigFile(_Strict):
    run: RunSection = RunSection()
    assignments: dict[str, str] = {}
    agents: dict[str, AgentSection] = {}
    endpoints: dict[str, EndpointSection] = {}
    templates: TemplatesSection = TemplatesSection()
    instructions: Optional[str] = None
    tools: ToolsSection = ToolsSection()
    gepa: Optional[GepaSection] = None
    # set by the loader, used to resolve relative paths
    base_dir: str = "."

    @model_validator(mode="after")
    def _references(self):
        for key, agent_id in self.assignments.items():
            if agent_id not in self.agents:
                raise ValueError(f"assignment {key!r} names unknown agent {agent_id!r}")
        for agent_id, a in self.agents.items():
            if a.backend == "llm_endpoint" and a.endpoint not in self.endpoints:
                raise ValueError(f"agent {agent_id!r} uses unknown endpoint {a.endpoint!r}")
        if self.gepa is not None:
            g = self.gepa
            for agent_id in [*g.proposers, g.judge, g.merger]:
                if agent_id is not None and agent_id not in self.agents:
                    raise ValueError(f"gepa section names unknown agent {agent_id!r}")
        return self

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


def parse_config(text: str, base_dir: str | Path = ".") -> ConfigFile:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"malformed TOML: {e}") from e
    if "base_dir" in data:
        raise ConfigError("base_dir is not a configurable key")
    try:
        return ConfigFile.model_validate({**data, "base_dir": str(base_dir)})
    except ValidationError as e:
        raise ConfigError(_format_errors(e)) from e


def load_config(path: str | Path) -> ConfigFile:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror or e}") from e
    return parse_config(text, path.parent)


def _format_errors(e: ValidationError) -> str:
    lines = []
    for err in e.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "invalid config:\n  " + "\n  ".join(lines)


# -- builders ------------------------------------------------------------------


def _mock_registry() -> dict:
    reg: dict = mock_suite()
    reg.update(
        keyword_proposer=oracle.KeywordProposer(),
        keyword_judge=oracle.KeywordJudge(),
        identity_merger=oracle.IdentityMerger(),
    )
    return reg


def build_agents(cfg: ConfigFile) -> tuple[dict[str, Agent], dict[str, AgentBinding]]:
    endpoints = {
        name: Endpoint(
            name,
            e.url,
            e.auth_env,
            {m: Price(p.input_per_mtok, p.output_per_mtok) for m, p in e.prices.items()},
            e.max_in_flight,
            e.timeout_s,
        )
        for name, e in cfg.endpoints.items()
    }
    agents: dict[str, Agent] = {}
    bindings: dict[str, AgentBinding] = {}
    for agent_id, a in cfg.agents.items():
        decoding = Decoding(temperature=a.temperature or 0.0, max_output_tokens=a.max_output_tokens, seed=a.seed)
        try:
            binding = AgentBinding(
                agent_id, a.role, a.backend, a.model_name, a.endpoint, a.mock_id, a.template, decoding
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if a.backend == "mock":
            try:
                # each agent gets its own instance so call counters stay separate
                agents[agent_id] = build_mock(a.mock_id, a.params, _mock_registry())
            except (KeyError, TypeError, ValueError) as e:
                raise ConfigError(f"agent {agent_id!r}: {e}") from e
        else:
            agents[agent_id] = ChatCompletionsAgent(endpoints[a.endpoint], a.model_name)
        # bindings only carry decoding when the config sets it, so role defaults still apply
        if a.template or a.temperature is not None:
            bindings[agent_id] = binding
    return agents, bindings


def build_templates(cfg: ConfigFile) -> TemplateRegistry:
    reg = TemplateRegistry.default()
    for p in cfg.templates.paths:
        path = cfg.resolve(p)
        if not path.is_dir():
            raise ConfigError(f"template path {path} is not a directory")
        reg.load_dir(path)
    return reg


def build_instructions(cfg: ConfigFile) -> dict[str, str]:
    out = default_instructions()
    if cfg.instructions:
        path = cfg.resolve(cfg.instructions)
        try:
            extra = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as e:
            raise ConfigError(f"cannot load instructions {path}: {e}") from e
        if not isinstance(extra, dict) or not all(isinstance(v, str) for v in extra.values()):
            raise ConfigError(f"{path}: instructions must map module ids to strings")
        out.update(extra)
    return out


def run_config(cfg: ConfigFile, **overrides) -> RunConfig:
    d = cfg.run.model_dump()
    d.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**d, assignments=dict(cfg.assignments))
    except ValueError as e:
        raise ConfigError(str(e)) from e


def build_engine(cfg: ConfigFile, *, mock: bool = False, store: ArtifactStore | None = None, **overrides) -> Engine:
    """Engine from config. ``mock`` swaps in the arithmetic mock suite for every role."""
    rc = run_config(cfg, **overrides)
    tools = Toolbox(search=StubSearch(dict(cfg.tools.search_corpus)))
    templates = build_templates(cfg)
    instructions = build_instructions(cfg)
    if mock:
        rc = RunConfig(**{**rc.to_dict(), "assignments": {}})
        return Engine.with_mocks(rc, templates=templates, instructions=instructions, tools=tools, store=store)
    if not cfg.assignments:
        raise ConfigError("no role assignments configured (use --mock for the built-in mock agents)")
    agents, bindings = build_agents(cfg)
    try:
        return Engine(rc, agents, bindings=bindings, templates=templates, instructions=instructions, tools=tools, store=store)
    except KeyError as e:
        raise ConfigError(str(e)) from e


def build_budget(g: GepaSection) -> Budget:
    return Budget(**g.budget.model_dump())


def build_weights(g: GepaSection) -> Weights:
    return Weights(**g.weights.model_dump())


def build_pool(cfg: ConfigFile) -> tuple[list[Proposer], Agent, Agent | None]:
    """Proposer pool, judge, and merger for the optimizer."""
    g = cfg.gepa
    if g is None:
        raise ConfigError("config has no [gepa] section")
    if not g.proposers or g.judge is None:
        raise ConfigError("gepa needs at least one proposer and a judge")
    agents, bindings = build_agents(cfg)
    pool = []
    for agent_id in g.proposers:
        a = cfg.agents[agent_id]
        binding = bindings.get(agent_id) or AgentBinding(
            agent_id, a.role, a.backend, a.model_name, a.endpoint, a.mock_id, a.template,
            Decoding(temperature=a.temperature or 0.0, max_output_tokens=a.max_output_tokens, seed=a.seed),
        )
        pool.append(Proposer(binding, agents[agent_id]))
    merger = agents[g.merger] if g.merger else None
    return pool, agents[g.judge], merger


def build_verifiers(g: GepaSection) -> list:
    return [VERIFIERS[name]() for name in g.verifiers]
