"""Role interfaces, prompt templates, transports, output parsers and mocks."""

from .base import (
    Agent,
    AgentBinding,
    AgentError,
    Completion,
    Decoding,
    ParseError,
    ProtocolError,
    Role,
    SyncAgent,
    TokenCost,
    ZERO_COST,
)
from .parsing import AtomicityDecision, parse_atomizer_output, parse_planner_output
from .templates import PromptTemplate, RenderError, TemplateRegistry, render_prompt
from .mocks import mock_suite

__all__ = [
    "Agent",
    "AgentBinding",
    "AgentError",
    "AtomicityDecision",
    "Completion",
    "Decoding",
    "ParseError",
    "PromptTemplate",
    "ProtocolError",
    "RenderError",
    "Role",
    "SyncAgent",
    "TemplateRegistry",
    "TokenCost",
    "ZERO_COST",
    "mock_suite",
    "parse_atomizer_output",
    "parse_planner_output",
    "render_prompt",
]
