from __future__ import annotations

import asyncio
import enum
from dataclasses import dataclass, field


class AgentError(RuntimeError):
    """Retriable failure: transport error, non-success status, scripted failure."""


class ProtocolError(RuntimeError):
    """Non-retriable failure: the backend answered with something unusable."""


class ParseError(ValueError):
    """Agent output did not match the expected structured block."""


@dataclass(frozen=True)
class TokenCost:
    input_tokens: int = 0
    output_tokens: int = 0
    dollars: float = 0.0
    latency_seconds: float = 0.0

    def __post_init__(self) -> None:
        if min(self.input_tokens, self.output_tokens, self.dollars, self.latency_seconds) < 0:
            raise ValueError("token costs are non-negative")

    def __add__(self, other: "TokenCost") -> "TokenCost":
        return TokenCost(
            self.input_tokens + other.input_tokens,
            self.output_tokens + other.output_tokens,
            self.dollars + other.dollars,
            self.latency_seconds + other.latency_seconds,
        )

    @classmethod
    def total(cls, costs) -> "TokenCost":
        out = cls()
        for c in costs:
            out = out + c
        return out

    def to_dict(self) -> dict:
        return {
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "dollars": self.dollars,
            "latency_seconds": self.latency_seconds,
        }

    @classmethod
    def from_dict(cls, d: dict | None) -> "TokenCost":
        if not d:
            return cls()
        return cls(int(d["input_tokens"]), int(d["output_tokens"]), float(d["dollars"]), float(d["latency_seconds"]))


ZERO_COST = TokenCost()


class Role(str, enum.Enum):
    ATOMIZER = "atomizer"
    PLANNER = "planner"
    EXECUTOR = "executor"
    AGGREGATOR = "aggregator"
    JUDGE = "judge"
    PROPOSER = "proposer"
    MERGER = "merger"
    COMPRESSOR = "compressor"


@dataclass(frozen=True)
class Decoding:
    temperature: float = 0.0
    max_output_tokens: int = 1024
    seed: int = 0


@dataclass(frozen=True)
class AgentBinding:
    agent_id: str
    role: Role
    backend: str = "mock"  # "mock" | "llm_endpoint"
    model_name: str | None = None
    endpoint: str | None = None
    mock_id: str | None = None
    prompt_template_id: str | None = None
    decoding: Decoding = field(default_factory=Decoding)

    def __post_init__(self) -> None:
        object.__setattr__(self, "role", Role(self.role))
        if self.backend == "llm_endpoint":
            if not self.model_name or not self.endpoint:
                raise ValueError(f"agent {self.agent_id}: llm_endpoint needs model_name and endpoint")
        elif self.backend == "mock":
            if not self.mock_id:
                raise ValueError(f"agent {self.agent_id}: mock backend needs a mock id")
        else:
            raise ValueError(f"agent {self.agent_id}: unknown backend {self.backend!r}")


@dataclass(frozen=True)
class Completion:
    text: str
    cost: TokenCost = ZERO_COST


class Agent:
    """A text-in/text-out model. Subclasses override ``complete`` or ``acomplete``.

    ``acomplete`` defaults to running ``complete`` in a worker thread, which is
    what blocking backends (HTTP) want. Pure in-process mocks override
    ``acomplete`` to avoid the thread hop.
    """

    name = "agent"

    def complete(self, prompt: str, *, system: str | None = None, decoding: Decoding = Decoding()) -> Completion:
        raise NotImplementedError

    async def acomplete(
        self, prompt: str, *, system: str | None = None, decoding: Decoding = Decoding()
    ) -> Completion:
        return await asyncio.to_thread(self.complete, prompt, system=system, decoding=decoding)


class SyncAgent(Agent):
    """Agent whose ``complete`` is cheap and non-blocking; called inline from the event loop."""

    async def acomplete(self, prompt, *, system=None, decoding=Decoding()):
        return self.complete(prompt, system=system, decoding=decoding)
