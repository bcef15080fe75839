"""Tool interface used by search and code executors, with stub backends.

Real retrieval or sandboxed execution plugs in by implementing the same
two-method surface; none ships here.
"""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class ToolResult:
    tool: str
    request: str
    documents: tuple[str, ...] = ()
    transcript: str = ""


class SearchTool:
    name = "search"

    def search(self, query: str) -> ToolResult:
        raise NotImplementedError


class Sandbox:
    name = "sandbox"

    def run(self, program: str) -> ToolResult:
        raise NotImplementedError


@dataclass
class StubSearch(SearchTool):
    """Returns canned documents: those keyed by the query, else ``default``."""

    corpus: dict[str, list[str]] = field(default_factory=dict)
    default: list[str] = field(default_factory=lambda: ["No documents found."])
    calls: int = 0

    def search(self, query: str) -> ToolResult:
        self.calls += 1
        docs = self.corpus.get(query, self.default)
        return ToolResult(self.name, query, tuple(docs))


@dataclass
class EchoSandbox(Sandbox):
    """Pretends to run the program; its transcript echoes the program back."""

    calls: int = 0

    def run(self, program: str) -> ToolResult:
        self.calls += 1
        transcript = f"$ python program.py\n{program}\n[exit 0]"
        return ToolResult(self.name, program, transcript=transcript)


@dataclass
class Toolbox:
    search: SearchTool = field(default_factory=StubSearch)
    sandbox: Sandbox = field(default_factory=EchoSandbox)
