"""Prompt templates with named ``{placeholder}`` slots."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .base import Role

PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")

FREE_TEXT = "free_text"
ATOMIZER_VERDICT = "atomizer_verdict"
PLAN_GRAPH = "plan_graph"

_CONTRACTS = {Role.ATOMIZER: ATOMIZER_VERDICT, Role.PLANNER: PLAN_GRAPH}


class RenderError(KeyError):
    def __init__(self, missing: list[str], template_id: str):
        self.missing = missing
        super().__init__(f"template {template_id!r}: unbound placeholder(s) {', '.join(missing)}")


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    role: Role
    body: str
    required_placeholders: frozenset[str] = field(default=frozenset())
    output_contract: str = FREE_TEXT

    def __post_init__(self) -> None:
        object.__setattr__(self, "role", Role(self.role))
        found = frozenset(PLACEHOLDER.findall(self.body))
        # every slot in the body must be bound at render time
        object.__setattr__(self, "required_placeholders", frozenset(self.required_placeholders) | found)

    def render(self, bindings: dict[str, str]) -> str:
        return render_prompt(self, bindings)


def render_prompt(template: PromptTemplate, bindings: dict[str, str]) -> str:
    missing = sorted(p for p in template.required_placeholders if p not in bindings)
    if missing:
        raise RenderError(missing, template.template_id)
    # single pass: values that happen to contain braces are not re-expanded
    return PLACEHOLDER.sub(lambda m: str(bindings[m.group(1)]), template.body)


class TemplateRegistry:
    def __init__(self, templates: list[PromptTemplate] | None = None):
        self._t: dict[str, PromptTemplate] = {}
        for t in templates or []:
            self.add(t)

    def add(self, template: PromptTemplate) -> None:
        self._t[template.template_id] = template

    def get(self, template_id: str) -> PromptTemplate:
        try:
            return self._t[template_id]
        except KeyError:
            raise KeyError(f"unknown prompt template {template_id!r}") from None

    def __contains__(self, template_id: str) -> bool:
        return template_id in self._t

    def ids(self) -> list[str]:
        return sorted(self._t)

    def load_dir(self, path: str | Path) -> None:
        """Load every ``<role>.<name>.txt`` file under ``path``."""
        for p in sorted(Path(path).glob("*.txt")):
            self.add(template_from_file(p.stem, p.read_text(encoding="utf-8")))

    @classmethod
    def default(cls) -> "TemplateRegistry":
        reg = cls()
        pkg = resources.files("roma") / "data" / "prompts"
        for entry in sorted(pkg.iterdir(), key=lambda e: e.name):
            if entry.name.endswith(".txt"):
                reg.add(template_from_file(entry.name[:-4], entry.read_text(encoding="utf-8")))
        return reg


def template_from_file(template_id: str, body: str) -> PromptTemplate:
    role = Role(template_id.split(".", 1)[0])
    return PromptTemplate(template_id, role, body, output_contract=_CONTRACTS.get(role, FREE_TEXT))
