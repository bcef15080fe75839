"""Line-level atomic edits over instruction text.

An edit replaces base lines ``[start, end)`` with ``payload`` lines. When
``start == end`` it is an insertion before base line ``start``; with an empty
payload and ``start < end`` it is a removal.
"""

from __future__ import annotations

import difflib
import enum
import re
from dataclasses import dataclass
from typing import Iterable

EXAMPLES_HEADER = "Examples:"


class EditKind(str, enum.Enum):
    ADD_CONSTRAINT = "add_constraint"
    REPLACE_EXAMPLE = "replace_example"
    REPHRASE_INSTRUCTION = "rephrase_instruction"
    REMOVE_SPAN = "remove_span"


class EditConflict(ValueError):
    pass


@dataclass(frozen=True)
class AtomicEdit:
    kind: EditKind
    start: int
    end: int
    payload: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", EditKind(self.kind))
        if not 0 <= self.start <= self.end:
            raise ValueError(f"bad edit locus [{self.start}, {self.end})")

    @property
    def locus(self) -> tuple[int, int]:
        return (self.start, self.end)

    @property
    def is_insertion(self) -> bool:
        return self.start == self.end

    def normalized(self) -> str:
        return normalize(self.payload)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "start": self.start, "end": self.end, "payload": self.payload}

    @classmethod
    def from_dict(cls, d: dict) -> "AtomicEdit":
        return cls(d["kind"], d["start"], d["end"], d.get("payload", ""))


@dataclass(frozen=True)
class ModuleInstruction:
    module_id: str
    instruction_text: str
    version: int = 0

    def __post_init__(self) -> None:
        if not self.instruction_text.strip():
            raise ValueError(f"{self.module_id}: instruction text must be non-empty")

    def updated(self, text: str) -> "ModuleInstruction":
        return ModuleInstruction(self.module_id, text, self.version + 1)


def normalize(text: str) -> str:
    return " ".join(text.lower().split())


def overlaps(a: AtomicEdit, b: AtomicEdit) -> bool:
    """True when ``a`` and ``b`` touch the same base lines. Insertions never clash with each other."""
    if a.is_insertion and b.is_insertion:
        return False
    if a.is_insertion:
        return b.start < a.start < b.end
    if b.is_insertion:
        return a.start < b.start < a.end
    return a.start < b.end and b.start < a.end


def _lines(text: str) -> list[str]:
    return text.split("\n")


def _looks_like_example(lines: Iterable[str], section_start: int | None, start: int) -> bool:
    if section_start is not None and start > section_start:
        return True
    return any(re.match(r"\s*(example\b|- alternative:|input:|output:)", ln, re.I) for ln in lines)


def examples_section_start(lines: list[str]) -> int | None:
    for i, ln in enumerate(lines):
        if ln.strip() == EXAMPLES_HEADER:
            return i
    return None


def decompose(base: str, proposed: str) -> list[AtomicEdit]:
    """Atomic edits that turn ``base`` into ``proposed``; one per inserted line."""
    a, b = _lines(base), _lines(proposed)
    ex = examples_section_start(a)
    edits: list[AtomicEdit] = []
    sm = difflib.SequenceMatcher(None, a, b, autojunk=False)
    for tag, i1, i2, j1, j2 in sm.get_opcodes():
        if tag == "equal":
            continue
        if tag == "insert":
            for line in b[j1:j2]:
                kind = EditKind.REPLACE_EXAMPLE if ex is not None and i1 > ex else EditKind.ADD_CONSTRAINT
                edits.append(AtomicEdit(kind, i1, i1, line))
        elif tag == "delete":
            edits.append(AtomicEdit(EditKind.REMOVE_SPAN, i1, i2, ""))
        else:
            kind = EditKind.REPLACE_EXAMPLE if _looks_like_example(a[i1:i2], ex, i1) else EditKind.REPHRASE_INSTRUCTION
            edits.append(AtomicEdit(kind, i1, i2, "\n".join(b[j1:j2])))
    return edits


def check_disjoint(edits: list[AtomicEdit]) -> None:
    for i, e in enumerate(edits):
        for f in edits[i + 1:]:
            if overlaps(e, f):
                raise EditConflict(f"edits overlap at {e.locus} and {f.locus}")


def apply_edits(base: str, edits: list[AtomicEdit]) -> str:
    """Apply non-overlapping edits. Insertions at one point keep their list order."""
    check_disjoint(edits)
    lines = _lines(base)
    for e in edits:
        if e.end > len(lines):
            raise EditConflict(f"edit locus {e.locus} is past the end of a {len(lines)}-line text")
    # insertions before replacements that start at the same line
    ordered = sorted(enumerate(edits), key=lambda p: (p[1].start, 0 if p[1].is_insertion else 1, p[0]))
    out: list[str] = []
    pos = 0
    for _, e in ordered:
        out.extend(lines[pos:e.start])
        pos = max(pos, e.start)
        if e.kind is not EditKind.REMOVE_SPAN or e.payload:
            out.extend(_lines(e.payload))
        pos = max(pos, e.end)
    out.extend(lines[pos:])
    return "\n".join(out)


def delta_size(base: str, proposed: str) -> int:
    """Characters inserted plus characters deleted."""
    sm = difflib.SequenceMatcher(None, base, proposed, autojunk=False)
    return sum((i2 - i1) + (j2 - j1) for tag, i1, i2, j1, j2 in sm.get_opcodes() if tag != "equal")


def body_and_examples(text: str) -> tuple[str, str]:
    """Split instruction text at the examples header."""
    lines = _lines(text)
    ex = examples_section_start(lines)
    if ex is None:
        return text, ""
    return "\n".join(lines[:ex]), "\n".join(lines[ex:])
