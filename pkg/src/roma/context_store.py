"""Content-addressed artifact store and bounded local-context assembly."""

from __future__ import annotations

import enum
import hashlib
import logging
import os
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .task_model import NodeStatus, TaskNode, TaskSpec

log = logging.getLogger(__name__)

TRUNCATION_MARKER = " [...truncated]"
DEFAULT_SUMMARY_BUDGET = 2_000
DEFAULT_CONTEXT_BUDGET = 12_000


class ArtifactKind(str, enum.Enum):
    PLAN = "plan"
    RESULT = "result"
    NOTE = "note"
    DOCUMENT = "document"
    TOOL_TRANSCRIPT = "tool_transcript"
    DATASET_REF = "dataset_ref"


class StorageError(RuntimeError):
    """Artifacts are load-bearing: any storage failure ends the run."""


@dataclass(frozen=True)
class Artifact:
    id: str
    kind: ArtifactKind
    body: bytes
    created_by: str
    media: str = "text"

    @property
    def byte_size(self) -> int:
        return len(self.body)

    def text(self) -> str:
        return self.body.decode("utf-8")


def artifact_id(body: bytes) -> str:
    return hashlib.sha256(body).hexdigest()


class ArtifactStore:
    """Write-once store keyed by the SHA-256 of the body.

    With ``root`` set, every artifact is also written to ``root/<id>`` and
    listed in ``root/index.tsv`` (id, kind, byte_size, creator).
    """

    def __init__(self, root: str | Path | None = None):
        self._items: dict[str, Artifact] = {}
        self._lock = threading.Lock()
        self.root = Path(root) if root is not None else None
        if self.root is not None:
            try:
                self.root.mkdir(parents=True, exist_ok=True)
            except OSError as e:
                raise StorageError(f"cannot create artifact directory {self.root}: {e}") from e
            self._load_index()

    def put(self, body: str | bytes, kind: ArtifactKind | str, creator: str, media: str = "text") -> str:
        data = body.encode("utf-8") if isinstance(body, str) else bytes(body)
        if not data:
            raise ValueError("artifact body must be non-empty")
        aid = artifact_id(data)
        with self._lock:
            if aid in self._items:
                return aid
            art = Artifact(aid, ArtifactKind(kind), data, creator, media)
            if self.root is not None:
                self._persist(art)
            self._items[aid] = art
        return aid

    def get(self, aid: str) -> Artifact:
        try:
            return self._items[aid]
        except KeyError:
            raise KeyError(f"unknown artifact {aid}") from None

    def __contains__(self, aid: str) -> bool:
        return aid in self._items

    def __len__(self) -> int:
        return len(self._items)

    def ids(self) -> list[str]:
        return list(self._items)

    def _persist(self, art: Artifact) -> None:
        try:
            _atomic_write(self.root / art.id, art.body)
            with open(self.root / "index.tsv", "a", encoding="utf-8") as f:
                f.write(f"{art.id}\t{art.kind.value}\t{art.byte_size}\t{art.created_by}\n")
        except OSError as e:
            raise StorageError(f"failed to persist artifact {art.id}: {e}") from e

    def _load_index(self) -> None:
        index = self.root / "index.tsv"
        if not index.exists():
            return
        for line in index.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            aid, kind, size, creator = line.split("\t")
            body = (self.root / aid).read_bytes()
            if len(body) != int(size) or artifact_id(body) != aid:
                raise StorageError(f"artifact {aid} on disk does not match its index entry")
            self._items[aid] = Artifact(aid, ArtifactKind(kind), body, creator)


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def truncate(text: str, budget: int) -> str:
    """Cut ``text`` to ``budget`` characters, marker included."""
    if len(text) <= budget:
        return text
    if budget <= len(TRUNCATION_MARKER):
        return TRUNCATION_MARKER.strip()[:budget]
    return text[: budget - len(TRUNCATION_MARKER)] + TRUNCATION_MARKER


@dataclass(frozen=True)
class LocalContext:
    parent_goal: str | None
    own_spec: TaskSpec
    dependency_summaries: tuple[tuple[str, str], ...] = ()
    artifact_refs: tuple[str, ...] = ()
    parent_id: str | None = None
    failures: tuple[tuple[str, str], ...] = ()
    rendered: str = field(default="", compare=False)

    @property
    def total_chars(self) -> int:
        return len(self.rendered)

    def render(self) -> str:
        return self.rendered

    def to_dict(self) -> dict:
        return {
            "parent_id": self.parent_id,
            "dependency_ids": [nid for nid, _ in self.dependency_summaries],
            "failed_dependency_ids": [nid for nid, _ in self.failures],
            "artifact_refs": list(self.artifact_refs),
            "total_chars": self.total_chars,
        }


def _render(parent_goal, spec: TaskSpec, deps, failures, refs) -> str:
    parts = []
    if parent_goal:
        parts.append(f"## Parent goal\n{parent_goal}")
    parts.append(f"## Goal\n{spec.goal}")
    parts.append(f"## Task type\n{spec.task_type.value}")
    if spec.constraints:
        parts.append(f"## Constraints\n{spec.constraints}")
    if deps or failures:
        lines = [f"- [{nid}] {summary}" for nid, summary in deps]
        lines += [f"- [{nid}] FAILED: {diag}" for nid, diag in failures]
        parts.append("## Dependency results\n" + "\n".join(lines))
    if refs:
        parts.append("## Artifacts\n" + "\n".join(f"- {r}" for r in refs))
    return "\n\n".join(parts) + "\n"


def assemble_context(
    node: TaskNode,
    results: Mapping[str, "object"],
    budget: int = DEFAULT_CONTEXT_BUDGET,
    *,
    parent_goal: str | None = None,
    dependencies: list[str] = (),
    allow_failed: bool = False,
) -> LocalContext:
    """Build the local view of one node: parent goal, own spec, declared dependencies only.

    ``results`` maps node ids to TaskResult-like objects (``status``,
    ``summary``, ``output``, ``diagnostic``). Artifact bodies are never
    inlined; only their ids. When the text exceeds ``budget`` the dependency
    summaries are cut from the last one backwards, each cut marked.
    """
    deps: list[tuple[str, str]] = []
    failures: list[tuple[str, str]] = []
    refs: list[str] = []
    for dep in dependencies:
        if dep not in results:
            raise KeyError(f"{node.id}: missing result for dependency {dep}")
        r = results[dep]
        if r.status is NodeStatus.DONE:
            deps.append((dep, r.summary))
            if r.output:
                refs.append(r.output)
        elif allow_failed:
            failures.append((dep, r.diagnostic or "failed"))
        else:
            raise KeyError(f"{node.id}: dependency {dep} is {r.status.value}, not Done")

    text = _render(parent_goal, node.spec, deps, failures, refs)
    i = len(deps) - 1
    while len(text) > budget and i >= 0:
        over = len(text) - budget
        nid, summary = deps[i]
        keep = max(0, len(summary) - over - len(TRUNCATION_MARKER))
        deps[i] = (nid, summary[:keep] + TRUNCATION_MARKER)
        text = _render(parent_goal, node.spec, deps, failures, refs)
        i -= 1
    if len(text) > budget:
        log.warning("%s: context still over budget after trimming dependencies; hard truncating", node.id)
        text = truncate(text, budget)
    return LocalContext(parent_goal, node.spec, tuple(deps), tuple(refs), node.parent_id, tuple(failures), text)


def compress_summary(full_output: str, budget: int, compressor=None) -> str:
    """Return ``full_output`` if it fits, else the compressor's answer, else a hard cut.

    ``compressor`` is a callable ``(text, budget) -> str``; any exception it
    raises, or an answer still over budget, degrades to truncation.
    """
    if budget <= 0:
        raise ValueError("summary budget must be positive")
    if len(full_output) <= budget:
        return full_output
    if compressor is not None:
        try:
            out = compressor(full_output, budget)
        except Exception as e:  # noqa: BLE001 - any compressor failure degrades the same way
            log.warning("compressor failed (%s); truncating at %d chars", e, budget)
        else:
            if len(out) <= budget:
                return out
            log.warning("compressor returned %d chars for a %d budget; truncating", len(out), budget)
            return truncate(out, budget)
    return truncate(full_output, budget)
