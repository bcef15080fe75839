"""Composite candidate scoring, contract checks, budget ledger, and top-n selection."""

from __future__ import annotations

import logging
import math
import re
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

from ..agents.base import Agent, Decoding, ParseError
from ..agents.parsing import extract_object, fenced_blocks, parse_atomizer_output, parse_planner_output
from ..agents.templates import PLACEHOLDER, RenderError, TemplateRegistry
from ..task_model import validate_graph
from .edits import delta_size

log = logging.getLogger(__name__)

DISQUALIFIED = -math.inf


@dataclass(frozen=True)
class Weights:
    alpha: float = 1.0  # judge
    beta: float = 1.0  # verifier
    gamma: float = 0.5  # per contract violation
    delta: float = 0.1  # per unit of normalized edit size

    def __post_init__(self) -> None:
        if min(self.alpha, self.beta, self.gamma, self.delta) < 0:
            raise ValueError("score weights must be non-negative")


def composite_score(judge: float, verifier: float, violations: int, normalized_delta: float, w: Weights) -> float:
    return w.alpha * judge + w.beta * verifier - w.gamma * violations - w.delta * normalized_delta


@dataclass(frozen=True)
class ScoreBreakdown:
    judge_score: float
    verifier_score: float
    contract_violations: int
    delta_size: int
    normalized_delta: float
    composite: float
    disqualified: bool = False
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "judge_score": self.judge_score,
            "verifier_score": self.verifier_score,
            "contract_violations": self.contract_violations,
            "delta_size": self.delta_size,
            "normalized_delta": self.normalized_delta,
            "composite": None if self.disqualified else self.composite,
            "disqualified": self.disqualified,
        }


# -- budget --------------------------------------------------------------------


class BudgetExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class Budget:
    max_metric_calls: int = 150
    max_judge_calls: int = 1_000
    max_verifier_runs: int = 10_000
    max_proposals_per_round: int = 3  # k
    max_selected: int = 2  # n
    wall_clock_limit: float | None = None  # seconds

    def __post_init__(self) -> None:
        for name in ("max_metric_calls", "max_judge_calls", "max_verifier_runs", "max_proposals_per_round", "max_selected"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


_CAPS = {"metric": "max_metric_calls", "judge": "max_judge_calls", "verifier": "max_verifier_runs"}


class Ledger:
    """Exact call counts against the budget caps. ``charge`` refuses to go over a cap."""

    def __init__(self, budget: Budget):
        self.budget = budget
        self.counts = {"metric": 0, "judge": 0, "verifier": 0}
        self._lock = threading.Lock()

    def remaining(self, kind: str) -> int:
        return getattr(self.budget, _CAPS[kind]) - self.counts[kind]

    def charge(self, kind: str, n: int = 1) -> None:
        with self._lock:
            if self.counts[kind] + n > getattr(self.budget, _CAPS[kind]):
                raise BudgetExhausted(f"{kind} budget exhausted ({self.counts[kind]} used)")
            self.counts[kind] += n

    @property
    def metric_calls(self) -> int:
        return self.counts["metric"]

    @property
    def judge_calls(self) -> int:
        return self.counts["judge"]

    @property
    def verifier_runs(self) -> int:
        return self.counts["verifier"]


# -- contracts -----------------------------------------------------------------

# Terms an instruction must keep so the module still asks for its typed output.
CONTRACT_TERMS: dict[str, tuple[str, ...]] = {
    "atomizer": ("atomic",),
    "planner": ("subtask", "dependency"),
    "aggregator": ("result",),
}

_FIXTURE_BINDINGS = {
    "context": "## Goal\nfixture goal\n\n## Task type\nthink\n",
    "max_children": "4",
    "tools": "",
    "goal": "fixture goal",
    "children": "- [root.0] goal: fixture => value",
}


def _template_for(module_id: str, templates: TemplateRegistry):
    role, _, task_type = module_id.partition(":")
    tid = f"executor.{task_type or 'think'}" if role == "executor" else f"{role}.default"
    return templates.get(tid) if tid in templates else None


def contract_violations(module_id: str, text: str, templates: TemplateRegistry | None = None) -> list[str]:
    """Dry-render ``text`` as the instruction of ``module_id`` and list every contract break.

    Checks: the module template still renders; the instruction adds no
    placeholder slots of its own; the module's interface terms are still
    present; and every JSON example embedded in the instruction parses with
    the module's own output parser (plans must also be valid graphs).
    """
    out: list[str] = []
    if not text.strip():
        return ["empty instruction"]
    templates = templates or TemplateRegistry.default()
    tpl = _template_for(module_id, templates)
    if tpl is not None:
        try:
            tpl.render({**_FIXTURE_BINDINGS, "instruction": text})
        except RenderError as e:
            out.append(f"template does not render: {e}")
    for name in PLACEHOLDER.findall(text):
        out.append(f"stray placeholder {{{name}}}")
    role = module_id.split(":", 1)[0]
    low = text.lower()
    for term in CONTRACT_TERMS.get(role, ()):
        if term not in low:
            out.append(f"missing interface term {term!r}")
    for lang, body in fenced_blocks(text):
        if lang not in ("", "json"):
            continue
        block = f"```json\n{body}```"
        try:
            if role == "atomizer":
                parse_atomizer_output(block)
            elif role == "planner":
                report = validate_graph(parse_planner_output(block, parent_id="fixture"))
                out += [f"example plan: {v.value} {d}" for v, d in report.violations]
            else:
                extract_object(block)
        except ParseError as e:
            out.append(f"example block does not parse: {e}")
    return out


# -- judge / verifiers ---------------------------------------------------------

# verifier(candidate_text, module_id) -> passed?
Verifier = Callable[[str, str], bool]


def render_traces(examples: Sequence[dict], limit: int = 20) -> str:
    lines = []
    for ex in list(examples)[:limit]:
        exp = ", ".join(ex.get("keywords", [])) if ex.get("keywords") else ex.get("expected", "")
        lines.append(f"- module: {ex.get('module', '?')} | input: {ex.get('input', '')} | expected: {exp}")
    return "\n".join(lines) or "(none)"


def judge_candidate(judge: Agent, module_id: str, text: str, heldout: Sequence[dict], templates: TemplateRegistry, seed: int = 0) -> float:
    prompt = templates.get("judge.default").render(
        {"module_id": module_id, "candidate": text, "traces": render_traces(heldout)}
    )
    comp = judge.complete(prompt, decoding=Decoding(temperature=0.0, seed=seed))
    obj = extract_object(comp.text)
    score = obj.get("score")
    if isinstance(score, bool) or not isinstance(score, (int, float)) or not 0.0 <= float(score) <= 1.0:
        raise ParseError(f"judge score must be a number in [0, 1], got {score!r}")
    return float(score)


def score_candidate(
    candidate,
    base_text: str,
    heldout: Sequence[dict],
    judge: Agent,
    verifiers: Sequence[Verifier],
    weights: Weights,
    ledger: Ledger,
    templates: TemplateRegistry | None = None,
) -> ScoreBreakdown:
    """Score one candidate; a judge failure disqualifies it instead of raising.

    Raises BudgetExhausted before making any call the ledger cannot cover.
    """
    templates = templates or TemplateRegistry.default()
    text = candidate.proposed_text
    needed_verifiers = len(verifiers)
    if ledger.remaining("judge") < 1 or ledger.remaining("verifier") < needed_verifiers:
        raise BudgetExhausted("not enough judge/verifier budget to score a candidate")
    violations = len(contract_violations(candidate.module_id, text, templates))
    dsize = delta_size(base_text, text)
    ndelta = dsize / max(1, len(base_text))
    passed = 0
    for v in verifiers:
        ledger.charge("verifier")
        try:
            passed += bool(v(text, candidate.module_id))
        except Exception as e:  # noqa: BLE001 - a crashing check counts as a failed check
            log.warning("verifier %s crashed: %s", getattr(v, "__name__", v), e)
    vscore = passed / len(verifiers) if verifiers else 0.0
    ledger.charge("judge")
    try:
        jscore = judge_candidate(judge, candidate.module_id, text, heldout, templates, seed=candidate.decoding_seed or 0)
    except Exception as e:  # noqa: BLE001 - judge failures disqualify, never abort the round
        log.warning("judge failed on candidate %s: %s", candidate.candidate_id, e)
        return ScoreBreakdown(0.0, vscore, violations, dsize, ndelta, DISQUALIFIED, True, f"judge failed: {e}")
    return ScoreBreakdown(jscore, vscore, violations, dsize, ndelta, composite_score(jscore, vscore, violations, ndelta, weights))


class SelectionError(ValueError):
    pass


def select_top_n(scored: Sequence[tuple[object, ScoreBreakdown]], n: int) -> list[tuple[object, ScoreBreakdown]]:
    """Best ``n`` by composite; ties go to fewer violations, then smaller delta, then lower id."""
    if n < 1:
        raise ValueError("n must be >= 1")
    eligible = [(c, s) for c, s in scored if not s.disqualified]
    if not eligible:
        raise SelectionError("no eligible candidates to select from")
    eligible.sort(key=lambda cs: (-cs[1].composite, cs[1].contract_violations, cs[1].delta_size, cs[0].candidate_id))
    return eligible[:n]
