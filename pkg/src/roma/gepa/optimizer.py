"""Multi-proposer prompt optimization: propose k, rerank, merge top n, accept on strict improvement."""

from __future__ import annotations

import itertools
import json
import logging
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from ..agents.base import Agent, AgentBinding, Decoding, ParseError
from ..agents.parsing import extract_object, extract_text_block
from ..agents.templates import TemplateRegistry
from .edits import (
    EXAMPLES_HEADER,
    AtomicEdit,
    EditConflict,
    EditKind,
    ModuleInstruction,
    apply_edits,
    decompose,
    delta_size,
    examples_section_start,
    overlaps,
)
from .scoring import (
    Budget,
    BudgetExhausted,
    Ledger,
    ScoreBreakdown,
    SelectionError,
    Verifier,
    Weights,
    contract_violations,
    render_traces,
    score_candidate,
    select_top_n,
)

log = logging.getLogger(__name__)

PATIENCE = 5


@dataclass(frozen=True)
class PromptCandidate:
    candidate_id: int
    module_id: str
    proposed_text: str
    edits: tuple[AtomicEdit, ...]
    proposer_id: str
    decoding_seed: int | None = None
    base_text: str = ""
    origin: str = "proposal"

    def to_dict(self) -> dict:
        return {
            "candidate_id": self.candidate_id,
            "module_id": self.module_id,
            "proposer_id": self.proposer_id,
            "decoding_seed": self.decoding_seed,
            "origin": self.origin,
            "edits": [e.to_dict() for e in self.edits],
        }


class ProposalError(RuntimeError):
    """Every proposer failed."""


@dataclass(frozen=True)
class Proposer:
    binding: AgentBinding
    agent: Agent


def _counter() -> Callable[[], int]:
    c = itertools.count(1)
    return lambda: next(c)


def propose_k(
    module: ModuleInstruction,
    traces: Sequence[dict],
    feedback: str,
    k: int,
    proposers: Sequence[Proposer],
    *,
    templates: TemplateRegistry | None = None,
    seed: int = 0,
    next_id: Callable[[], int] | None = None,
) -> list[PromptCandidate]:
    """Ask ``k`` proposers (cycling through the pool) for revised instructions, concurrently.

    Slot ``i`` uses ``proposers[i % len(proposers)]`` with seed ``seed + i``,
    so repeated models still sample differently.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not proposers:
        raise ValueError("at least one proposer is required")
    templates = templates or TemplateRegistry.default()
    next_id = next_id or _counter()
    prompt = templates.get("proposer.default").render(
        {
            "module_id": module.module_id,
            "instruction": module.instruction_text,
            "feedback": feedback or "(none)",
            "traces": render_traces(traces),
        }
    )

    def one(i: int):
        p = proposers[i % len(proposers)]
        dec = p.binding.decoding
        decoding = Decoding(dec.temperature, dec.max_output_tokens, seed + i)
        comp = p.agent.complete(prompt, decoding=decoding)
        text = extract_text_block(comp.text)
        if not text.strip():
            raise ParseError("proposer returned an empty instruction")
        return p.binding.agent_id, seed + i, text

    outcomes = []
    with ThreadPoolExecutor(max_workers=k) as pool:
        futures = [pool.submit(one, i) for i in range(k)]
        for i, f in enumerate(futures):
            try:
                outcomes.append(f.result())
            except Exception as e:  # noqa: BLE001 - a failed proposer just yields fewer candidates
                log.warning("proposer slot %d failed for %s: %s", i, module.module_id, e)
    if not outcomes:
        raise ProposalError(f"all {k} proposers failed for {module.module_id}")
    return [
        PromptCandidate(
            next_id(), module.module_id, text, tuple(decompose(module.instruction_text, text)), pid, s, module.instruction_text
        )
        for pid, s, text in outcomes
    ]


@dataclass(frozen=True)
class MergeInfo:
    applied: int
    demoted: int
    deduplicated: int
    fallback: str | None = None


def merge(
    selected: Sequence[PromptCandidate],
    base: ModuleInstruction,
    merger: Agent | None = None,
    *,
    templates: TemplateRegistry | None = None,
    next_id: Callable[[], int] | None = None,
) -> tuple[PromptCandidate, MergeInfo]:
    """Fuse the selected candidates (best first) into one update of ``base``.

    All atomic edits are pooled in rank order. Near-duplicates (same text
    after lowercasing and whitespace folding) collapse to the first. An edit
    overlapping an already-kept edit loses: its payload is appended to the
    examples section instead of being applied. The merger agent may only
    reword payloads one-for-one. If the merger fails or the result breaks the
    module contract, the top candidate is returned verbatim.
    """
    if not selected:
        raise ValueError("merge needs at least one candidate")
    templates = templates or TemplateRegistry.default()
    next_id = next_id or _counter()
    top = selected[0]

    def fallback(reason: str, counts=(0, 0, 0)) -> tuple[PromptCandidate, MergeInfo]:
        log.warning("merge for %s fell back to top-1: %s", base.module_id, reason)
        return top, MergeInfo(*counts, fallback=reason)

    kept: list[AtomicEdit] = []
    demoted: list[AtomicEdit] = []
    seen: set[tuple] = set()
    dups = 0
    for cand in selected:
        edits = cand.edits if cand.base_text in ("", base.instruction_text) else tuple(
            decompose(base.instruction_text, cand.proposed_text)
        )
        for e in edits:
            key = ("insert", e.normalized()) if e.is_insertion else (e.locus, e.normalized())
            if key in seen:
                dups += 1
                continue
            seen.add(key)
            if any(overlaps(e, k) for k in kept):
                demoted.append(e)
            else:
                kept.append(e)

    if merger is not None and kept:
        payloads = [e.payload for e in kept]
        prompt = templates.get("merger.default").render(
            {"module_id": base.module_id, "edits": "\n".join(f"{i + 1}. {p}" for i, p in enumerate(payloads))}
        )
        try:
            obj = extract_object(merger.complete(prompt).text)
            new = obj.get("edits")
            if not isinstance(new, list) or len(new) != len(payloads) or not all(isinstance(p, str) for p in new):
                raise ParseError("merger must return the same number of edits as strings")
        except Exception as e:  # noqa: BLE001 - merger failures fall back to top-1
            return fallback(f"merger failed: {e}", (len(kept), len(demoted), dups))
        kept = [
            AtomicEdit(e.kind, e.start, e.end, p if e.kind is not EditKind.REMOVE_SPAN else "")
            for e, p in zip(kept, new)
        ]

    lines = base.instruction_text.split("\n")
    tail = len(lines) - 1 if lines and lines[-1] == "" else len(lines)
    extra: list[AtomicEdit] = []
    alternatives = [e for e in demoted if e.payload.strip()]
    if alternatives:
        if examples_section_start(lines) is None and not any(
            e.is_insertion and e.payload.strip() == EXAMPLES_HEADER for e in kept
        ):
            extra.append(AtomicEdit(EditKind.REPLACE_EXAMPLE, tail, tail, EXAMPLES_HEADER))
        for e in alternatives:
            extra.append(AtomicEdit(EditKind.REPLACE_EXAMPLE, tail, tail, "- alternative: " + " / ".join(e.payload.split("\n"))))
    # kept insertions at the tail go before the examples block
    final = kept + extra
    try:
        text = apply_edits(base.instruction_text, final)
    except EditConflict as e:
        return fallback(f"edits do not compose: {e}", (len(kept), len(demoted), dups))
    if not text.strip():
        return fallback("merged instruction is empty", (len(kept), len(demoted), dups))
    broken = contract_violations(base.module_id, text, templates)
    if broken:
        return fallback(f"merged text breaks the contract: {broken[0]}", (len(kept), len(demoted), dups))
    merged = PromptCandidate(
        next_id(), base.module_id, text, tuple(final), "merger", None, base.instruction_text, origin="merge"
    )
    return merged, MergeInfo(len(kept), len(demoted), dups)


# -- outer loop ----------------------------------------------------------------

# metric(instructions by module id, examples) -> utility, or (utility, feedback text)
Metric = Callable[[Mapping[str, str], Sequence[dict]], object]


@dataclass
class RoundRecord:
    round: int
    module_id: str
    k: int
    candidates: list[dict] = field(default_factory=list)
    selected: list[int] = field(default_factory=list)
    merged: dict | None = None
    utility: float | None = None
    incumbent_utility: float = 0.0
    accepted: bool = False
    voided: str | None = None
    metric_calls: int = 0
    judge_calls: int = 0
    verifier_runs: int = 0

    def to_dict(self) -> dict:
        return {"type": "round", **self.__dict__}


@dataclass
class OptimizationReport:
    initial_utility: float | None = None
    final_utility: float | None = None
    rounds: list[RoundRecord] = field(default_factory=list)
    metric_calls: int = 0
    judge_calls: int = 0
    verifier_runs: int = 0
    stop_reason: str = ""
    frontier: list[dict] = field(default_factory=list)
    # (cumulative metric calls, incumbent utility) after every metric call
    trajectory: list[tuple[int, float]] = field(default_factory=list)

    @property
    def efficiency(self) -> float:
        """Utility gain in percentage points per metric call."""
        if not self.metric_calls or self.initial_utility is None or self.final_utility is None:
            return 0.0
        return 100.0 * (self.final_utility - self.initial_utility) / self.metric_calls

    def calls_to_reach(self, target: float) -> int | None:
        for calls, util in self.trajectory:
            if util >= target:
                return calls
        return None

    def to_jsonl(self) -> str:
        lines = [json.dumps(r.to_dict(), sort_keys=True) for r in self.rounds]
        summary = {
            "type": "summary",
            "initial_utility": self.initial_utility,
            "final_utility": self.final_utility,
            "metric_calls": self.metric_calls,
            "judge_calls": self.judge_calls,
            "verifier_runs": self.verifier_runs,
            "efficiency_pct_per_call": self.efficiency,
            "stop_reason": self.stop_reason,
            "frontier": self.frontier,
            "trajectory": [list(t) for t in self.trajectory],
        }
        lines.append(json.dumps(summary, sort_keys=True))
        return "\n".join(lines) + "\n"


def split_devset(devset: Sequence[dict]) -> tuple[list[dict], list[dict]]:
    """Fixed split: every fifth example is held out for the judge, the rest measure utility."""
    utility = [ex for i, ex in enumerate(devset) if i % 5 != 4]
    heldout = [ex for i, ex in enumerate(devset) if i % 5 == 4]
    return utility, heldout


def _pareto(points: list[dict]) -> list[dict]:
    front = []
    for p in points:
        dominated = any(
            q["utility"] >= p["utility"] and q["delta_size"] <= p["delta_size"]
            and (q["utility"] > p["utility"] or q["delta_size"] < p["delta_size"])
            for q in points
        )
        if not dominated and p not in front:
            front.append(p)
    return sorted(front, key=lambda p: (p["delta_size"], p["utility"]))


def optimize(
    instructions: Mapping[str, ModuleInstruction] | Sequence[ModuleInstruction],
    devset: Sequence[dict],
    budget: Budget,
    metric: Metric,
    proposers: Sequence[Proposer],
    judge: Agent,
    *,
    merger: Agent | None = None,
    verifiers: Sequence[Verifier] = (),
    weights: Weights = Weights(),
    merge_enabled: bool = True,
    patience: int = PATIENCE,
    target_utility: float | None = None,
    seed: int = 0,
    minibatch_size: int = 3,
    templates: TemplateRegistry | None = None,
) -> tuple[dict[str, ModuleInstruction], OptimizationReport]:
    """Greedy multi-proposer search over module instructions under a hard budget.

    Each round targets one module (round-robin, skipping modules whose last
    two rounds were rejected unless that would skip all of them), proposes
    up to k edits, scores them on the held-out split, merges the top n and
    spends one metric call evaluating the result on the utility split. The
    candidate replaces the incumbent only if utility strictly improves. The
    loop ends on any exhausted cap, the wall-clock limit, ``patience``
    rounds in a row without acceptance, or reaching ``target_utility``.
    Proposers see a seeded minibatch of ``minibatch_size`` utility-split
    traces for the target module.
    """
    if isinstance(instructions, Mapping):
        state = dict(instructions)
    else:
        state = {m.module_id: m for m in instructions}
    original = {m: ins.instruction_text for m, ins in state.items()}
    templates = templates or TemplateRegistry.default()
    ledger = Ledger(budget)
    report = OptimizationReport()
    next_id = _counter()
    util_split, heldout = split_devset(devset)
    modules = sorted(state)
    started = time.monotonic()

    def evaluate(current: Mapping[str, ModuleInstruction]) -> tuple[float, str]:
        ledger.charge("metric")
        out = metric({m: ins.instruction_text for m, ins in current.items()}, util_split)
        if isinstance(out, tuple):
            return float(out[0]), str(out[1])
        return float(out), ""

    def sync_counts() -> None:
        report.metric_calls = ledger.metric_calls
        report.judge_calls = ledger.judge_calls
        report.verifier_runs = ledger.verifier_runs

    def total_delta(current) -> int:
        return sum(delta_size(original[m], current[m].instruction_text) for m in current)

    if not modules or budget.max_metric_calls < 1 or budget.max_proposals_per_round < 1 or budget.max_selected < 1:
        report.stop_reason = "empty budget"
        return state, report
    try:
        incumbent, feedback = evaluate(state)
    except BudgetExhausted:
        report.stop_reason = "metric budget"
        return state, report
    except Exception as e:  # noqa: BLE001
        sync_counts()
        report.stop_reason = f"baseline evaluation failed: {e}"
        return state, report
    report.initial_utility = report.final_utility = incumbent
    report.trajectory.append((ledger.metric_calls, incumbent))
    points = [{"utility": incumbent, "delta_size": 0, "round": 0}]
    history: dict[str, list[bool]] = {m: [] for m in modules}
    rr = 0
    stale = 0
    rnd = 0
    n_verifiers = len(verifiers)
    sampler = random.Random(seed)

    while True:
        if target_utility is not None and incumbent >= target_utility:
            report.stop_reason = "target reached"
            break
        if budget.wall_clock_limit is not None and time.monotonic() - started >= budget.wall_clock_limit:
            report.stop_reason = "wall clock"
            break
        if ledger.remaining("metric") < 1:
            report.stop_reason = "metric budget"
            break
        k_eff = min(budget.max_proposals_per_round, ledger.remaining("judge"))
        if n_verifiers:
            k_eff = min(k_eff, ledger.remaining("verifier") // n_verifiers)
        if k_eff < 1:
            report.stop_reason = "judge/verifier budget"
            break
        if stale >= patience:
            report.stop_reason = "converged"
            break

        active = [m for m in modules if history[m][-2:] != [False, False]] or modules
        module_id = None
        for _ in range(len(modules)):
            cand = modules[rr % len(modules)]
            rr += 1
            if cand in active:
                module_id = cand
                break
        rnd += 1
        rec = RoundRecord(rnd, module_id, k_eff, incumbent_utility=incumbent)
        report.rounds.append(rec)
        base = state[module_id]
        accepted = False
        mod_traces = [ex for ex in util_split if ex.get("module", module_id) == module_id]
        mod_heldout = [ex for ex in heldout if ex.get("module", module_id) == module_id]
        if minibatch_size and len(mod_traces) > minibatch_size:
            mod_traces = sampler.sample(mod_traces, minibatch_size)
        try:
            cands = propose_k(
                base, mod_traces, feedback, k_eff, proposers, templates=templates, seed=seed * 100_003 + rnd * 101, next_id=next_id
            )
            scored: list[tuple[PromptCandidate, ScoreBreakdown]] = []
            for c in cands:
                s = score_candidate(c, base.instruction_text, mod_heldout, judge, verifiers, weights, ledger, templates)
                scored.append((c, s))
                rec.candidates.append({**c.to_dict(), "score": s.to_dict()})
            top = select_top_n(scored, budget.max_selected)
            rec.selected = [c.candidate_id for c, _ in top]
            chosen = [c for c, _ in top]
            if merge_enabled and len(chosen) > 1:
                merged, info = merge(chosen, base, merger, templates=templates, next_id=next_id)
                rec.merged = {**merged.to_dict(), **info.__dict__}
            else:
                merged = chosen[0]
            if merged.proposed_text == base.instruction_text:
                rec.voided = "no change proposed"
            elif contract_violations(module_id, merged.proposed_text, templates):
                rec.voided = "candidate breaks module contract"
            else:
                trial = {**state, module_id: base.updated(merged.proposed_text)}
                try:
                    util, fb = evaluate(trial)
                except BudgetExhausted:
                    raise
                except Exception as e:  # noqa: BLE001 - charged, but the round is void
                    rec.voided = f"evaluation failed: {e}"
                else:
                    rec.utility = util
                    points.append({"utility": util, "delta_size": total_delta(trial), "round": rnd})
                    if util > incumbent:
                        state, incumbent, feedback, accepted = trial, util, fb, True
                    report.trajectory.append((ledger.metric_calls, incumbent))
        except ProposalError as e:
            rec.voided = str(e)
        except SelectionError as e:
            rec.voided = str(e)
        except BudgetExhausted as e:
            rec.voided = str(e)
        rec.accepted = accepted
        rec.incumbent_utility = incumbent
        rec.metric_calls, rec.judge_calls, rec.verifier_runs = ledger.metric_calls, ledger.judge_calls, ledger.verifier_runs
        history[module_id].append(accepted)
        stale = 0 if accepted else stale + 1

    sync_counts()
    report.final_utility = incumbent
    report.frontier = _pareto(points)
    return state, report
