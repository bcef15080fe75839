from __future__ import annotations

import math
import random
import threading

import pytest
from hypothesis import given, settings, strategies as st

from roma.agents.base import AgentBinding, AgentError, Decoding
from roma.agents.mocks import FailingAgent, FixedAgent, MockAgent
from roma.engine import default_instructions
from roma.gepa import (
    AtomicEdit,
    Budget,
    EditKind,
    Ledger,
    ModuleInstruction,
    PromptCandidate,
    ProposalError,
    Proposer,
    ScoreBreakdown,
    SelectionError,
    Weights,
    apply_edits,
    composite_score,
    contract_violations,
    decompose,
    delta_size,
    merge,
    optimize,
    propose_k,
    score_candidate,
    select_top_n,
    split_devset,
)
from roma.gepa.edits import body_and_examples, overlaps
from roma.gepa.oracle import (
    AppendProposer,
    IdentityMerger,
    KeywordJudge,
    KeywordProposer,
    keyword_coverage,
    make_keyword_devset,
    no_placeholder_verifier,
)
from roma.gepa.scoring import BudgetExhausted

PLANNER = default_instructions()["planner"]


def proposer(agent, name="p", temperature=0.0) -> Proposer:
    return Proposer(AgentBinding(name, "proposer", mock_id=name, decoding=Decoding(temperature=temperature)), agent)


def cand(cid, text, base=PLANNER, module="planner") -> PromptCandidate:
    return PromptCandidate(cid, module, text, tuple(decompose(base, text)), "p", 0, base)


# -- scoring -----------------------------------------------------------------------


def test_composite_worked_example():
    # 1.0*0.8 + 1.0*0.5 - 0.5*2 - 0.1*1.0 = 0.2
    assert composite_score(0.8, 0.5, 2, 1.0, Weights()) == pytest.approx(0.2)
    assert composite_score(0.6, 0.3, 1, 0.0, Weights(gamma=0.5)) == pytest.approx(0.4)


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        Weights(gamma=-1)


def test_select_top_n_tie_breaks():
    def sb(comp, viol, delta, dq=False):
        return ScoreBreakdown(0, 0, viol, delta, 0, comp, dq)

    c = [cand(i, PLANNER + f"\nx{i}") for i in range(5)]
    scored = [(c[0], sb(1.0, 1, 5)), (c[1], sb(1.0, 0, 9)), (c[2], sb(1.0, 0, 3)), (c[3], sb(1.0, 0, 3)), (c[4], sb(9.9, 0, 0, dq=True))]
    assert [x.candidate_id for x, _ in select_top_n(scored, 3)] == [2, 3, 1]
    with pytest.raises(SelectionError):
        select_top_n([(c[4], sb(1, 0, 0, dq=True))], 1)


def test_contract_checks():
    assert contract_violations("planner", PLANNER) == []
    assert any("dependency" in v for v in contract_violations("planner", "Split the goal into subtasks."))
    assert any("placeholder" in v for v in contract_violations("planner", PLANNER + "\nUse {secret}."))
    cyclic = PLANNER + '\n```json\n{"subtasks": [{"goal": "a", "depends_on": [0]}]}\n```'
    assert any("Cycle" in v for v in contract_violations("planner", cyclic))
    assert contract_violations("executor:write", "  ") == ["empty instruction"]


def test_score_candidate_charges_and_disqualifies_on_judge_failure():
    ledger = Ledger(Budget())
    c = cand(1, PLANNER + "\nAlways account for units.")
    bad_judge = FixedAgent("no score here")
    s = score_candidate(c, PLANNER, [], bad_judge, [no_placeholder_verifier], Weights(), ledger)
    assert s.disqualified and s.composite == -math.inf
    assert ledger.counts == {"metric": 0, "judge": 1, "verifier": 1}
    good = score_candidate(c, PLANNER, [{"module": "planner", "input": "x", "keywords": ["units"]}], KeywordJudge(), [no_placeholder_verifier], Weights(), ledger)
    assert good.judge_score == 1.0 and good.verifier_score == 1.0
    assert good.composite == pytest.approx(2.0 - 0.1 * good.delta_size / len(PLANNER))


def test_ledger_refuses_to_exceed_caps():
    ledger = Ledger(Budget(max_metric_calls=2))
    ledger.charge("metric")
    ledger.charge("metric")
    with pytest.raises(BudgetExhausted):
        ledger.charge("metric")
    assert ledger.metric_calls == 2


# -- edits -------------------------------------------------------------------------

line = st.text(alphabet="abc xyz", min_size=0, max_size=6)


@settings(max_examples=300)
@given(st.lists(line, max_size=8), st.lists(line, max_size=8))
def test_decompose_then_apply_reconstructs(a, b):
    base, proposed = "\n".join(a), "\n".join(b)
    edits = decompose(base, proposed)
    assert apply_edits(base, edits) == proposed


@settings(max_examples=200)
@given(st.text(max_size=40), st.text(max_size=40))
def test_delta_size_is_zero_iff_equal_and_symmetric(a, b):
    assert (delta_size(a, b) == 0) == (a == b)
    assert delta_size(a, b) <= len(a) + len(b)


def test_overlap_rules():
    ins = AtomicEdit(EditKind.ADD_CONSTRAINT, 2, 2, "x")
    rep = AtomicEdit(EditKind.REPHRASE_INSTRUCTION, 1, 3, "y")
    assert overlaps(ins, rep) and not overlaps(ins, AtomicEdit(EditKind.ADD_CONSTRAINT, 2, 2, "z"))
    assert not overlaps(AtomicEdit(EditKind.REMOVE_SPAN, 0, 1), AtomicEdit(EditKind.REMOVE_SPAN, 1, 2))


# -- merge -------------------------------------------------------------------------

BASE = ModuleInstruction("planner", PLANNER)


def test_merge_disjoint_edits_applies_both():
    a = cand(1, PLANNER + "\nAlways account for units.")
    lines = PLANNER.split("\n")
    b = cand(2, "\n".join(["Be brief."] + lines))
    merged, info = merge([a, b], BASE, IdentityMerger())
    assert merged.proposed_text.startswith("Be brief.\n")
    assert merged.proposed_text.endswith("Always account for units.")
    assert (info.applied, info.demoted, info.fallback) == (2, 0, None)


def test_merge_overlap_demotes_the_lower_ranked_edit():
    lines = PLANNER.split("\n")
    a = cand(1, "\n".join(["Split the goal into independent subtasks."] + lines[1:]))
    b = cand(2, "\n".join(["Split the goal into few subtasks."] + lines[1:]))
    merged, info = merge([a, b], BASE)
    body, examples = body_and_examples(merged.proposed_text)
    assert body.startswith("Split the goal into independent subtasks.")
    assert examples.splitlines() == ["Examples:", "- alternative: Split the goal into few subtasks."]
    assert (info.applied, info.demoted) == (1, 1)


def test_merge_deduplicates_equivalent_edits():
    a = cand(1, PLANNER + "\nAlways account for units.")
    b = cand(2, PLANNER + "\nalways   ACCOUNT for units.")
    merged, info = merge([a, b], BASE)
    assert merged.proposed_text == a.proposed_text
    assert info.deduplicated == 1


def test_merge_falls_back_when_merger_misbehaves():
    a = cand(1, PLANNER + "\nAlways account for units.")
    b = cand(2, PLANNER + "\nAlways account for dates.")
    merged, info = merge([a, b], BASE, FixedAgent('{"edits": ["only one"]}'))
    assert merged is a and info.fallback.startswith("merger failed")


def test_merge_falls_back_on_contract_break():
    lines = PLANNER.split("\n")
    # both remove the line carrying "dependency"; the merge would break the contract
    stripped = "\n".join(l for l in lines if "dependency" not in l)
    a = cand(1, stripped + "\nAlways account for units.")
    merged, info = merge([a, cand(2, PLANNER + "\nx")], BASE)
    assert merged is a and "contract" in info.fallback


# -- proposals ----------------------------------------------------------------------


def test_propose_k_survives_a_failing_proposer():
    pool = [proposer(AppendProposer("Always cite."), "ok"), proposer(FailingAgent(AppendProposer("x")), "broken")]
    cands = propose_k(BASE, [], "", 3, pool, seed=10)
    assert [c.proposer_id for c in cands] == ["ok", "ok"]
    assert [c.decoding_seed for c in cands] == [10, 12]
    assert all(c.proposed_text.endswith("Always cite.") for c in cands)


def test_propose_k_all_failing_raises():
    with pytest.raises(ProposalError):
        propose_k(BASE, [], "", 2, [proposer(FailingAgent(AppendProposer("x")))])


def test_keyword_proposer_prefers_trace_keywords():
    traces = [{"module": "planner", "input": "t", "keywords": ["units", "dates"]}]
    cands = propose_k(BASE, traces, "", 1, [proposer(KeywordProposer(), temperature=0.0)])
    assert cands[0].proposed_text.split("\n")[-1] in ("Always account for units.", "Always account for dates.")


# -- outer loop ----------------------------------------------------------------------


def test_split_is_every_fifth_example():
    dev = [{"i": i} for i in range(12)]
    util, held = split_devset(dev)
    assert [d["i"] for d in held] == [4, 9]
    assert len(util) == 10


def _setup(seed=0):
    mods = ["planner", "executor:write"]
    dev, hidden = make_keyword_devset(mods, seed=seed)
    ins = {m: ModuleInstruction(m, default_instructions()[m]) for m in mods}
    pool = [proposer(KeywordProposer(), f"p{i}", t) for i, t in enumerate([0.2, 0.7, 1.0])]
    return ins, dev, pool


def test_zero_budget_returns_inputs_unchanged():
    ins, dev, pool = _setup()
    state, report = optimize(ins, dev, Budget(max_metric_calls=0), keyword_coverage, pool, KeywordJudge())
    assert {m: i.instruction_text for m, i in state.items()} == {m: i.instruction_text for m, i in ins.items()}
    assert report.metric_calls == 0 and report.rounds == []


def test_optimize_improves_and_only_accepts_strict_gains():
    ins, dev, pool = _setup(1)
    state, report = optimize(ins, dev, Budget(), keyword_coverage, pool, KeywordJudge(), merger=IdentityMerger(), seed=1)
    assert report.final_utility > report.initial_utility
    utils = [u for _, u in report.trajectory]
    assert utils == sorted(utils)
    prev = report.initial_utility
    for r in report.rounds:
        if r.accepted:
            assert r.utility > prev
        elif r.utility is not None:
            assert r.utility <= prev
        prev = r.incumbent_utility
    assert report.frontier and all("delta_size" in p for p in report.frontier)
    assert report.efficiency > 0
    assert set(state) == set(ins)


def test_patience_stops_a_stuck_search():
    ins, dev, pool = _setup()
    stuck = [proposer(AppendProposer("Keep going."))]
    _, report = optimize(ins, dev, Budget(), keyword_coverage, stuck, KeywordJudge(), patience=3)
    assert report.stop_reason == "converged"
    assert len(report.rounds) == 3


class CountingJudge(KeywordJudge):
    """Keyword judge that fails every third call."""

    def respond(self, prompt, decoding):
        if self.calls % 3 == 0:
            raise AgentError("judge hiccup")
        return super().respond(prompt, decoding)


@pytest.mark.parametrize("caps", [(5, 100, 100), (150, 7, 100), (150, 100, 11), (150, 1000, 10000)])
def test_ledger_matches_real_invocations_under_failures(caps):
    ins, dev, _ = _setup(2)
    metric_calls = 0
    verifier_calls = 0
    lock = threading.Lock()

    def metric(instr, examples):
        nonlocal metric_calls
        metric_calls += 1
        return keyword_coverage(instr, examples)

    def verifier(text, module_id):
        nonlocal verifier_calls
        with lock:
            verifier_calls += 1
        return True

    pool = [
        proposer(KeywordProposer(), "good", 0.5),
        proposer(FailingAgent(KeywordProposer(), failures=4), "flaky", 0.5),
        proposer(FailingAgent(KeywordProposer()), "dead", 0.5),
    ]
    judge = CountingJudge()
    budget = Budget(max_metric_calls=caps[0], max_judge_calls=caps[1], max_verifier_runs=caps[2])
    _, report = optimize(ins, dev, budget, metric, pool, judge, merger=IdentityMerger(), verifiers=[verifier, verifier], seed=2)
    assert report.metric_calls == metric_calls <= caps[0]
    assert report.judge_calls == judge.calls <= caps[1]
    assert report.verifier_runs == verifier_calls <= caps[2]


def test_report_jsonl_has_rounds_and_summary():
    import json

    ins, dev, pool = _setup()
    _, report = optimize(ins, dev, Budget(max_metric_calls=4), keyword_coverage, pool, KeywordJudge())
    lines = [json.loads(l) for l in report.to_jsonl().splitlines()]
    assert lines[-1]["type"] == "summary" and lines[-1]["metric_calls"] == 4
    assert all(l["type"] == "round" for l in lines[:-1])
    assert lines[-2]["metric_calls"] <= 4
