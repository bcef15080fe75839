"""Multi-proposer prompt optimization over the engine's module instructions."""

from .edits import AtomicEdit, EditKind, ModuleInstruction, apply_edits, decompose, delta_size
from .optimizer import (
    MergeInfo,
    OptimizationReport,
    PromptCandidate,
    ProposalError,
    Proposer,
    merge,
    optimize,
    propose_k,
    split_devset,
)
from .scoring import (
    Budget,
    BudgetExhausted,
    Ledger,
    ScoreBreakdown,
    SelectionError,
    Weights,
    composite_score,
    contract_violations,
    score_candidate,
    select_top_n,
)

__all__ = [
    "AtomicEdit",
    "Budget",
    "BudgetExhausted",
    "EditKind",
    "Ledger",
    "MergeInfo",
    "ModuleInstruction",
    "OptimizationReport",
    "PromptCandidate",
    "ProposalError",
    "Proposer",
    "ScoreBreakdown",
    "SelectionError",
    "Weights",
    "apply_edits",
    "composite_score",
    "contract_violations",
    "decompose",
    "delta_size",
    "merge",
    "optimize",
    "propose_k",
    "score_candidate",
    "select_top_n",
    "split_devset",
]
