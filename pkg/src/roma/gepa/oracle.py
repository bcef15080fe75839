"""Synthetic keyword-coverage optimization oracle and the mocks that drive it.

Each devset example belongs to one module and lists keywords the module's
instruction should mention. Utility is the mean per-example keyword
coverage. Proposers see the keywords of the minibatch traces in their
prompt, never the hidden set; the judge sees the held-out examples' keywords.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
from typing import Mapping, Sequence

from ..agents.base import Decoding
from ..agents.mocks import MockAgent, sections
from .edits import body_and_examples

VOCABULARY = (
    "evidence", "citations", "dependencies", "ordering", "brevity", "units", "verification", "sources",
    "assumptions", "constraints", "format", "schema", "recency", "consistency", "tone", "audience",
    "examples", "edge-cases", "numbers", "dates", "names", "structure", "pacing", "dialogue",
    "sensory", "conflict", "coverage", "overlap", "parallelism", "budget", "tools", "retries",
)

_WORD = re.compile(r"[a-z][a-z-]*")


def words(text: str) -> set[str]:
    return set(_WORD.findall(text.lower()))


def make_keyword_devset(
    modules: Sequence[str],
    *,
    hidden_per_module: int = 6,
    examples_per_module: int = 10,
    keywords_per_example: int = 2,
    seed: int = 0,
    vocabulary: Sequence[str] = VOCABULARY,
) -> tuple[list[dict], dict[str, list[str]]]:
    """Random devset plus the hidden keyword set of each module."""
    rng = random.Random(seed)
    hidden = {m: sorted(rng.sample(list(vocabulary), hidden_per_module)) for m in modules}
    devset = []
    for i in range(examples_per_module):
        for m in modules:
            kws = sorted(rng.sample(hidden[m], keywords_per_example))
            devset.append({"module": m, "input": f"{m} task {i}", "keywords": kws})
    return devset, hidden


def keyword_coverage(instructions: Mapping[str, str], examples: Sequence[dict]) -> float:
    """Mean fraction of each example's keywords found in its module's instruction body."""
    if not examples:
        return 0.0
    total = 0.0
    for ex in examples:
        body, _ = body_and_examples(instructions.get(ex["module"], ""))
        have = words(body)
        kws = ex["keywords"]
        total += sum(1 for k in kws if k in have) / len(kws)
    return total / len(examples)


_TRACE = re.compile(r"^- module: (.*?) \| input: .*? \| expected: (.*)$")


def _rng(prompt: str, decoding: Decoding) -> random.Random:
    digest = hashlib.sha256(f"{decoding.seed}\x00{prompt}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


class KeywordProposer(MockAgent):
    """Appends one constraint naming a word the instruction does not mention yet.

    It prefers words expected by the traces in its prompt; with probability
    ``noise * temperature`` it picks any fresh vocabulary word instead, so
    hotter decoding gives more diverse and less reliable edits.
    """

    name = "keyword_proposer"

    def __init__(self, vocabulary: Sequence[str] = VOCABULARY, noise: float = 0.5, **kw):
        super().__init__(**kw)
        self.vocabulary = list(vocabulary)
        self.noise = noise

    def respond(self, prompt, decoding):
        sec = sections(prompt)
        current = sec.get("current instruction", "")
        body, examples = body_and_examples(current)
        have = words(body)
        wanted = []
        for line in sec.get("traces", "").splitlines():
            m = _TRACE.match(line.strip())
            if m:
                wanted += [k.strip() for k in m.group(2).split(",") if k.strip() and k.strip() not in have]
        fresh = [w for w in self.vocabulary if w not in have]
        rng = _rng(prompt, decoding)
        if wanted and rng.random() >= self.noise * decoding.temperature:
            w = rng.choice(sorted(set(wanted)))
        elif fresh:
            w = rng.choice(fresh)
        else:
            return "```text\n" + current + "\n```"
        new_body = body.rstrip("\n") + f"\nAlways account for {w}."
        text = new_body + ("\n" + examples if examples else "")
        return "```text\n" + text + "\n```"


class AppendProposer(MockAgent):
    """Appends a fixed constraint line."""

    name = "append_proposer"

    def __init__(self, constraint: str, **kw):
        super().__init__(**kw)
        self.constraint = constraint

    def respond(self, prompt, decoding):
        current = sections(prompt).get("current instruction", "")
        return "```text\n" + current.rstrip("\n") + "\n" + self.constraint + "\n```"


class KeywordJudge(MockAgent):
    """Scores a candidate by keyword coverage of the held-out examples shown in its prompt."""

    name = "keyword_judge"

    def respond(self, prompt, decoding):
        sec = sections(prompt)
        have = words(body_and_examples(sec.get("candidate", ""))[0])
        fractions = []
        for line in sec.get("held-out traces", "").splitlines():
            m = _TRACE.match(line.strip())
            if not m:
                continue
            kws = [k.strip() for k in m.group(2).split(",") if k.strip()]
            if kws:
                fractions.append(sum(1 for k in kws if k in have) / len(kws))
        score = sum(fractions) / len(fractions) if fractions else 0.0
        return "```json\n" + json.dumps({"score": score, "reason": "held-out keyword coverage"}) + "\n```"


class IdentityMerger(MockAgent):
    """Returns the edit payloads unchanged."""

    name = "identity_merger"

    def respond(self, prompt, decoding):
        items = []
        for line in sections(prompt).get("edits", "").splitlines():
            m = re.match(r"^(\d+)\. (.*)$", line)
            if m:
                items.append(m.group(2))
            elif items:
                items[-1] += "\n" + line
        return "```json\n" + json.dumps({"edits": items}) + "\n```"


def no_placeholder_verifier(text: str, module_id: str) -> bool:
    return "{" not in text and "}" not in text


def length_verifier(max_chars: int = 4_000):
    def check(text: str, module_id: str) -> bool:
        return len(text) <= max_chars

    check.__name__ = f"length<={max_chars}"
    return check
