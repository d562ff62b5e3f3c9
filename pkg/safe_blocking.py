"""
Safe blocking

Two breakage heuristics decide whether a script can be blocked:

1. a script inserting into more than `subtree_limit` document regions is unsafe
2. a script that inserts (directly or through other scripts) a script of kind 1 is unsafe

Everything else is safe. For each request chain the highest safe script with
a URL, reached without passing an unsafe or inline script, becomes a blocking
target next to the ad itself.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import config
from abp_rules import NetworkRule, RuleGenerationError, generate_rule
from domains import PublicSuffixTable
from page_graph import PageGraph, modified_subtree_count, scripts_inserted_by
from request_chains import RequestChain

logger = logging.getLogger(__name__)


class Verdict(Enum):
    SAFE = "safe"
    UNSAFE = "unsafe"


class SafetyReason(Enum):
    SUBTREE_COUNT_EXCEEDED = "subtree_count_exceeded"
    INSERTS_UNSAFE_SCRIPT = "inserts_unsafe_script"
    DEFAULT_SAFE = "default_safe"


@dataclass(frozen=True)
class ScriptSafety:
    script_node: str
    verdict: Verdict
    reason: SafetyReason
    subtree_count: int
    # descendant script responsible for an inserts_unsafe_script verdict
    via: Optional[str] = None

    @property
    def safe(self) -> bool:
        return self.verdict == Verdict.SAFE

    def to_dict(self) -> dict:
        return {
            "script": self.script_node,
            "verdict": self.verdict.value,
            "reason": self.reason.value,
            "subtree_count": self.subtree_count,
            "via": self.via,
        }


class SafetyClassifier:
    """Memoized script verdicts for one page graph; not shared between workers"""

    def __init__(self, g: PageGraph, subtree_limit: int = config.SUBTREE_LIMIT):
        self.g = g
        self.subtree_limit = subtree_limit
        self._counts: dict[str, int] = {}
        self._children: dict[str, list[str]] = {}
        self._verdicts: dict[str, ScriptSafety] = {}

    def subtree_count(self, script_id: str) -> int:
        if script_id not in self._counts:
            self._counts[script_id] = modified_subtree_count(self.g, script_id)
        return self._counts[script_id]

    def children(self, script_id: str) -> list[str]:
        if script_id not in self._children:
            self._children[script_id] = scripts_inserted_by(self.g, script_id)
        return self._children[script_id]

    def classify(self, script_id: str) -> ScriptSafety:
        if script_id in self._verdicts:
            return self._verdicts[script_id]

        count = self.subtree_count(script_id)
        if count > self.subtree_limit:
            result = ScriptSafety(script_id, Verdict.UNSAFE, SafetyReason.SUBTREE_COUNT_EXCEEDED, count)
        else:
            result = ScriptSafety(script_id, Verdict.SAFE, SafetyReason.DEFAULT_SAFE, count)
            # Inserted scripts are followed transitively
            seen = {script_id}
            pending = list(self.children(script_id))
            while pending:
                child = pending.pop(0)
                if child in seen:
                    continue
                seen.add(child)
                if self.subtree_count(child) > self.subtree_limit:
                    result = ScriptSafety(script_id, Verdict.UNSAFE, SafetyReason.INSERTS_UNSAFE_SCRIPT,
                                          count, via=child)
                    break
                pending.extend(self.children(child))

        self._verdicts[script_id] = result
        return result


def classify_script(g: PageGraph, script_id: str, subtree_limit: int = config.SUBTREE_LIMIT) -> ScriptSafety:
    return SafetyClassifier(g, subtree_limit).classify(script_id)


@dataclass
class BlockPlan:
    terminal_url: str
    chain: RequestChain
    highest_safe_script_url: Optional[str] = None
    highest_index: Optional[int] = None
    verdicts: list[ScriptSafety] = field(default_factory=list)
    generated_rules: list[NetworkRule] = field(default_factory=list)
    diagnostics: list[str] = field(default_factory=list)

    def target_urls(self) -> list[str]:
        urls = [self.terminal_url]
        if self.highest_safe_script_url:
            urls.append(self.highest_safe_script_url)
        return urls

    def to_dict(self) -> dict:
        return {
            "terminal_url": self.terminal_url,
            "highest_safe_script_url": self.highest_safe_script_url,
            "chain": self.chain.to_dict(),
            "verdicts": [v.to_dict() for v in self.verdicts],
            "rules": [r.to_text() for r in self.generated_rules],
            "diagnostics": self.diagnostics,
        }


def highest_blockable(g: PageGraph, chain: RequestChain,
                      classifier: Optional[SafetyClassifier] = None) -> BlockPlan:
    """
    Pick the highest safely blockable script in a chain.

    Walks from the nearest upstream script outwards and stops at the first
    unsafe or inline script. The terminal resource is always a target.
    """
    classifier = classifier or SafetyClassifier(g)
    plan = BlockPlan(terminal_url=chain.terminal_url, chain=chain)
    if chain.error:
        plan.diagnostics.append(f"chain failed: {chain.error}")
        return plan

    walking = True
    for i, link in enumerate(chain.links):
        safety = classifier.classify(link.script_node)
        plan.verdicts.append(safety)
        if not walking:
            continue
        if not safety.safe or not link.has_url:
            walking = False
            continue
        plan.highest_index = i
        plan.highest_safe_script_url = link.script_url
    return plan


def attach_rules(plan: BlockPlan, psl: PublicSuffixTable, urls: Optional[list[str]] = None) -> BlockPlan:
    """Generate rules for the plan's targets (or the given subset of them)"""
    for url in plan.target_urls() if urls is None else urls:
        try:
            plan.generated_rules.append(generate_rule(url, psl))
        except RuleGenerationError as e:
            plan.diagnostics.append(f"skipped {url}: {e}")
            logger.debug(f"Skipped rule for {url}: {e}")
    return plan
