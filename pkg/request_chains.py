"""
Request chains

For an ad image / frame / script, walks the insertion history backwards:
the element's inserter, the element of that script, its inserter, and so on
until the parser (or an unknown inserter) is reached. Links are ordered
downstream -> upstream.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional

from page_graph import (
    InserterKind,
    Inserter,
    InsertionConflictError,
    NodeKind,
    PageGraph,
    ResourceRequestRecord,
    inserter_of,
    resource_requests,
)

logger = logging.getLogger(__name__)


class ChainCycleError(ValueError):
    """The insertion history loops back on itself (corrupt graph)"""


@dataclass(frozen=True)
class ChainLink:
    script_node: str
    script_url: Optional[str]  # None for inline scripts
    inserted_by: InserterKind

    @property
    def has_url(self) -> bool:
        return bool(self.script_url)

    def to_dict(self) -> dict:
        return {
            "script": self.script_node,
            "url": self.script_url,
            "inserted_by": self.inserted_by.value,
        }


@dataclass
class RequestChain:
    terminal: ResourceRequestRecord
    links: list[ChainLink] = field(default_factory=list)
    terminated_by: InserterKind = InserterKind.PARSER
    diagnostics: list[str] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def terminal_url(self) -> str:
        return self.terminal.url

    def script_urls(self) -> list[Optional[str]]:
        return [link.script_url for link in self.links]

    def to_dict(self) -> dict:
        return {
            "terminal_url": self.terminal_url,
            "resource_type": self.terminal.resource_type.value,
            "script_urls": self.script_urls(),
            "links": [link.to_dict() for link in self.links],
            "terminated_by": self.terminated_by.value,
            "diagnostics": self.diagnostics,
            "error": self.error,
        }


def build_chain(g: PageGraph, element: str,
                terminal: Optional[ResourceRequestRecord] = None) -> RequestChain:
    """
    Build the request chain for an element (or the script that issued a fetch).

    Stops at a parser-inserted element. An unknown inserter ends the chain
    with a diagnostic; a repeated script raises ChainCycleError.
    """
    if terminal is None:
        terminal = next((r for r in resource_requests(g) if r.requester == element), None)
        if terminal is None:
            raise ValueError(f"node '{element}' issued no request")

    chain = RequestChain(terminal)
    if terminal.final_url and terminal.final_url != terminal.resource_url:
        chain.diagnostics.append(f"redirected from {terminal.resource_url}")

    if g.node(element).kind == NodeKind.SCRIPT:
        # fetch issued by the script itself
        inserter = Inserter(InserterKind.SCRIPT, element)
    else:
        inserter = inserter_of(g, element)

    seen: set[str] = set()
    while True:
        if inserter.kind == InserterKind.PARSER:
            chain.terminated_by = InserterKind.PARSER
            break
        if inserter.kind == InserterKind.UNKNOWN:
            chain.terminated_by = InserterKind.UNKNOWN
            chain.diagnostics.append(inserter.reason or "unknown inserter")
            break

        script = inserter.script
        if script in seen:
            raise ChainCycleError(f"script '{script}' repeats in the chain of '{element}'")
        seen.add(script)
        script_url = g.node(script).url or None

        script_element = g.script_element(script)
        if script_element is None:
            chain.links.append(ChainLink(script, script_url, InserterKind.UNKNOWN))
            chain.terminated_by = InserterKind.UNKNOWN
            chain.diagnostics.append(f"script '{script}' has no executing element")
            break

        inserter = inserter_of(g, script_element)
        chain.links.append(ChainLink(script, script_url, inserter.kind))

    return chain


def build_all_chains(g: PageGraph, targets: Iterable[ResourceRequestRecord]) -> list[RequestChain]:
    """Chains for each target, in input order; per-target failures are recorded on the chain"""
    chains = []
    for target in targets:
        try:
            chains.append(build_chain(g, target.requester, target))
        except (ChainCycleError, InsertionConflictError, KeyError) as e:
            logger.warning(f"Chain for {target.url} failed: {e}")
            chains.append(RequestChain(target, terminated_by=InserterKind.UNKNOWN, error=str(e)))
    return chains


def chains_to_jsonl(chains: Iterable[RequestChain], page: str = "") -> str:
    """One JSON object per chain (terminal URL, ordered script URLs, diagnostics)"""
    lines = []
    for chain in chains:
        record = chain.to_dict()
        if page:
            record["page"] = page
        lines.append(json.dumps(record, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")
