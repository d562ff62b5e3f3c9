"""
Page execution graphs

Loads the graphml export of an instrumented page load and answers the
attribution questions the rest of the pipeline asks: who inserted an element,
which document regions a script touched, which scripts a script inserted, and
the structural features of a node.

graphml schema (key attr.name -> meaning):

    node  "node type"      parser | html_element | script | resource | frame_owner | extension_point
    node  "tag name"       element tag (html_element)
    node  "url"            resource / script / frame URL
    node  "frame id"       frame the node belongs to (default "main")
    node  "child frame"    local frame hosted by a frame_owner
    edge  "edge type"      create_node | insert_node | remove_node | set_attribute | execute |
                           request_start | request_complete | request_error | structure
    edge  "timestamp"      ms since navigation start
    edge  "attr name"      attribute touched by set_attribute
    edge  "resource type"  request type on request_start (image, subdocument, script, ...)
    edge  "parent"         insertion parent on insert_node
    edge  "request id"     pairs request_start with its response edge
    edge  "response url"   final URL after redirects on request_complete
    graph "page url"       final URL of the page

The instrumentation's own labels are accepted as aliases:

    "HTML element" -> html_element     "frame owner" / "remote frame" -> frame_owner
    "text node"    -> html_element (#text)   "DOM root" -> html_element (#document)
    "extensions"   -> extension_point
    "create node" / "insert node" / "remove node" / "delete node" -> *_node
    "set attribute" / "delete attribute" -> set_attribute
    "request start" / "request complete" / "request error" -> request_*
"""

import logging
import xml.etree.ElementTree as ET
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Optional

import networkx as nx

from abp_rules import ResourceType

logger = logging.getLogger(__name__)

GRAPHML_NS = "http://graphml.graphdrawing.org/xmlns"
MAIN_FRAME = "main"

NODE_TYPE_KEY = "node type"
TAG_NAME_KEY = "tag name"
URL_KEY = "url"
FRAME_ID_KEY = "frame id"
CHILD_FRAME_KEY = "child frame"
EDGE_TYPE_KEY = "edge type"
TIMESTAMP_KEY = "timestamp"
ATTR_NAME_KEY = "attr name"
RESOURCE_TYPE_KEY = "resource type"
PARENT_KEY = "parent"
REQUEST_ID_KEY = "request id"
RESPONSE_URL_KEY = "response url"
PAGE_URL_KEY = "page url"

REQUIRED_KEYS = (("node", NODE_TYPE_KEY), ("edge", EDGE_TYPE_KEY), ("edge", TIMESTAMP_KEY))


class NodeKind(Enum):
    PARSER = "parser"
    HTML_ELEMENT = "html_element"
    SCRIPT = "script"
    RESOURCE = "resource"
    FRAME_OWNER = "frame_owner"
    EXTENSION_POINT = "extension_point"


class EdgeKind(Enum):
    CREATE_NODE = "create_node"
    INSERT_NODE = "insert_node"
    REMOVE_NODE = "remove_node"
    SET_ATTRIBUTE = "set_attribute"
    EXECUTE = "execute"
    REQUEST_START = "request_start"
    REQUEST_COMPLETE = "request_complete"
    REQUEST_ERROR = "request_error"
    STRUCTURE = "structure"


# label -> (kind, default tag name)
NODE_ALIASES = {
    "parser": (NodeKind.PARSER, None),
    "html element": (NodeKind.HTML_ELEMENT, None),
    "text node": (NodeKind.HTML_ELEMENT, "#text"),
    "dom root": (NodeKind.HTML_ELEMENT, "#document"),
    "script": (NodeKind.SCRIPT, None),
    "resource": (NodeKind.RESOURCE, None),
    "frame owner": (NodeKind.FRAME_OWNER, None),
    "remote frame": (NodeKind.FRAME_OWNER, None),
    "extension point": (NodeKind.EXTENSION_POINT, None),
    "extensions": (NodeKind.EXTENSION_POINT, None),
}

EDGE_ALIASES = {
    "create node": EdgeKind.CREATE_NODE,
    "insert node": EdgeKind.INSERT_NODE,
    "remove node": EdgeKind.REMOVE_NODE,
    "delete node": EdgeKind.REMOVE_NODE,
    "set attribute": EdgeKind.SET_ATTRIBUTE,
    "delete attribute": EdgeKind.SET_ATTRIBUTE,
    "execute": EdgeKind.EXECUTE,
    "request start": EdgeKind.REQUEST_START,
    "request complete": EdgeKind.REQUEST_COMPLETE,
    "request error": EdgeKind.REQUEST_ERROR,
    "structure": EdgeKind.STRUCTURE,
}

_ACTORS = {NodeKind.PARSER, NodeKind.SCRIPT, NodeKind.EXTENSION_POINT}
_DOM_NODES = {NodeKind.HTML_ELEMENT, NodeKind.FRAME_OWNER}
_REQUESTERS = {NodeKind.HTML_ELEMENT, NodeKind.FRAME_OWNER, NodeKind.SCRIPT}

# edge kind -> (allowed source kinds, allowed target kinds)
EDGE_ENDPOINTS = {
    EdgeKind.CREATE_NODE: (_ACTORS, _DOM_NODES),
    EdgeKind.INSERT_NODE: (_ACTORS, _DOM_NODES),
    EdgeKind.REMOVE_NODE: (_ACTORS, _DOM_NODES),
    EdgeKind.SET_ATTRIBUTE: (_ACTORS, _DOM_NODES),
    EdgeKind.EXECUTE: (_DOM_NODES | {NodeKind.EXTENSION_POINT}, {NodeKind.SCRIPT}),
    EdgeKind.REQUEST_START: (_REQUESTERS, {NodeKind.RESOURCE}),
    EdgeKind.REQUEST_COMPLETE: ({NodeKind.RESOURCE}, _REQUESTERS),
    EdgeKind.REQUEST_ERROR: ({NodeKind.RESOURCE}, _REQUESTERS),
    EdgeKind.STRUCTURE: (_DOM_NODES | {NodeKind.PARSER}, _DOM_NODES),
}

# Edges that change a node on behalf of an actor
_MODIFICATIONS = (EdgeKind.SET_ATTRIBUTE, EdgeKind.INSERT_NODE, EdgeKind.REMOVE_NODE)


class GraphMLParseError(ValueError):
    """Malformed XML"""


class GraphSchemaError(ValueError):
    """Well-formed XML that does not follow the graphml schema above"""


class GraphInvariantError(ValueError):
    """Schema-valid graph that violates a structural invariant"""


class InsertionConflictError(ValueError):
    """A node created by more than one actor"""


def _label(value: Any) -> str:
    return str(value).strip().lower().replace("_", " ")


@dataclass
class GraphNode:
    id: str
    kind: NodeKind
    tag_name: Optional[str] = None
    url: Optional[str] = None
    frame_id: str = MAIN_FRAME
    attributes: dict = field(default_factory=dict)


@dataclass
class GraphEdge:
    id: str
    kind: EdgeKind
    source: str
    target: str
    timestamp: float
    attributes: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ResourceRequestRecord:
    """One network request, derived from a request_start edge"""
    requester: str
    resource_url: str
    resource_type: ResourceType
    start_time: float
    completed: bool
    edge_id: str = ""
    resource_node: str = ""
    failed: bool = False
    final_url: str = ""

    @property
    def url(self) -> str:
        """URL after redirects when known"""
        return self.final_url or self.resource_url

    def to_dict(self) -> dict:
        return {
            "requester": self.requester,
            "url": self.resource_url,
            "final_url": self.final_url or None,
            "resource_type": self.resource_type.value,
            "start_time": self.start_time,
            "completed": self.completed,
            "failed": self.failed,
        }


class InserterKind(Enum):
    PARSER = "parser"
    SCRIPT = "script"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class Inserter:
    kind: InserterKind
    script: Optional[str] = None
    reason: str = ""


@dataclass(frozen=True)
class DegreeFeatures:
    in_degree: int = 0
    out_degree: int = 0
    total_degree: int = 0
    parent_in_degree: int = 0
    parent_out_degree: int = 0
    parent_total_degree: int = 0
    avg_degree_connectivity: float = 0.0
    modified_by_script: bool = False
    parent_modified_by_script: bool = False


class PageGraph:
    """Validated, read-only graph of one page's execution"""

    def __init__(self, nodes: list[GraphNode], edges: list[GraphEdge], page_url: str = "",
                 diagnostics: Optional[list[str]] = None):
        self.nodes: dict[str, GraphNode] = {}
        for node in nodes:
            if node.id in self.nodes:
                raise GraphSchemaError(f"duplicate node id '{node.id}'")
            self.nodes[node.id] = node
        self.edges: list[GraphEdge] = list(edges)
        self.page_url = page_url
        self.diagnostics: list[str] = list(diagnostics or [])
        self.frame_tree: dict[str, Optional[str]] = {}

        self._validate()

        self._in: dict[tuple, list[GraphEdge]] = defaultdict(list)
        self._out: dict[tuple, list[GraphEdge]] = defaultdict(list)
        self._nx = nx.MultiDiGraph()
        self._nx.add_nodes_from(self.nodes)
        for edge in self.edges:
            self._in[edge.target, edge.kind].append(edge)
            self._out[edge.source, edge.kind].append(edge)
            self._nx.add_edge(edge.source, edge.target, key=edge.id)
        if not self.page_url:
            self.page_url = next((n.url for n in self.parsers() if n.url), "") or ""

    def _validate(self):
        seen_edges = set()
        last_ts = float("-inf")
        for edge in self.edges:
            if edge.id in seen_edges:
                raise GraphSchemaError(f"duplicate edge id '{edge.id}'")
            seen_edges.add(edge.id)
            for endpoint in (edge.source, edge.target):
                if endpoint not in self.nodes:
                    raise GraphSchemaError(f"edge '{edge.id}' references missing node '{endpoint}'")
            if edge.timestamp < last_ts:
                raise GraphInvariantError(
                    f"edge '{edge.id}' timestamp {edge.timestamp} precedes the previous edge ({last_ts})"
                )
            last_ts = edge.timestamp
            sources, targets = EDGE_ENDPOINTS[edge.kind]
            src_kind = self.nodes[edge.source].kind
            dst_kind = self.nodes[edge.target].kind
            if src_kind not in sources or dst_kind not in targets:
                raise GraphInvariantError(
                    f"edge '{edge.id}' ({edge.kind.value}) cannot connect "
                    f"{src_kind.value} -> {dst_kind.value}"
                )

        parsers_per_frame: dict[str, int] = defaultdict(int)
        for node in self.nodes.values():
            if node.kind == NodeKind.RESOURCE and not node.url:
                raise GraphInvariantError(f"resource node '{node.id}' has no url")
            if node.kind == NodeKind.HTML_ELEMENT and not node.tag_name:
                raise GraphInvariantError(f"html_element node '{node.id}' has no tag name")
            if node.kind == NodeKind.PARSER:
                parsers_per_frame[node.frame_id] += 1
            self.frame_tree.setdefault(node.frame_id, None)

        for node in self.nodes.values():
            child = node.attributes.get(CHILD_FRAME_KEY)
            if node.kind == NodeKind.FRAME_OWNER and child:
                self.frame_tree[str(child)] = node.frame_id

        for frame in self.frame_tree:
            count = parsers_per_frame.get(frame, 0)
            if count != 1:
                raise GraphInvariantError(f"frame '{frame}' has {count} parser nodes (expected 1)")

    # -- lookups ------------------------------------------------------------

    def node(self, node_id: str) -> GraphNode:
        return self.nodes[node_id]

    def in_edges(self, node_id: str, *kinds: EdgeKind) -> list[GraphEdge]:
        if len(kinds) == 1:
            return self._in.get((node_id, kinds[0]), [])
        found = [e for k in kinds for e in self._in.get((node_id, k), [])]
        return sorted(found, key=lambda e: (e.timestamp, e.id))

    def out_edges(self, node_id: str, *kinds: EdgeKind) -> list[GraphEdge]:
        if len(kinds) == 1:
            return self._out.get((node_id, kinds[0]), [])
        found = [e for k in kinds for e in self._out.get((node_id, k), [])]
        return sorted(found, key=lambda e: (e.timestamp, e.id))

    def nodes_of_kind(self, kind: NodeKind) -> list[GraphNode]:
        return [n for n in self.nodes.values() if n.kind == kind]

    def parsers(self) -> list[GraphNode]:
        return self.nodes_of_kind(NodeKind.PARSER)

    @property
    def nx_graph(self) -> nx.MultiDiGraph:
        return self._nx

    def script_element(self, script_id: str) -> Optional[str]:
        """Element (or frame owner) that executed the script"""
        execs = self.in_edges(script_id, EdgeKind.EXECUTE)
        return execs[0].source if execs else None

    def dom_parent(self, node_id: str, at: Optional[float] = None) -> Optional[str]:
        """
        DOM parent of a node.

        Taken from the `parent` attribute of insert edges or, failing that, from
        structure edges. With `at`, the placement current at that time is used;
        otherwise the latest placement.
        """
        placements = []
        for edge in self.in_edges(node_id, EdgeKind.INSERT_NODE):
            parent = edge.attributes.get(PARENT_KEY)
            if parent is not None and str(parent) in self.nodes:
                placements.append((edge.timestamp, str(parent)))
        if not placements:
            placements = [(e.timestamp, e.source) for e in self.in_edges(node_id, EdgeKind.STRUCTURE)
                          if self.nodes[e.source].kind != NodeKind.PARSER]
        if not placements:
            return None
        if at is not None:
            earlier = [p for ts, p in placements if ts <= at]
            return earlier[-1] if earlier else placements[0][1]
        return placements[-1][1]

    def summary(self) -> dict:
        counts = defaultdict(int)
        for node in self.nodes.values():
            counts[node.kind.value] += 1
        return {
            "page_url": self.page_url,
            "nodes": len(self.nodes),
            "edges": len(self.edges),
            "node_kinds": dict(sorted(counts.items())),
            "frames": len(self.frame_tree),
        }


# =============================================================================
# graphml loading
# =============================================================================

def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _convert(value: str, attr_type: str) -> Any:
    if attr_type in ("double", "float"):
        return float(value)
    if attr_type in ("int", "long"):
        return int(value)
    if attr_type == "boolean":
        return value.strip().lower() in ("true", "1")
    return value


def load_graphml(data: bytes, page_url: Optional[str] = None, source: str = "<bytes>") -> PageGraph:
    """
    Parse and validate one graphml export.

    Raises GraphMLParseError for malformed XML, GraphSchemaError for missing
    keys/attributes or dangling edges, GraphInvariantError for structural
    violations.
    """
    try:
        root = ET.fromstring(data)
    except ET.ParseError as e:
        line, column = e.position
        raise GraphMLParseError(f"{source}: malformed XML at line {line}, column {column}: {e}") from e

    if _local(root.tag) != "graphml":
        raise GraphSchemaError(f"{source}: root element is <{_local(root.tag)}>, expected <graphml>")

    keys: dict[str, tuple] = {}
    defaults: dict[str, dict] = {"node": {}, "edge": {}, "graph": {}}
    declared = set()
    for key in root:
        if _local(key.tag) != "key":
            continue
        domain = key.get("for", "all")
        name = key.get("attr.name") or key.get("id")
        attr_type = key.get("attr.type", "string")
        keys[key.get("id")] = (name, attr_type)
        domains = ("node", "edge", "graph") if domain == "all" else (domain,)
        for d in domains:
            declared.add((d, name))
        for child in key:
            if _local(child.tag) == "default" and child.text is not None:
                for d in domains:
                    if d in defaults:
                        defaults[d][name] = _convert(child.text, attr_type)

    for domain, name in REQUIRED_KEYS:
        if (domain, name) not in declared:
            raise GraphSchemaError(f"{source}: missing required {domain} attribute key '{name}'")

    graph_el = next((el for el in root if _local(el.tag) == "graph"), None)
    if graph_el is None:
        raise GraphSchemaError(f"{source}: no <graph> element")

    def decode(element, domain: str) -> dict:
        values = dict(defaults[domain])
        for child in element:
            if _local(child.tag) != "data":
                continue
            key_id = child.get("key")
            if key_id not in keys:
                raise GraphSchemaError(f"{source}: <data> references undeclared key '{key_id}'")
            name, attr_type = keys[key_id]
            try:
                values[name] = _convert(child.text or "", attr_type)
            except ValueError as e:
                raise GraphSchemaError(f"{source}: bad {attr_type} value for '{name}': {e}") from e
        return values

    graph_data = decode(graph_el, "graph")
    nodes: list[GraphNode] = []
    edges: list[GraphEdge] = []
    dropped: set[str] = set()
    declared_nodes: set[str] = set()
    diagnostics: list[str] = []

    for el in graph_el:
        tag = _local(el.tag)
        if tag == "node":
            node_id = el.get("id")
            if not node_id:
                raise GraphSchemaError(f"{source}: <node> without id")
            declared_nodes.add(node_id)
            values = decode(el, "node")
            if NODE_TYPE_KEY not in values:
                raise GraphSchemaError(f"{source}: node '{node_id}' missing required attribute '{NODE_TYPE_KEY}'")
            alias = NODE_ALIASES.get(_label(values.pop(NODE_TYPE_KEY)))
            if alias is None:
                dropped.add(node_id)
                continue
            kind, default_tag = alias
            tag_name = values.pop(TAG_NAME_KEY, None) or default_tag
            url = values.pop(URL_KEY, None) or None
            frame_id = str(values.pop(FRAME_ID_KEY, MAIN_FRAME) or MAIN_FRAME)
            nodes.append(GraphNode(node_id, kind, tag_name, url, frame_id, values))

    for index, el in enumerate(e for e in graph_el if _local(e.tag) == "edge"):
        edge_id = el.get("id") or f"edge{index}"
        source_id, target_id = el.get("source"), el.get("target")
        for endpoint in (source_id, target_id):
            if endpoint not in declared_nodes:
                raise GraphSchemaError(f"{source}: edge '{edge_id}' references missing node '{endpoint}'")
        values = decode(el, "edge")
        for required in (EDGE_TYPE_KEY, TIMESTAMP_KEY):
            if required not in values:
                raise GraphSchemaError(f"{source}: edge '{edge_id}' missing required attribute '{required}'")
        kind = EDGE_ALIASES.get(_label(values.pop(EDGE_TYPE_KEY)))
        if kind is None or source_id in dropped or target_id in dropped:
            dropped.add(edge_id)
            continue
        timestamp = float(values.pop(TIMESTAMP_KEY))
        edges.append(GraphEdge(edge_id, kind, source_id, target_id, timestamp, values))

    if dropped:
        diagnostics.append(f"dropped {len(dropped)} out-of-vocabulary nodes/edges")
        logger.debug(f"{source}: dropped {len(dropped)} out-of-vocabulary nodes/edges")

    page_url = page_url or str(graph_data.get(PAGE_URL_KEY, "") or "")
    try:
        return PageGraph(nodes, edges, page_url, diagnostics)
    except (GraphSchemaError, GraphInvariantError) as e:
        raise type(e)(f"{source}: {e}") from e


def load_graphml_file(path: Path, page_url: Optional[str] = None) -> PageGraph:
    return load_graphml(Path(path).read_bytes(), page_url=page_url, source=str(path))


def validate_graphml_file(path: Path) -> dict:
    """Schema report for one file (used by the `validate` command)"""
    report = {"file": str(path), "ok": False}
    try:
        g = load_graphml_file(path)
    except (OSError, GraphMLParseError, GraphSchemaError, GraphInvariantError) as e:
        report["error"] = str(e)
        return report
    report.update(g.summary())
    report["requests"] = len(resource_requests(g))
    report["diagnostics"] = g.diagnostics
    report["ok"] = True
    return report


# =============================================================================
# graphml writing
# =============================================================================

_NODE_KEYS = [(NODE_TYPE_KEY, "string"), (TAG_NAME_KEY, "string"), (URL_KEY, "string"),
              (FRAME_ID_KEY, "string")]
_EDGE_KEYS = [(EDGE_TYPE_KEY, "string"), (TIMESTAMP_KEY, "double")]


def _attr_type(value: Any) -> str:
    if isinstance(value, bool):
        return "boolean"
    if isinstance(value, int):
        return "long"
    if isinstance(value, float):
        return "double"
    return "string"


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def dump_graphml(g: PageGraph) -> bytes:
    """Serialize a PageGraph with the schema load_graphml expects"""
    ET.register_namespace("", GRAPHML_NS)
    root = ET.Element(f"{{{GRAPHML_NS}}}graphml")

    node_keys = list(_NODE_KEYS)
    extra = sorted({(k, _attr_type(v)) for n in g.nodes.values() for k, v in n.attributes.items()})
    node_keys += [k for k in extra if k[0] not in {name for name, _ in node_keys}]
    edge_keys = list(_EDGE_KEYS)
    extra = sorted({(k, _attr_type(v)) for e in g.edges for k, v in e.attributes.items()})
    edge_keys += [k for k in extra if k[0] not in {name for name, _ in edge_keys}]

    ids: dict[tuple, str] = {}
    for domain, declared in (("graph", [(PAGE_URL_KEY, "string")]), ("node", node_keys), ("edge", edge_keys)):
        for name, attr_type in declared:
            key_id = f"d{len(ids)}"
            ids[domain, name] = key_id
            ET.SubElement(root, f"{{{GRAPHML_NS}}}key", {
                "id": key_id, "for": domain, "attr.name": name, "attr.type": attr_type,
            })

    graph_el = ET.SubElement(root, f"{{{GRAPHML_NS}}}graph", {"id": "G", "edgedefault": "directed"})

    def add_data(parent, domain: str, name: str, value: Any):
        if value is None:
            return
        data = ET.SubElement(parent, f"{{{GRAPHML_NS}}}data", {"key": ids[domain, name]})
        data.text = _format(value)

    if g.page_url:
        add_data(graph_el, "graph", PAGE_URL_KEY, g.page_url)

    for node in g.nodes.values():
        el = ET.SubElement(graph_el, f"{{{GRAPHML_NS}}}node", {"id": node.id})
        add_data(el, "node", NODE_TYPE_KEY, node.kind.value)
        add_data(el, "node", TAG_NAME_KEY, node.tag_name)
        add_data(el, "node", URL_KEY, node.url)
        add_data(el, "node", FRAME_ID_KEY, node.frame_id)
        for name, value in sorted(node.attributes.items()):
            add_data(el, "node", name, value)

    for edge in g.edges:
        el = ET.SubElement(graph_el, f"{{{GRAPHML_NS}}}edge",
                           {"id": edge.id, "source": edge.source, "target": edge.target})
        add_data(el, "edge", EDGE_TYPE_KEY, edge.kind.value)
        add_data(el, "edge", TIMESTAMP_KEY, float(edge.timestamp))
        for name, value in sorted(edge.attributes.items()):
            add_data(el, "edge", name, value)

    ET.indent(root)
    return ET.tostring(root, encoding="utf-8", xml_declaration=True)


class GraphBuilder:
    """Programmatic PageGraph construction; timestamps advance by one per edge"""

    def __init__(self, page_url: str = "", parser_id: str = "parser", frame_id: str = MAIN_FRAME):
        self.page_url = page_url
        self._nodes: list[GraphNode] = []
        self._edges: list[GraphEdge] = []
        self._clock = 0.0
        self.parser_id = parser_id
        self.add_node(GraphNode(parser_id, NodeKind.PARSER, url=page_url or None, frame_id=frame_id))

    def add_node(self, node: GraphNode) -> str:
        self._nodes.append(node)
        return node.id

    def element(self, node_id: str, tag: str, frame_id: str = MAIN_FRAME, **attributes) -> str:
        return self.add_node(GraphNode(node_id, NodeKind.HTML_ELEMENT, tag, None, frame_id, attributes))

    def script(self, node_id: str, url: Optional[str] = None, frame_id: str = MAIN_FRAME) -> str:
        return self.add_node(GraphNode(node_id, NodeKind.SCRIPT, None, url, frame_id))

    def resource(self, node_id: str, url: str) -> str:
        return self.add_node(GraphNode(node_id, NodeKind.RESOURCE, None, url))

    def frame_owner(self, node_id: str, url: Optional[str] = None, child_frame: Optional[str] = None,
                    **attributes) -> str:
        if child_frame:
            attributes[CHILD_FRAME_KEY] = child_frame
        return self.add_node(GraphNode(node_id, NodeKind.FRAME_OWNER, "iframe", url, MAIN_FRAME, attributes))

    def edge(self, kind: EdgeKind, source: str, target: str, timestamp: Optional[float] = None,
             **attributes) -> str:
        if timestamp is None:
            self._clock += 1.0
            timestamp = self._clock
        else:
            self._clock = max(self._clock, timestamp)
        edge_id = f"e{len(self._edges)}"
        self._edges.append(GraphEdge(edge_id, kind, source, target, timestamp, attributes))
        return edge_id

    def place(self, actor: str, node_id: str, parent: Optional[str]) -> None:
        """create + insert `node_id` under `parent` on behalf of `actor`"""
        self.edge(EdgeKind.CREATE_NODE, actor, node_id)
        if parent is None:
            self.edge(EdgeKind.INSERT_NODE, actor, node_id)
        else:
            self.edge(EdgeKind.INSERT_NODE, actor, node_id, parent=parent)
            self.edge(EdgeKind.STRUCTURE, parent, node_id)

    def request(self, requester: str, resource: str, resource_type: str,
                outcome: str = "complete") -> str:
        edge_id = self.edge(EdgeKind.REQUEST_START, requester, resource,
                            **{RESOURCE_TYPE_KEY: resource_type})
        if outcome == "complete":
            self.edge(EdgeKind.REQUEST_COMPLETE, resource, requester)
        elif outcome == "error":
            self.edge(EdgeKind.REQUEST_ERROR, resource, requester)
        return edge_id

    def build(self) -> PageGraph:
        return PageGraph(self._nodes, self._edges, self.page_url)


# =============================================================================
# Attribution queries
# =============================================================================

def _creator(g: PageGraph, node_id: str) -> Optional[str]:
    creates = g.in_edges(node_id, EdgeKind.CREATE_NODE)
    if creates:
        return creates[0].source
    inserts = g.in_edges(node_id, EdgeKind.INSERT_NODE)
    return inserts[0].source if inserts else None


def inserter_of(g: PageGraph, node_id: str) -> Inserter:
    """
    How a node entered the document: by the parser, by a script, or unknown.

    The creator decides; later re-insertions are modifications. Without a
    create edge, the first insert edge decides.
    """
    creators = {e.source for e in g.in_edges(node_id, EdgeKind.CREATE_NODE)}
    if len(creators) > 1:
        raise InsertionConflictError(
            f"node '{node_id}' has conflicting create edges from {sorted(creators)}"
        )
    actor = _creator(g, node_id)
    if actor is None:
        return Inserter(InserterKind.UNKNOWN, reason=f"no create/insert edge into '{node_id}'")
    kind = g.node(actor).kind
    if kind == NodeKind.PARSER:
        return Inserter(InserterKind.PARSER)
    if kind == NodeKind.SCRIPT:
        return Inserter(InserterKind.SCRIPT, actor)
    return Inserter(InserterKind.UNKNOWN, reason=f"'{node_id}' inserted by {kind.value} '{actor}'")


def _parser_created(g: PageGraph, node_id: str) -> bool:
    actor = _creator(g, node_id)
    return actor is not None and g.node(actor).kind == NodeKind.PARSER


def subtree_anchor(g: PageGraph, node_id: str) -> str:
    """Nearest parser-created ancestor (inclusive), or the root of a detached script-built tree"""
    current = node_id
    visited = set()
    while current not in visited:
        visited.add(current)
        if _parser_created(g, current):
            return current
        parent = g.dom_parent(current)
        if parent is None:
            return current
        current = parent
    return current


def inserted_regions(g: PageGraph, script_id: str) -> set[str]:
    """Anchors of the document regions a script inserted nodes into"""
    anchors = set()
    for edge in g.out_edges(script_id, EdgeKind.INSERT_NODE):
        point = g.dom_parent(edge.target, at=edge.timestamp)
        anchors.add(subtree_anchor(g, point if point is not None else edge.target))
    return anchors


def modified_subtree_count(g: PageGraph, script_id: str) -> int:
    """Number of distinct document regions a script inserted nodes into (attribute changes excluded)"""
    return len(inserted_regions(g, script_id))


def scripts_inserted_by(g: PageGraph, script_id: str) -> list[str]:
    """Scripts whose element was directly inserted by `script_id`"""
    found = []
    for node in g.nodes_of_kind(NodeKind.SCRIPT):
        element = g.script_element(node.id)
        if element is not None and _creator(g, element) == script_id:
            found.append(node.id)
    return found


def resource_requests(g: PageGraph) -> list[ResourceRequestRecord]:
    """One record per request_start edge, ordered by timestamp then edge id"""
    records = []
    for edge in g.edges:
        if edge.kind != EdgeKind.REQUEST_START:
            continue
        request_id = edge.attributes.get(REQUEST_ID_KEY)
        completed = failed = False
        final_url = ""
        for response in g.out_edges(edge.target, EdgeKind.REQUEST_COMPLETE, EdgeKind.REQUEST_ERROR):
            if response.target != edge.source or response.timestamp < edge.timestamp:
                continue
            if request_id is not None and response.attributes.get(REQUEST_ID_KEY, request_id) != request_id:
                continue
            if response.kind == EdgeKind.REQUEST_COMPLETE:
                completed = True
                final_url = str(response.attributes.get(RESPONSE_URL_KEY) or "")
            else:
                failed = True
            break
        records.append(ResourceRequestRecord(
            requester=edge.source,
            resource_url=g.node(edge.target).url,
            resource_type=ResourceType.parse(edge.attributes.get(RESOURCE_TYPE_KEY)),
            start_time=edge.timestamp,
            completed=completed,
            edge_id=edge.id,
            resource_node=edge.target,
            failed=failed,
            final_url=final_url,
        ))
    records.sort(key=lambda r: (r.start_time, r.edge_id))
    return records


def _modified_by_script(g: PageGraph, node_id: str) -> bool:
    return any(g.node(e.source).kind == NodeKind.SCRIPT for e in g.in_edges(node_id, *_MODIFICATIONS))


def node_degree_features(g: PageGraph, node_id: str) -> DegreeFeatures:
    """Degree-based structural features of a node and its DOM parent"""
    graph = g.nx_graph
    in_deg, out_deg = graph.in_degree(node_id), graph.out_degree(node_id)
    neighbors = (set(graph.predecessors(node_id)) | set(graph.successors(node_id))) - {node_id}
    connectivity = (sum(graph.degree(v) for v in neighbors) / len(neighbors)) if neighbors else 0.0

    parent = g.dom_parent(node_id)
    if parent is None:
        p_in = p_out = 0
        parent_modified = False
    else:
        p_in, p_out = graph.in_degree(parent), graph.out_degree(parent)
        parent_modified = _modified_by_script(g, parent)

    return DegreeFeatures(
        in_degree=in_deg,
        out_degree=out_deg,
        total_degree=in_deg + out_deg,
        parent_in_degree=p_in,
        parent_out_degree=p_out,
        parent_total_degree=p_in + p_out,
        avg_degree_connectivity=float(connectivity),
        modified_by_script=_modified_by_script(g, node_id),
        parent_modified_by_script=parent_modified,
    )
