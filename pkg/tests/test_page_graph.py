import random
from collections import Counter

import pytest

from abp_rules import ResourceType
from page_graph import (
    EdgeKind,
    GraphBuilder,
    GraphEdge,
    GraphInvariantError,
    GraphMLParseError,
    GraphNode,
    GraphSchemaError,
    InserterKind,
    InsertionConflictError,
    NodeKind,
    PageGraph,
    dump_graphml,
    inserter_of,
    load_graphml,
    load_graphml_file,
    modified_subtree_count,
    node_degree_features,
    resource_requests,
    scripts_inserted_by,
    validate_graphml_file,
)
from tests.conftest import AD_IMAGE_URL, LOGO_URL, PAGE_URL, SCRIPT1_URL, SCRIPT2_URL

KEYS = """
  <key id="nt" for="node" attr.name="node type" attr.type="string"/>
  <key id="tn" for="node" attr.name="tag name" attr.type="string"/>
  <key id="u" for="node" attr.name="url" attr.type="string"/>
  <key id="et" for="edge" attr.name="edge type" attr.type="string"/>
  <key id="ts" for="edge" attr.name="timestamp" attr.type="double"/>
"""


def graphml(body: str, keys: str = KEYS) -> bytes:
    return (
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        '<graphml xmlns="http://graphml.graphdrawing.org/xmlns">'
        f"{keys}<graph id=\"G\" edgedefault=\"directed\">{body}</graph></graphml>"
    ).encode()


# =============================================================================
# Loading
# =============================================================================

def test_minimal_graph():
    g = load_graphml(graphml('<node id="p"><data key="nt">parser</data></node>'))
    assert len(g.nodes) == 1
    assert g.edges == []
    assert resource_requests(g) == []


def test_instrumentation_labels_are_accepted():
    body = """
      <node id="p"><data key="nt">parser</data></node>
      <node id="d"><data key="nt">HTML element</data><data key="tn">div</data></node>
      <node id="t"><data key="nt">text node</data></node>
      <node id="x"><data key="nt">unknown thing</data></node>
      <edge id="e1" source="p" target="d"><data key="et">create node</data><data key="ts">1</data></edge>
      <edge id="e2" source="p" target="t"><data key="et">create node</data><data key="ts">2</data></edge>
      <edge id="e3" source="p" target="x"><data key="et">create node</data><data key="ts">3</data></edge>
    """
    g = load_graphml(graphml(body))
    assert g.node("d").kind == NodeKind.HTML_ELEMENT
    assert g.node("t").tag_name == "#text"
    assert "x" not in g.nodes
    assert [e.id for e in g.edges] == ["e1", "e2"]
    assert g.diagnostics


def test_malformed_xml_reports_position():
    with pytest.raises(GraphMLParseError, match="line"):
        load_graphml(b"<graphml><graph><node id='p'></graph>")


def test_missing_required_key_is_named():
    keys = KEYS.replace('<key id="et" for="edge" attr.name="edge type" attr.type="string"/>', "")
    with pytest.raises(GraphSchemaError, match="edge type"):
        load_graphml(graphml('<node id="p"><data key="nt">parser</data></node>', keys))


def test_dangling_edge_is_named():
    body = """
      <node id="p"><data key="nt">parser</data></node>
      <edge id="bad_edge" source="p" target="ghost"><data key="et">create node</data><data key="ts">1</data></edge>
    """
    with pytest.raises(GraphSchemaError, match="bad_edge"):
        load_graphml(graphml(body))


def test_two_parsers_in_one_frame():
    body = """
      <node id="p1"><data key="nt">parser</data></node>
      <node id="p2"><data key="nt">parser</data></node>
    """
    with pytest.raises(GraphInvariantError, match="parser"):
        load_graphml(graphml(body))


def test_decreasing_timestamps_rejected():
    body = """
      <node id="p"><data key="nt">parser</data></node>
      <node id="a"><data key="nt">html element</data><data key="tn">div</data></node>
      <edge id="e1" source="p" target="a"><data key="et">create node</data><data key="ts">5</data></edge>
      <edge id="e2" source="p" target="a"><data key="et">insert node</data><data key="ts">4</data></edge>
    """
    with pytest.raises(GraphInvariantError, match="e2"):
        load_graphml(graphml(body))


def test_edge_endpoint_kinds_checked():
    body = """
      <node id="p"><data key="nt">parser</data></node>
      <node id="a"><data key="nt">html element</data><data key="tn">div</data></node>
      <edge id="e1" source="a" target="p"><data key="et">execute</data><data key="ts">1</data></edge>
    """
    with pytest.raises(GraphInvariantError, match="execute"):
        load_graphml(graphml(body))


def test_element_without_tag_rejected():
    body = """
      <node id="p"><data key="nt">parser</data></node>
      <node id="a"><data key="nt">html element</data></node>
    """
    with pytest.raises(GraphInvariantError, match="'a'"):
        load_graphml(graphml(body))


def test_round_trip_preserves_graph(chain_page, tmp_path):
    g = chain_page.graph
    path = tmp_path / "page.graphml"
    path.write_bytes(dump_graphml(g))
    loaded = load_graphml_file(path)

    def node_bag(graph):
        return Counter((n.kind, n.tag_name, n.url) for n in graph.nodes.values())

    def edge_bag(graph):
        return Counter((e.kind, graph.node(e.source).kind, graph.node(e.target).kind, e.timestamp)
                       for e in graph.edges)

    assert loaded.page_url == PAGE_URL
    assert node_bag(loaded) == node_bag(g)
    assert edge_bag(loaded) == edge_bag(g)
    assert resource_requests(loaded) == resource_requests(g)
    assert modified_subtree_count(loaded, "s1") == 3


def test_validate_graphml_file(chain_page, tmp_path):
    good = tmp_path / "good.graphml"
    good.write_bytes(dump_graphml(chain_page.graph))
    report = validate_graphml_file(good)
    assert report["ok"]
    assert report["requests"] == 4

    bad = tmp_path / "bad.graphml"
    bad.write_bytes(b"<graphml>")
    report = validate_graphml_file(bad)
    assert not report["ok"]
    assert "malformed" in report["error"]


# =============================================================================
# Attribution queries
# =============================================================================

def test_inserter_of_fixture(chain_page):
    g = chain_page.graph
    image = inserter_of(g, chain_page.ad_image)
    assert image.kind == InserterKind.SCRIPT
    assert image.script == chain_page.script2
    assert inserter_of(g, chain_page.script1_element).kind == InserterKind.PARSER
    assert inserter_of(g, chain_page.script2_element).script == chain_page.script1


def test_inserter_of_orphan_is_unknown():
    b = GraphBuilder(PAGE_URL)
    b.element("orphan", "div")
    result = inserter_of(b.build(), "orphan")
    assert result.kind == InserterKind.UNKNOWN
    assert "orphan" in result.reason


def test_conflicting_creators():
    b = GraphBuilder(PAGE_URL)
    b.element("host", "script")
    b.place(b.parser_id, "host", None)
    b.script("s")
    b.edge(EdgeKind.EXECUTE, "host", "s")
    b.element("x", "div")
    b.edge(EdgeKind.CREATE_NODE, b.parser_id, "x")
    b.edge(EdgeKind.CREATE_NODE, "s", "x")
    with pytest.raises(InsertionConflictError):
        inserter_of(b.build(), "x")


def test_reinsertion_keeps_first_creator():
    b = GraphBuilder(PAGE_URL)
    b.element("host", "script")
    b.place(b.parser_id, "host", None)
    b.script("s")
    b.edge(EdgeKind.EXECUTE, "host", "s")
    b.element("img", "img")
    b.place(b.parser_id, "img", "host")
    b.edge(EdgeKind.REMOVE_NODE, "s", "img")
    b.edge(EdgeKind.INSERT_NODE, "s", "img", parent="host")
    g = b.build()
    assert inserter_of(g, "img").kind == InserterKind.PARSER
    assert node_degree_features(g, "img").modified_by_script


def test_modified_subtree_counts(chain_page):
    g = chain_page.graph
    assert modified_subtree_count(g, chain_page.script2) == 1
    assert modified_subtree_count(g, chain_page.script1) == 3


def _region_page(regions: int, per_region: int = 1) -> PageGraph:
    b = GraphBuilder(PAGE_URL)
    b.element("body", "body")
    b.place(b.parser_id, "body", None)
    for r in range(4):
        b.element(f"r{r}", "div")
        b.place(b.parser_id, f"r{r}", "body")
    b.element("host", "script")
    b.place(b.parser_id, "host", "body")
    b.script("s")
    b.edge(EdgeKind.EXECUTE, "host", "s")
    for r in range(regions):
        for k in range(per_region):
            b.element(f"new{r}_{k}", "div")
            b.place("s", f"new{r}_{k}", f"r{r}")
    b.edge(EdgeKind.SET_ATTRIBUTE, "s", "r3", **{"attr name": "class"})
    return b.build()


def test_children_under_one_region_count_once():
    assert modified_subtree_count(_region_page(1, per_region=3), "s") == 1


@pytest.mark.parametrize("regions", [0, 1, 2, 3, 4])
def test_each_new_region_adds_one(regions):
    # attribute-only changes do not count
    assert modified_subtree_count(_region_page(regions), "s") == regions


def test_nested_script_wrappers_share_an_anchor():
    b = GraphBuilder(PAGE_URL)
    b.element("slot", "div")
    b.place(b.parser_id, "slot", None)
    b.element("host", "script")
    b.place(b.parser_id, "host", "slot")
    b.script("s")
    b.edge(EdgeKind.EXECUTE, "host", "s")
    parent = "slot"
    for depth in range(4):
        b.element(f"wrap{depth}", "div")
        b.place("s", f"wrap{depth}", parent)
        parent = f"wrap{depth}"
    assert modified_subtree_count(b.build(), "s") == 1


def test_scripts_inserted_by(chain_page):
    g = chain_page.graph
    assert scripts_inserted_by(g, chain_page.script1) == [chain_page.script2]
    assert scripts_inserted_by(g, chain_page.script2) == []


def test_scripts_inserted_by_parser_only_page():
    b = GraphBuilder(PAGE_URL)
    for i in range(3):
        b.element(f"el{i}", "script")
        b.place(b.parser_id, f"el{i}", None)
        b.script(f"s{i}")
        b.edge(EdgeKind.EXECUTE, f"el{i}", f"s{i}")
    g = b.build()
    assert all(scripts_inserted_by(g, f"s{i}") == [] for i in range(3))


def test_resource_requests_fixture(chain_page):
    records = resource_requests(chain_page.graph)
    assert [r.url for r in records] == [LOGO_URL, SCRIPT1_URL, SCRIPT2_URL, AD_IMAGE_URL]
    assert [r.resource_type for r in records] == [
        ResourceType.IMAGE, ResourceType.SCRIPT, ResourceType.SCRIPT, ResourceType.IMAGE,
    ]
    assert all(r.completed for r in records)
    assert [r.start_time for r in records] == sorted(r.start_time for r in records)


def test_failed_request_record():
    b = GraphBuilder(PAGE_URL)
    b.element("img", "img")
    b.place(b.parser_id, "img", None)
    b.resource("res", "https://cdn.example.org/missing.png")
    b.request("img", "res", "image", outcome="error")
    [record] = resource_requests(b.build())
    assert not record.completed
    assert record.failed


def test_redirected_request_uses_final_url():
    b = GraphBuilder(PAGE_URL)
    b.element("img", "img")
    b.place(b.parser_id, "img", None)
    b.resource("res", "https://t.example.org/r?id=1")
    b.edge(EdgeKind.REQUEST_START, "img", "res", **{"resource type": "image"})
    b.edge(EdgeKind.REQUEST_COMPLETE, "res", "img", **{"response url": "https://img.example.org/final.gif"})
    [record] = resource_requests(b.build())
    assert record.url == "https://img.example.org/final.gif"
    assert record.resource_url == "https://t.example.org/r?id=1"


# =============================================================================
# Degree features
# =============================================================================

def test_isolated_node_degrees():
    b = GraphBuilder(PAGE_URL)
    b.element("lonely", "div")
    features = node_degree_features(b.build(), "lonely")
    assert features.total_degree == 0
    assert features.avg_degree_connectivity == 0.0
    assert not features.modified_by_script


def test_avg_degree_connectivity_is_neighbor_mean():
    nodes = [GraphNode("p", NodeKind.PARSER)]
    nodes += [GraphNode(n, NodeKind.HTML_ELEMENT, "div") for n in ("x", "a", "b", "a1", "a2",
                                                                     "b1", "b2", "b3", "b4")]
    pairs = [("a", "x"), ("a", "a1"), ("a", "a2"), ("b", "x"), ("b", "b1"), ("b", "b2"),
             ("b", "b3"), ("b", "b4")]
    edges = [GraphEdge(f"e{i}", EdgeKind.STRUCTURE, s, t, float(i)) for i, (s, t) in enumerate(pairs)]
    features = node_degree_features(PageGraph(nodes, edges), "x")
    assert features.in_degree == 2
    assert features.out_degree == 0
    assert features.avg_degree_connectivity == pytest.approx(4.0)


def test_fixture_ad_image_features(chain_page):
    features = node_degree_features(chain_page.graph, chain_page.ad_image)
    assert features.modified_by_script
    assert features.parent_modified_by_script
    # create + insert from s2, structure from ad_box, request_complete in; request_start out
    assert features.in_degree == 4
    assert features.out_degree == 1
    assert features.total_degree == 5


# =============================================================================
# Oracle: inserter_of against a scan over every edge
# =============================================================================

def random_page(rng: random.Random) -> PageGraph:
    b = GraphBuilder(PAGE_URL)
    b.element("root", "div")
    b.place(b.parser_id, "root", None)
    placed, actors = ["root"], [b.parser_id]
    for i in range(rng.randint(1, 24)):
        actor, parent = rng.choice(actors), rng.choice(placed)
        if rng.random() < 0.3:
            b.element(f"se{i}", "script")
            b.place(actor, f"se{i}", parent)
            b.script(f"s{i}", f"https://cdn.example.org/s{i}.js")
            b.edge(EdgeKind.EXECUTE, f"se{i}", f"s{i}")
            actors.append(f"s{i}")
            placed.append(f"se{i}")
        elif rng.random() < 0.1:
            b.element(f"n{i}", "div")
        else:
            b.element(f"n{i}", "div")
            b.place(actor, f"n{i}", parent)
            placed.append(f"n{i}")
    return b.build()


def brute_force_inserter(g: PageGraph, node_id: str):
    for edge in g.edges:
        if edge.kind == EdgeKind.CREATE_NODE and edge.target == node_id:
            kind = g.node(edge.source).kind
            return (InserterKind.PARSER, None) if kind == NodeKind.PARSER else (InserterKind.SCRIPT, edge.source)
    return InserterKind.UNKNOWN, None


def test_inserter_matches_edge_scan():
    for seed in range(1000):
        g = random_page(random.Random(seed))
        assert len(g.nodes) <= 50
        for node in g.nodes_of_kind(NodeKind.HTML_ELEMENT):
            result = inserter_of(g, node.id)
            assert (result.kind, result.script) == brute_force_inserter(g, node.id), (seed, node.id)
