from dataclasses import dataclass
from pathlib import Path

import pytest

from domains import PublicSuffixTable
from forest import DecisionTree, ForestModel
from page_graph import EdgeKind, GraphBuilder, PageGraph

FIXTURES = Path(__file__).parent / "fixtures"
PSL_FILE = FIXTURES / "public_suffix_list.dat"

PAGE_URL = "https://news.example.al/"
SCRIPT1_URL = "https://cdn.adnet.com/script1.js"
SCRIPT2_URL = "https://cdn.adnet.com/script2.js"
AD_IMAGE_URL = "https://ads.adnet.com/banner.gif?slot=top;size=300x250"
LOGO_URL = "https://news.example.al/static/logo.png"


@dataclass
class RequestChainPage:
    """Page where the parser loads script 1, script 1 inserts script 2, script 2 inserts the ad image"""
    graph: PageGraph
    script1: str = "s1"
    script1_element: str = "s1_el"
    script2: str = "s2"
    script2_element: str = "s2_el"
    ad_image: str = "ad_img"
    logo: str = "logo"


def build_request_chain_page() -> RequestChainPage:
    b = GraphBuilder(PAGE_URL)
    parser = b.parser_id

    b.element("html", "html")
    b.place(parser, "html", None)
    b.element("body", "body")
    b.place(parser, "body", "html")
    for region in ("header", "main", "footer", "ad_slot"):
        b.element(region, "div", id=region)
        b.place(parser, region, "body")

    b.element("logo", "img", width=180, height=40)
    b.place(parser, "logo", "header")
    b.resource("logo_res", LOGO_URL)
    b.request("logo", "logo_res", "image")

    # script 1: parser inserted, touches three regions
    b.element("s1_el", "script", src=SCRIPT1_URL)
    b.place(parser, "s1_el", "main")
    b.resource("s1_res", SCRIPT1_URL)
    b.request("s1_el", "s1_res", "script")
    b.script("s1", SCRIPT1_URL)
    b.edge(EdgeKind.EXECUTE, "s1_el", "s1")

    b.element("s2_el", "script", src=SCRIPT2_URL)
    b.place("s1", "s2_el", "ad_slot")
    b.element("banner_top", "div")
    b.place("s1", "banner_top", "header")
    b.element("banner_bottom", "div")
    b.place("s1", "banner_bottom", "footer")

    # script 2: one div holding the ad image
    b.resource("s2_res", SCRIPT2_URL)
    b.request("s2_el", "s2_res", "script")
    b.script("s2", SCRIPT2_URL)
    b.edge(EdgeKind.EXECUTE, "s2_el", "s2")

    b.element("ad_box", "div")
    b.place("s2", "ad_box", "ad_slot")
    b.element("ad_img", "img", width=300, height=250)
    b.place("s2", "ad_img", "ad_box")
    b.resource("ad_res", AD_IMAGE_URL)
    b.request("ad_img", "ad_res", "image")

    return RequestChainPage(b.build())


@pytest.fixture(scope="session")
def psl() -> PublicSuffixTable:
    return PublicSuffixTable(str(PSL_FILE))


@pytest.fixture
def chain_page() -> RequestChainPage:
    return build_request_chain_page()


def third_party_model() -> ForestModel:
    """One stump: third-party resources are ads"""
    tree = DecisionTree()
    root = tree.add_node(0.5)
    tree.feature[root] = 0
    tree.threshold[root] = 0.5
    tree.left[root] = tree.add_node(0.0)
    tree.right[root] = tree.add_node(1.0)
    return ForestModel([tree], ("is_third_party",), decision_threshold=0.5)
