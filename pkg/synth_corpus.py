"""
Synthetic crawl generator

Writes a seeded crawl directory with planted ad chains and a ground_truth.json
recording which resources are ads and which scripts are (transitively) unsafe
to block. Output is byte-identical for identical configs.

Every page has three parser-built regions (header, main, footer) and one
parser-built slot per planted ad. Scripts in a chain insert the next element
into their slot; an unsafe script also drops filler into all three regions.
"""

import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, Field, field_validator

import config
from page_graph import EdgeKind, GraphBuilder, PageGraph, dump_graphml

logger = logging.getLogger(__name__)

REGIONS = ("header", "main", "footer")
PLANTED_AD_SIZES = ((300, 250), (728, 90), (160, 600), (320, 50), (300, 600), (970, 250))
BENIGN_SIZES = ((640, 480), (1200, 630), (96, 96), (400, 300))
AD_NETWORKS = 5


class SynthConfig(BaseModel):
    pages: int = Field(5, ge=1)
    ads_per_page: int = Field(2, ge=0)
    # spread this many ads over the pages instead of ads_per_page each
    total_ads: Optional[int] = Field(None, ge=0)
    chain_depth_distribution: dict[int, float] = {0: 1.0, 1: 1.0, 2: 1.0, 3: 1.0}
    unsafe_script_rate: float = Field(0.2, ge=0.0, le=1.0)
    benign_per_page: int = Field(3, ge=0)
    frame_ad_rate: float = Field(0.2, ge=0.0, le=1.0)
    # chance an ad also gets a benign image on its host whose URL extends the ad's URL
    decoy_rate: float = Field(0.5, ge=0.0, le=1.0)
    regions: list[str] = ["synth"]
    seed: int = 0

    @field_validator("chain_depth_distribution")
    @classmethod
    def _check_distribution(cls, value: dict[int, float]) -> dict[int, float]:
        if not value:
            raise ValueError("chain_depth_distribution is empty")
        if any(depth < 0 or weight < 0 for depth, weight in value.items()):
            raise ValueError("chain depths and weights must be >= 0")
        if sum(value.values()) <= 0:
            raise ValueError("chain_depth_distribution weights sum to zero")
        return value

    @field_validator("regions")
    @classmethod
    def _check_regions(cls, value: list[str]) -> list[str]:
        if not value or any(not r or "/" in r for r in value):
            raise ValueError("regions must be non-empty names without '/'")
        return value

    def ads_on_page(self, index: int) -> int:
        if self.total_ads is None:
            return self.ads_per_page
        base, extra = divmod(self.total_ads, self.pages)
        return base + (1 if index < extra else 0)


@dataclass
class PlantedChain:
    terminal_url: str
    resource_type: str
    script_urls: list[str] = field(default_factory=list)  # upstream -> downstream
    unsafe: list[bool] = field(default_factory=list)  # the script's own behaviour

    def effectively_unsafe(self) -> list[bool]:
        """A script is unsafe when it or any script downstream of it is"""
        flags = []
        for k in range(len(self.unsafe)):
            flags.append(any(self.unsafe[k:]))
        return flags

    def to_dict(self) -> dict:
        return {
            "terminal": self.terminal_url,
            "resource_type": self.resource_type,
            "scripts": self.script_urls,
            "unsafe": self.effectively_unsafe(),
        }


@dataclass
class SynthPage:
    region: str
    page_id: str
    page_url: str
    graph: PageGraph
    perceptual: dict[str, float]
    chains: list[PlantedChain]
    benign_urls: list[str]
    decoy_urls: list[str] = field(default_factory=list)

    @property
    def key(self) -> str:
        return f"{self.region}/{self.page_id}"

    def ground_truth(self) -> dict:
        safe, unsafe = [], []
        for chain in self.chains:
            for url, flag in zip(chain.script_urls, chain.effectively_unsafe()):
                (unsafe if flag else safe).append(url)
        return {
            "page_url": self.page_url,
            "ads": [c.terminal_url for c in self.chains],
            "benign": self.benign_urls + self.decoy_urls,
            "decoys": self.decoy_urls,
            "safe_scripts": safe,
            "unsafe_scripts": unsafe,
            "chains": [c.to_dict() for c in self.chains],
        }


def build_page(index: int, region: str, n_ads: int, cfg: SynthConfig, rng: random.Random) -> SynthPage:
    page_url = f"https://www.site{index}.com/"
    b = GraphBuilder(page_url)
    parser = b.parser_id
    perceptual: dict[str, float] = {}

    b.element("html", "html")
    b.place(parser, "html", None)
    b.element("body", "body")
    b.place(parser, "body", "html")
    for name in REGIONS:
        b.element(name, "div", id=name)
        b.place(parser, name, "body")

    def benign_image(name: str, url: str):
        width, height = rng.choice(BENIGN_SIZES)
        img = b.element(name, "img", width=width, height=height)
        b.place(parser, img, "main")
        b.resource(f"{name}_res", url)
        b.request(img, f"{name}_res", "image")
        perceptual[url] = round(rng.uniform(0.0, 0.3), 3)

    benign_urls = []
    for j in range(cfg.benign_per_page):
        url = f"{page_url}img/photo{j}.jpg"
        benign_image(f"photo{j}", url)
        benign_urls.append(url)

    depths = sorted(cfg.chain_depth_distribution)
    weights = [cfg.chain_depth_distribution[d] for d in depths]
    chains, decoy_urls = [], []
    for c in range(n_ads):
        slot = b.element(f"slot{c}", "div", id=f"slot{c}")
        b.place(parser, slot, "main")
        depth = rng.choices(depths, weights)[0]
        network = f"adnet{rng.randrange(AD_NETWORKS)}.com"
        is_frame = rng.random() < cfg.frame_ad_rate
        chain = PlantedChain(
            terminal_url=f"https://ads.{network}/b/p{index}_c{c}.{'html' if is_frame else 'gif'}",
            resource_type="subdocument" if is_frame else "image",
        )

        actor = parser
        for k in range(depth):
            url = f"https://cdn.{network}/s/p{index}_c{c}_l{k}.js"
            el = b.element(f"c{c}_el{k}", "script", src=url)
            b.place(actor, el, slot)
            b.resource(f"c{c}_res{k}", url)
            b.request(el, f"c{c}_res{k}", "script")
            script = b.script(f"c{c}_s{k}", url)
            b.edge(EdgeKind.EXECUTE, el, script)
            unsafe = rng.random() < cfg.unsafe_script_rate
            if unsafe:
                for n, name in enumerate(REGIONS):
                    filler = b.element(f"c{c}_s{k}_fill{n}", "div")
                    b.place(script, filler, name)
            chain.script_urls.append(url)
            chain.unsafe.append(unsafe)
            actor = script

        width, height = rng.choice(PLANTED_AD_SIZES)
        if is_frame:
            ad = b.frame_owner(f"c{c}_ad", chain.terminal_url, width=width, height=height)
        else:
            ad = b.element(f"c{c}_ad", "img", width=width, height=height)
        b.place(actor, ad, slot)
        b.resource(f"c{c}_ad_res", chain.terminal_url)
        b.request(ad, f"c{c}_ad_res", chain.resource_type)
        perceptual[chain.terminal_url] = round(rng.uniform(0.7, 1.0), 3)
        chains.append(chain)

        if rng.random() < cfg.decoy_rate:
            # a longer path under the ad URL, or the ad's file name with a suffix
            url = rng.choice((f"{chain.terminal_url}/preview.jpg", f"{chain.terminal_url}x.jpg"))
            benign_image(f"c{c}_decoy", url)
            decoy_urls.append(url)

    return SynthPage(region, f"page{index:03d}", page_url, b.build(), perceptual, chains, benign_urls, decoy_urls)


def _write_json(path: Path, data):
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def synth_corpus(cfg: SynthConfig, out_dir: Path) -> dict:
    """Write the crawl directory and return the ground truth (also written to ground_truth.json)"""
    out_dir = Path(out_dir)
    rng = random.Random(cfg.seed)
    truth = {"config": cfg.model_dump(mode="json"), "pages": {}}

    for index in range(cfg.pages):
        region = cfg.regions[index % len(cfg.regions)]
        page = build_page(index, region, cfg.ads_on_page(index), cfg, rng)
        page_dir = out_dir / region / page.page_id
        page_dir.mkdir(parents=True, exist_ok=True)
        (page_dir / config.GRAPHML_NAME).write_bytes(dump_graphml(page.graph))
        _write_json(page_dir / config.METADATA_NAME, {"final_url": page.page_url, "region": region, "status": "ok"})
        _write_json(page_dir / config.PERCEPTUAL_NAME, page.perceptual)
        truth["pages"][page.key] = page.ground_truth()

    _write_json(out_dir / config.GROUND_TRUTH_NAME, truth)
    n_ads = sum(len(p["ads"]) for p in truth["pages"].values())
    logger.info(f"Wrote {cfg.pages} synthetic pages with {n_ads} planted ads to {out_dir}")
    return truth


def load_ground_truth(path: Path) -> dict:
    with open(path) as f:
        return json.load(f)
