"""
Filter list generation pipeline

Crawl directory layout:

    <crawl>/<region>/<page-id>/page.graphml
    <crawl>/<region>/<page-id>/metadata.json      {"final_url": ..., "status": "ok"}
    <crawl>/<region>/<page-id>/perceptual.json    optional, url -> probability

Per page: label ads by the existing lists, classify the rest, build request
chains for every ad, pick the highest safely blockable script, and generate
rules for the URLs the lists do not already block. Pages run in a worker
pool; the results are merged in crawl order.
"""

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, ValidationError

import config
from abp_rules import (
    NetworkRule,
    RequestContext,
    ResourceType,
    RuleSet,
    dedupe_rules,
    format_list,
    match_request,
)
from ad_oracle import (
    ClassificationResult,
    ad_candidates,
    check_model_features,
    classify_new_ads,
    label_by_lists,
    load_perceptual,
    site_of,
)
from domains import PublicSuffixTable, host_of
from forest import ForestModel
from page_graph import (
    GraphInvariantError,
    GraphMLParseError,
    GraphSchemaError,
    load_graphml_file,
    resource_requests,
)
from request_chains import RequestChain, build_all_chains, chains_to_jsonl
from safe_blocking import BlockPlan, SafetyClassifier, attach_rules, highest_blockable

logger = logging.getLogger(__name__)

DEVIATIONS = [
    "unsafe-script propagation is transitive: a script is unsafe when any script it inserts, "
    "directly or through further scripts, exceeds the subtree limit",
]


class CrawlError(RuntimeError):
    """The crawl directory holds no usable page"""


# =============================================================================
# Crawl ingest
# =============================================================================

class PageMetadata(BaseModel):
    """metadata.json written by the crawler for each page"""
    model_config = ConfigDict(extra="allow")

    final_url: str
    status: str = "ok"  # "ok" or "failed" (non-responsive page)
    region: Optional[str] = None
    crawled_at: Optional[str] = None


@dataclass
class CrawlPage:
    region: str
    page_id: str
    page_dir: Path
    final_url: str
    graphml_path: Path
    perceptual_path: Optional[Path] = None
    metadata: dict = field(default_factory=dict)

    @property
    def key(self) -> str:
        return f"{self.region}/{self.page_id}"


@dataclass
class PageSkip:
    key: str
    reason: str

    def to_dict(self) -> dict:
        return {"page": self.key, "reason": self.reason}


@dataclass
class CrawlManifest:
    root: Path
    pages: list[CrawlPage] = field(default_factory=list)
    skipped: list[PageSkip] = field(default_factory=list)

    @property
    def crawl_id(self) -> str:
        return self.root.name

    @property
    def regions(self) -> list[str]:
        return sorted({p.region for p in self.pages})


def _check_page(page_dir: Path, region: str) -> CrawlPage:
    metadata_path = page_dir / config.METADATA_NAME
    graphml_path = page_dir / config.GRAPHML_NAME
    perceptual_path = page_dir / config.PERCEPTUAL_NAME
    if not metadata_path.exists():
        raise ValueError(f"missing {config.METADATA_NAME}")
    if not graphml_path.exists():
        raise ValueError(f"missing {config.GRAPHML_NAME}")

    try:
        metadata = PageMetadata.model_validate_json(metadata_path.read_bytes())
    except ValidationError as e:
        raise ValueError(f"invalid {config.METADATA_NAME}: {e.error_count()} error(s)") from e
    if metadata.status != "ok":
        raise ValueError(f"page did not load (status {metadata.status!r})")

    load_graphml_file(graphml_path, metadata.final_url)
    perceptual = perceptual_path if perceptual_path.exists() else None
    load_perceptual(perceptual)

    return CrawlPage(
        region=region,
        page_id=page_dir.name,
        page_dir=page_dir,
        final_url=metadata.final_url,
        graphml_path=graphml_path,
        perceptual_path=perceptual,
        metadata=metadata.model_dump(exclude_none=True),
    )


def ingest_crawl(crawl_dir: Path) -> CrawlManifest:
    """
    Validate every page of a crawl directory.

    Unreadable pages are listed as skipped with the reason. Raises CrawlError
    only when no page validates.
    """
    root = Path(crawl_dir)
    if not root.is_dir():
        raise CrawlError(f"crawl directory not found: {root}")

    manifest = CrawlManifest(root)
    for region_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for page_dir in sorted(p for p in region_dir.iterdir() if p.is_dir()):
            key = f"{region_dir.name}/{page_dir.name}"
            try:
                manifest.pages.append(_check_page(page_dir, region_dir.name))
            except (OSError, ValueError, GraphMLParseError, GraphSchemaError, GraphInvariantError) as e:
                logger.warning(f"Skipping {key}: {e}")
                manifest.skipped.append(PageSkip(key, str(e)))

    if not manifest.pages:
        raise CrawlError(f"no valid pages in {root} ({len(manifest.skipped)} skipped)")
    logger.info(f"Ingested {len(manifest.pages)} pages from {root} ({len(manifest.skipped)} skipped)")
    return manifest


# =============================================================================
# Run configuration
# =============================================================================

@dataclass
class PipelineConfig:
    subtree_limit: int = config.SUBTREE_LIMIT
    # overrides the model's own threshold when set
    decision_threshold: Optional[float] = config.DECISION_THRESHOLD
    jobs: int = config.JOBS
    list_tally_types: tuple = config.LIST_TALLY_TYPES
    title: str = "Regional ad rules"
    generated_on: Optional[date] = None

    def to_dict(self) -> dict:
        return {
            "subtree_limit": self.subtree_limit,
            "decision_threshold": self.decision_threshold,
            "jobs": self.jobs,
            "list_tally_types": list(self.list_tally_types),
            "title": self.title,
            "generated_on": self.generated_on.isoformat() if self.generated_on else None,
        }


# =============================================================================
# Per-page processing
# =============================================================================

@dataclass
class PageResult:
    page: CrawlPage
    # image and frame candidates, url -> resource type
    candidate_types: dict = field(default_factory=dict)
    list_tally_urls: set = field(default_factory=set)
    list_ad_urls: set = field(default_factory=set)
    classifier_only_urls: set = field(default_factory=set)
    chain_new_urls: set = field(default_factory=set)
    protected_urls: set = field(default_factory=set)
    rules: list[NetworkRule] = field(default_factory=list)
    chains: list[RequestChain] = field(default_factory=list)
    plans: list[BlockPlan] = field(default_factory=list)
    diagnostics: list[str] = field(default_factory=list)
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "page": self.page.key,
            "final_url": self.page.final_url,
            "ads_by_lists": len(self.list_ad_urls),
            "ads_by_classifier_only": len(self.classifier_only_urls),
            "chain_new_urls": sorted(self.chain_new_urls),
            "rules": [r.to_text() for r in self.rules],
            "plans": [p.to_dict() for p in self.plans],
            "diagnostics": self.diagnostics,
            "error": self.error,
        }


def _blocked(rules: RuleSet, url: str, source_origin: str, resource_type: ResourceType,
             source_host: str = "") -> bool:
    try:
        return match_request(rules, RequestContext(url, source_origin, resource_type, source_host)).blocked
    except ValueError:
        return False


def process_page(page: CrawlPage, lists: RuleSet, model: Optional[ForestModel],
                 psl: PublicSuffixTable, run_config: PipelineConfig) -> PageResult:
    result = PageResult(page)
    g = load_graphml_file(page.graphml_path, page.final_url)
    result.diagnostics.extend(g.diagnostics)
    origin, page_host = site_of(g.page_url, psl), host_of(g.page_url)
    tally_types = {ResourceType.parse(t) for t in run_config.list_tally_types}

    for r in resource_requests(g):
        if r.failed:
            continue
        try:
            verdict = match_request(lists, RequestContext(r.url, origin, r.resource_type, page_host))
        except ValueError:
            continue
        if verdict.excepted:
            result.protected_urls.add(r.url)
        elif verdict.blocked and r.resource_type in tally_types:
            result.list_tally_urls.add(r.url)

    candidates = ad_candidates(g)
    result.candidate_types = {r.url: r.resource_type for r in candidates}

    listed = label_by_lists(lists, g, psl)
    result.list_ad_urls = {r.url for r in listed}

    classified = ClassificationResult()
    if model is not None:
        perceptual = load_perceptual(page.perceptual_path)
        classified = classify_new_ads(model, g, listed, perceptual, psl)
        result.diagnostics.extend(classified.diagnostics)
    result.classifier_only_urls = {r.url for r in classified.ads} - result.list_ad_urls

    targets = sorted(listed + classified.ads, key=lambda r: (r.start_time, r.edge_id))
    result.chains = build_all_chains(g, targets)

    safety = SafetyClassifier(g, run_config.subtree_limit)
    for chain in result.chains:
        plan = highest_blockable(g, chain, safety)
        types = [chain.terminal.resource_type] + ([ResourceType.SCRIPT] if plan.highest_safe_script_url else [])
        new_urls = [url for url, rtype in zip(plan.target_urls(), types)
                    if not _blocked(lists, url, origin, rtype, page_host)]
        attach_rules(plan, psl, new_urls)
        result.chain_new_urls.update(new_urls)
        result.rules.extend(plan.generated_rules)
        result.diagnostics.extend(plan.diagnostics)
        result.plans.append(plan)

    logger.info(
        f"{page.key}: {len(result.list_ad_urls)} listed, {len(result.classifier_only_urls)} classifier-only, "
        f"{len(result.chain_new_urls)} new URLs"
    )
    return result


def _process_page_isolated(page: CrawlPage, lists: RuleSet, model: Optional[ForestModel],
                           psl: PublicSuffixTable, run_config: PipelineConfig) -> PageResult:
    try:
        return process_page(page, lists, model, psl, run_config)
    except Exception as e:
        logger.error(f"{page.key} failed: {e}")
        return PageResult(page, error=f"{type(e).__name__}: {e}")


# =============================================================================
# Report
# =============================================================================

@dataclass
class RegionCounts:
    pages: int = 0
    unique_images: int = 0
    unique_frames: int = 0
    list_ad_images: int = 0
    list_ad_frames: int = 0
    ads_by_lists: int = 0
    classifier_only_images: int = 0
    classifier_only_frames: int = 0
    chain_new_urls: int = 0
    rules_emitted: int = 0

    @property
    def unique_images_frames(self) -> int:
        return self.unique_images + self.unique_frames

    @property
    def list_ad_images_frames(self) -> int:
        return self.list_ad_images + self.list_ad_frames

    @property
    def ads_by_classifier_only(self) -> int:
        return self.classifier_only_images + self.classifier_only_frames

    @property
    def delta_percent(self) -> Optional[float]:
        """chain_new_urls relative to ads_by_lists; None when the lists found nothing"""
        if not self.ads_by_lists:
            return None
        return self.chain_new_urls / self.ads_by_lists * 100.0

    @property
    def list_share_percent(self) -> Optional[float]:
        return _share(self.list_ad_images_frames, self.unique_images_frames)

    @property
    def image_list_share_percent(self) -> Optional[float]:
        return _share(self.list_ad_images, self.unique_images)

    @property
    def frame_list_share_percent(self) -> Optional[float]:
        return _share(self.list_ad_frames, self.unique_frames)

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        for name in _DERIVED_COUNTS:
            data[name] = getattr(self, name)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "RegionCounts":
        return cls(**{f.name: data.get(f.name, 0) for f in dataclasses.fields(cls)})


_DERIVED_COUNTS = ("unique_images_frames", "list_ad_images_frames", "ads_by_classifier_only",
                   "delta_percent", "list_share_percent", "image_list_share_percent",
                   "frame_list_share_percent")


def _share(part: int, whole: int) -> Optional[float]:
    return part / whole * 100.0 if whole else None


class RegionCountsModel(BaseModel):
    pages: int = 0
    unique_images: int = 0
    unique_frames: int = 0
    list_ad_images: int = 0
    list_ad_frames: int = 0
    ads_by_lists: int = 0
    classifier_only_images: int = 0
    classifier_only_frames: int = 0
    chain_new_urls: int = 0
    rules_emitted: int = 0
    unique_images_frames: int = 0
    list_ad_images_frames: int = 0
    ads_by_classifier_only: int = 0
    delta_percent: Optional[float] = None
    list_share_percent: Optional[float] = None
    image_list_share_percent: Optional[float] = None
    frame_list_share_percent: Optional[float] = None


class ReportDocument(BaseModel):
    """report.json"""
    schema_version: int = config.REPORT_SCHEMA_VERSION
    generator: str = config.GENERATOR_NAME
    crawl_id: str = ""
    config: dict = {}
    regions: dict[str, RegionCountsModel] = {}
    totals: RegionCountsModel = RegionCountsModel()
    pages: list[dict] = []
    skipped_pages: list[dict] = []
    deviations: list[str] = []


@dataclass
class RunReport:
    crawl_id: str = ""
    regions: dict[str, RegionCounts] = field(default_factory=dict)
    totals: RegionCounts = field(default_factory=RegionCounts)
    pages: list[dict] = field(default_factory=list)
    skipped_pages: list[PageSkip] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    deviations: list[str] = field(default_factory=lambda: list(DEVIATIONS))
    # (page key, chain); exported separately as JSON lines
    chains: list[tuple[str, RequestChain]] = field(default_factory=list)

    @property
    def has_skips(self) -> bool:
        return bool(self.skipped_pages)

    def chains_jsonl(self) -> str:
        return "".join(chains_to_jsonl([chain], page) for page, chain in self.chains)

    def to_document(self) -> ReportDocument:
        return ReportDocument(
            crawl_id=self.crawl_id,
            config=self.config,
            regions={name: RegionCountsModel(**c.to_dict()) for name, c in self.regions.items()},
            totals=RegionCountsModel(**self.totals.to_dict()),
            pages=self.pages,
            skipped_pages=[s.to_dict() for s in self.skipped_pages],
            deviations=self.deviations,
        )

    @classmethod
    def from_document(cls, doc: ReportDocument) -> "RunReport":
        return cls(
            crawl_id=doc.crawl_id,
            regions={name: RegionCounts.from_dict(c.model_dump()) for name, c in doc.regions.items()},
            totals=RegionCounts.from_dict(doc.totals.model_dump()),
            pages=doc.pages,
            skipped_pages=[PageSkip(s["page"], s["reason"]) for s in doc.skipped_pages],
            config=doc.config,
            deviations=doc.deviations,
        )


def _percent(value: Optional[float]) -> str:
    return "—" if value is None else f"{value:.1f}%"


TABLE_COLUMNS = ("Region", "Pages", "Images", "Listed images", "Frames", "Listed frames",
                 "Current lists", "Classifier images", "Classifier frames", "∪ Chains", "Δ", "Rules")


def _listed(count: int, share: Optional[float]) -> str:
    return f"{count} ({_percent(share)})"


def _row(name: str, c: RegionCounts) -> list[str]:
    return [name, str(c.pages),
            str(c.unique_images), _listed(c.list_ad_images, c.image_list_share_percent),
            str(c.unique_frames), _listed(c.list_ad_frames, c.frame_list_share_percent),
            str(c.ads_by_lists), str(c.classifier_only_images), str(c.classifier_only_frames),
            str(c.chain_new_urls), _percent(c.delta_percent), str(c.rules_emitted)]


def emit_report(report: RunReport, fmt: str = "json") -> bytes:
    """Serialize a report as versioned JSON or as a per-region table with a totals row"""
    if fmt == "json":
        return report.to_document().model_dump_json(indent=2).encode("utf-8") + b"\n"
    if fmt != "table":
        raise ValueError(f"unknown report format {fmt!r}")

    rows = [list(TABLE_COLUMNS)]
    rows += [_row(name, counts) for name, counts in report.regions.items()]
    rows.append(_row("Total", report.totals))
    widths = [max(len(r[i]) for r in rows) for i in range(len(TABLE_COLUMNS))]
    lines = []
    for i, row in enumerate(rows):
        cells = [row[0].ljust(widths[0])] + [cell.rjust(w) for cell, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if i == 0 or i == len(rows) - 2:
            lines.append("  ".join("-" * w for w in widths))
    return ("\n".join(lines) + "\n").encode("utf-8")


# =============================================================================
# Run
# =============================================================================

@dataclass
class GeneratedList:
    rules: list[NetworkRule]
    title: str
    crawl_id: str
    generated_on: Optional[date] = None

    def to_text(self) -> str:
        return format_list(self.rules, self.title, config.GENERATOR_NAME, self.crawl_id, self.generated_on)

    def write(self, path: Path):
        Path(path).write_text(self.to_text())
        logger.info(f"Wrote {len(self.rules)} rules to {path}")


def _union(results: list[PageResult], name: str) -> set:
    return set().union(*(getattr(r, name) for r in results))


def _of_type(urls: set, types: dict, rtype: ResourceType) -> int:
    return sum(1 for url in urls if types.get(url) == rtype)


def _region_counts(page_results: list[PageResult]) -> RegionCounts:
    types = {}
    for r in page_results:
        types.update(r.candidate_types)
    listed = _union(page_results, "list_ad_urls")
    classifier_only = _union(page_results, "classifier_only_urls") - listed
    return RegionCounts(
        pages=len(page_results),
        unique_images=_of_type(set(types), types, ResourceType.IMAGE),
        unique_frames=_of_type(set(types), types, ResourceType.SUBDOCUMENT),
        list_ad_images=_of_type(listed, types, ResourceType.IMAGE),
        list_ad_frames=_of_type(listed, types, ResourceType.SUBDOCUMENT),
        ads_by_lists=len(_union(page_results, "list_tally_urls")),
        classifier_only_images=_of_type(classifier_only, types, ResourceType.IMAGE),
        classifier_only_frames=_of_type(classifier_only, types, ResourceType.SUBDOCUMENT),
        chain_new_urls=len(_union(page_results, "chain_new_urls")),
        rules_emitted=len(dedupe_rules(rule for r in page_results for rule in r.rules)),
    )


def _drop_protected(result: PageResult, protected: list[str]) -> list[NetworkRule]:
    """Rules that would block a crawl URL an existing exception rule protects are dropped"""
    kept = []
    for rule in dedupe_rules(result.rules):
        hit = next((url for url in protected if rule.url_matches(url)), None)
        if hit is not None:
            result.diagnostics.append(f"dropped {rule.to_text()}: matches excepted {hit}")
            continue
        kept.append(rule)
    return kept


def run_pipeline(manifest: CrawlManifest, lists: RuleSet, model: Optional[ForestModel],
                 run_config: Optional[PipelineConfig] = None,
                 psl: Optional[PublicSuffixTable] = None) -> tuple[GeneratedList, RunReport]:
    """
    Process every page of the manifest and merge the results.

    Per-page failures are isolated: the page is reported as skipped and the
    run completes with partial coverage.
    A model over features the extractor does not produce raises
    FeatureMismatchError before any page runs.
    """
    run_config = run_config or PipelineConfig()
    psl = psl or PublicSuffixTable.from_config()
    if model is not None:
        check_model_features(model)
    if model is not None and run_config.decision_threshold is not None:
        model = dataclasses.replace(model, decision_threshold=run_config.decision_threshold)

    logger.info(f"Processing {len(manifest.pages)} pages with {run_config.jobs} workers")
    with ThreadPoolExecutor(max_workers=max(1, run_config.jobs)) as pool:
        futures = [pool.submit(_process_page_isolated, page, lists, model, psl, run_config)
                   for page in manifest.pages]
        results = [f.result() for f in futures]

    report = RunReport(crawl_id=manifest.crawl_id, config=run_config.to_dict())
    report.skipped_pages = list(manifest.skipped)
    protected = sorted(_union(results, "protected_urls"))

    per_region: dict[str, list[PageResult]] = {}
    all_rules: list[NetworkRule] = []
    for result in results:
        if result.error:
            report.skipped_pages.append(PageSkip(result.page.key, result.error))
            continue
        result.rules = _drop_protected(result, protected)
        per_region.setdefault(result.page.region, []).append(result)
        all_rules.extend(result.rules)
        report.chains.extend((result.page.key, chain) for chain in result.chains)

    for region in sorted(per_region):
        page_results = per_region[region]
        report.regions[region] = _region_counts(page_results)
        report.pages.extend(r.to_dict() for r in page_results)

    rules = dedupe_rules(all_rules)
    totals = RegionCounts()
    for counts in report.regions.values():
        for f in dataclasses.fields(RegionCounts):
            setattr(totals, f.name, getattr(totals, f.name) + getattr(counts, f.name))
    totals.rules_emitted = len(rules)
    report.totals = totals

    logger.info(
        f"Run complete: {totals.ads_by_lists} listed, {totals.chain_new_urls} new URLs, "
        f"{len(rules)} rules, {len(report.skipped_pages)} pages skipped"
    )
    return GeneratedList(rules, run_config.title, manifest.crawl_id, run_config.generated_on), report
