"""
Ad oracle

Decides which image and frame requests are ads, two ways:

- filter lists: the request is blocked by an existing list
- hybrid classifier: a random forest over contextual features of how the
  resource loaded, plus a perceptual ad probability supplied per page in a
  perceptual.json sidecar (url -> probability)
"""

import json
import logging
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Annotated, Iterable, Optional
from urllib.parse import urlsplit

import numpy as np
from pydantic import Field, TypeAdapter, ValidationError

import config
from abp_rules import RequestContext, ResourceType, RuleSet, match_request
from domains import PublicSuffixTable, host_of
from forest import (
    FeatureMismatchError,
    ForestConfig,
    ForestModel,
    Metrics,
    TrainingError,
    TrainingResult,
    score,
    train,
)
from page_graph import PageGraph, ResourceRequestRecord, node_degree_features, resource_requests

logger = logging.getLogger(__name__)

AD_TYPES = (ResourceType.IMAGE, ResourceType.SUBDOCUMENT)


class FeatureExtractionError(ValueError):
    """The request cannot be placed in its page graph"""


class Label(Enum):
    AD = "ad"
    NOT_AD = "not_ad"


@dataclass(frozen=True)
class FeatureVector:
    """Contextual + perceptual features of one image or frame request"""
    height_px: int
    width_px: int
    is_standard_ad_size: bool
    url_length: int  # characters of the full URL
    is_subdomain: bool
    is_third_party: bool
    has_semicolon_in_query: bool
    resource_type: ResourceType
    perceptual_ad_probability: float
    perceptual_missing: bool
    load_time_ms: float
    node_in_degree: int
    node_out_degree: int
    node_total_degree: int
    modified_by_script: bool
    parent_in_degree: int
    parent_out_degree: int
    parent_total_degree: int
    parent_modified_by_script: bool
    avg_degree_connectivity: float

    def __post_init__(self):
        if self.resource_type not in AD_TYPES:
            raise ValueError(f"resource_type must be image or subdocument, got {self.resource_type.value}")
        if not 0.0 <= self.perceptual_ad_probability <= 1.0:
            raise ValueError(f"perceptual_ad_probability {self.perceptual_ad_probability} outside [0, 1]")
        for name in _COUNT_FIELDS:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def value(self, name: str) -> float:
        if name not in _FEATURE_SET:
            raise FeatureMismatchError(f"unknown feature '{name}'")
        raw = getattr(self, name)
        if name == "resource_type":
            return 1.0 if raw == ResourceType.SUBDOCUMENT else 0.0
        return float(raw)

    def to_array(self, names: Optional[Iterable[str]] = None) -> np.ndarray:
        return np.array([self.value(n) for n in (names or FEATURE_NAMES)], dtype=float)

    def to_dict(self) -> dict:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data["resource_type"] = self.resource_type.value
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureVector":
        missing = [n for n in FEATURE_NAMES if n not in data]
        if missing:
            raise FeatureMismatchError(f"feature vector lacks {', '.join(missing)}")
        values = {n: data[n] for n in FEATURE_NAMES}
        values["resource_type"] = ResourceType(values["resource_type"])
        return cls(**values)


# Feature registry; models store the names they were trained on, so this may grow
FEATURE_NAMES = tuple(f.name for f in fields(FeatureVector))
_FEATURE_SET = frozenset(FEATURE_NAMES)
_COUNT_FIELDS = (
    "height_px", "width_px", "url_length", "load_time_ms",
    "node_in_degree", "node_out_degree", "node_total_degree",
    "parent_in_degree", "parent_out_degree", "parent_total_degree",
    "avg_degree_connectivity",
)


@dataclass(frozen=True)
class LabeledExample:
    features: FeatureVector
    label: Label
    source_page: str
    url: str = ""

    def to_dict(self) -> dict:
        return {
            "features": self.features.to_dict(),
            "label": self.label.value,
            "source_page": self.source_page,
            "url": self.url,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LabeledExample":
        return cls(
            features=FeatureVector.from_dict(data["features"]),
            label=Label(data["label"]),
            source_page=data.get("source_page", ""),
            url=data.get("url", ""),
        )


def save_examples(examples: Iterable[LabeledExample], path: Path) -> int:
    count = 0
    with open(path, "w") as f:
        for example in examples:
            f.write(json.dumps(example.to_dict(), sort_keys=True) + "\n")
            count += 1
    return count


def load_examples(path: Path) -> list[LabeledExample]:
    examples = []
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                examples.append(LabeledExample.from_dict(json.loads(line)))
            except (KeyError, ValueError, TypeError) as e:
                raise ValueError(f"{path}:{line_no}: bad training example: {e}") from e
    return examples


_PerceptualMap = TypeAdapter(dict[str, Annotated[float, Field(ge=0.0, le=1.0)]])


def load_perceptual(path: Optional[Path]) -> dict[str, float]:
    """url -> perceptual ad probability; a missing sidecar is an empty map"""
    if path is None or not Path(path).exists():
        return {}
    try:
        return _PerceptualMap.validate_json(Path(path).read_bytes())
    except ValidationError as e:
        raise ValueError(f"{path}: invalid perceptual sidecar: {e.error_count()} error(s)") from e


# =============================================================================
# Feature extraction
# =============================================================================

def _dimension(value) -> int:
    try:
        return max(0, int(float(str(value).lower().removesuffix("px"))))
    except (TypeError, ValueError):
        return 0


def site_of(url: str, psl: PublicSuffixTable) -> str:
    """eTLD+1 of a URL, or its host when there is none (IP literals)"""
    return psl.registrable_domain_of_url(url) or host_of(url)


def extract_features(g: PageGraph, r: ResourceRequestRecord, perceptual: Optional[float],
                     psl: PublicSuffixTable) -> FeatureVector:
    if r.resource_type not in AD_TYPES:
        raise FeatureExtractionError(f"{r.url} is a {r.resource_type.value} request, not image/subdocument")
    if r.requester not in g.nodes:
        raise FeatureExtractionError(f"requester '{r.requester}' of {r.url} is not in the graph")

    requester = g.node(r.requester)
    width = _dimension(requester.attributes.get("width"))
    height = _dimension(requester.attributes.get("height"))
    url = r.url
    host = host_of(url)
    degrees = node_degree_features(g, r.requester)
    missing = perceptual is None

    return FeatureVector(
        height_px=height,
        width_px=width,
        is_standard_ad_size=(width, height) in config.STANDARD_AD_SIZES,
        url_length=len(url),
        is_subdomain=psl.is_subdomain(host),
        is_third_party=site_of(url, psl) != site_of(g.page_url, psl),
        has_semicolon_in_query=";" in urlsplit(url).query,
        resource_type=r.resource_type,
        perceptual_ad_probability=config.PERCEPTUAL_MISSING_PROBABILITY if missing else float(perceptual),
        perceptual_missing=missing,
        load_time_ms=max(0.0, r.start_time),
        node_in_degree=degrees.in_degree,
        node_out_degree=degrees.out_degree,
        node_total_degree=degrees.total_degree,
        modified_by_script=degrees.modified_by_script,
        parent_in_degree=degrees.parent_in_degree,
        parent_out_degree=degrees.parent_out_degree,
        parent_total_degree=degrees.parent_total_degree,
        parent_modified_by_script=degrees.parent_modified_by_script,
        avg_degree_connectivity=degrees.avg_degree_connectivity,
    )


def ad_candidates(g: PageGraph) -> list[ResourceRequestRecord]:
    """Image and frame requests that did not fail, in request order"""
    return [r for r in resource_requests(g) if r.resource_type in AD_TYPES and not r.failed]


# =============================================================================
# Training and prediction
# =============================================================================

def train_forest(data: list[LabeledExample], forest_config: Optional[ForestConfig] = None) -> TrainingResult:
    """Fit the hybrid classifier; `forest_config.feature_names` restricts the features (ablation)"""
    cfg = forest_config or ForestConfig()
    names = tuple(cfg.feature_names or FEATURE_NAMES)
    unknown = [n for n in names if n not in _FEATURE_SET]
    if unknown:
        raise FeatureMismatchError(f"unknown features: {', '.join(unknown)}")
    if not data:
        raise TrainingError("no training examples")

    X = np.vstack([ex.features.to_array(names) for ex in data])
    y = np.array([1 if ex.label == Label.AD else 0 for ex in data])
    logger.info(f"Training on {len(data)} examples ({int(y.sum())} ads, {len(names)} features)")
    return train(X, y, names, cfg)


@dataclass(frozen=True)
class Prediction:
    probability: float
    verdict: Label

    @property
    def is_ad(self) -> bool:
        return self.verdict == Label.AD


def check_model_features(model: ForestModel) -> ForestModel:
    """Reject models trained on features this extractor does not produce"""
    unknown = [n for n in model.feature_names if n not in _FEATURE_SET]
    if unknown:
        raise FeatureMismatchError(f"model uses unknown features: {', '.join(unknown)}")
    return model


def load_model(path: Path) -> ForestModel:
    return check_model_features(ForestModel.load(path))


def predict(model: ForestModel, fv: FeatureVector) -> Prediction:
    x = fv.to_array(model.feature_names)
    probability = float(model.predict_proba(x)[0])
    verdict = Label.AD if probability >= model.decision_threshold else Label.NOT_AD
    return Prediction(probability, verdict)


def evaluate_perceptual_only(data: list[LabeledExample], threshold: float = 0.5) -> Metrics:
    """Baseline: call an ad whenever the perceptual probability alone reaches the threshold"""
    y = np.array([ex.label == Label.AD for ex in data])
    predicted = np.array([ex.features.perceptual_ad_probability >= threshold for ex in data])
    return score(y, predicted)


# =============================================================================
# Labeling a page
# =============================================================================

def request_context(g: PageGraph, r: ResourceRequestRecord, psl: PublicSuffixTable) -> RequestContext:
    return RequestContext(r.url, site_of(g.page_url, psl), r.resource_type, host_of(g.page_url))


def label_by_lists(rules: RuleSet, g: PageGraph, psl: PublicSuffixTable) -> list[ResourceRequestRecord]:
    """Image/frame requests the lists block (exceptions win), in request order"""
    blocked = []
    for r in ad_candidates(g):
        try:
            req = request_context(g, r, psl)
        except ValueError:
            continue
        if match_request(rules, req).blocked:
            blocked.append(r)
    return blocked


@dataclass
class ClassificationResult:
    ads: list[ResourceRequestRecord] = field(default_factory=list)
    predictions: dict[str, Prediction] = field(default_factory=dict)  # edge id -> prediction
    diagnostics: list[str] = field(default_factory=list)


def classify_new_ads(model: ForestModel, g: PageGraph, already: Iterable[ResourceRequestRecord],
                     perceptual_map: dict[str, float], psl: PublicSuffixTable) -> ClassificationResult:
    """Run the classifier over image/frame requests the lists did not catch"""
    result = ClassificationResult()
    skip = set(already)
    for r in ad_candidates(g):
        if r in skip:
            continue
        perceptual = perceptual_map.get(r.url, perceptual_map.get(r.resource_url))
        try:
            fv = extract_features(g, r, perceptual, psl)
        except (FeatureExtractionError, KeyError) as e:
            result.diagnostics.append(f"features for {r.url}: {e}")
            continue
        prediction = predict(model, fv)
        result.predictions[r.edge_id] = prediction
        if prediction.is_ad:
            result.ads.append(r)
    return result


def build_training_examples(g: PageGraph, ad_urls: set[str], perceptual_map: dict[str, float],
                            psl: PublicSuffixTable, source_page: str = "") -> list[LabeledExample]:
    """Label every image/frame request of a page against a set of known ad URLs"""
    examples = []
    for r in ad_candidates(g):
        perceptual = perceptual_map.get(r.url, perceptual_map.get(r.resource_url))
        try:
            fv = extract_features(g, r, perceptual, psl)
        except FeatureExtractionError as e:
            logger.warning(f"Skipping {r.url}: {e}")
            continue
        label = Label.AD if (r.url in ad_urls or r.resource_url in ad_urls) else Label.NOT_AD
        examples.append(LabeledExample(fv, label, source_page or g.page_url, r.url))
    return examples
