import os
import json
from dotenv import load_dotenv

load_dotenv()

# Load settings.json pipeline overrides (takes priority over .env)
def _load_pipeline_settings():
    settings_path = os.path.join(os.path.dirname(__file__), "settings.json")
    if os.path.exists(settings_path):
        try:
            with open(settings_path) as f:
                settings = json.load(f)
                return settings.get("pipeline", {})
        except (OSError, ValueError):
            pass
    return {}

_settings = _load_pipeline_settings()


def _setting(name: str, default: str = "") -> str:
    value = _settings.get(name)
    if value is None:
        value = os.getenv(name, default)
    return str(value)


def _optional_float(name: str):
    raw = _setting(name)
    return float(raw) if raw.strip() else None


def _optional_int(name: str):
    raw = _setting(name)
    return int(raw) if raw.strip() else None


# =============================================================================
# Public Suffix List
# =============================================================================
# Empty = use the snapshot bundled with tldextract (no network access needed).
PSL_PATH = _setting("ADCHAIN_PSL_PATH")

# =============================================================================
# Safe blocking
# =============================================================================
# A script inserting into more than this many document regions is unsafe to block.
SUBTREE_LIMIT = int(_setting("ADCHAIN_SUBTREE_LIMIT", "2"))

# =============================================================================
# Classifier
# =============================================================================
DECISION_THRESHOLD = _optional_float("ADCHAIN_DECISION_THRESHOLD")  # None = pick on CV folds
RECALL_FLOOR = float(_setting("ADCHAIN_RECALL_FLOOR", "0.5"))
N_TREES = int(_setting("ADCHAIN_N_TREES", "100"))
MAX_DEPTH = _optional_int("ADCHAIN_MAX_DEPTH")  # None = grow until pure
CV_FOLDS = int(_setting("ADCHAIN_CV_FOLDS", "5"))

# Probability assumed when a resource has no perceptual sidecar entry
PERCEPTUAL_MISSING_PROBABILITY = 0.5

# IAB standard ad units (width, height)
STANDARD_AD_SIZES = frozenset({
    (120, 60), (120, 90), (120, 240), (120, 600),
    (125, 125), (160, 600), (180, 150), (200, 200),
    (234, 60), (240, 400), (250, 250), (250, 360),
    (300, 50), (300, 100), (300, 250), (300, 600),
    (300, 1050), (320, 50), (320, 100), (320, 480),
    (336, 280), (468, 60), (480, 320), (580, 400),
    (728, 90), (750, 100), (750, 200), (750, 300),
    (88, 31), (930, 180), (970, 66), (970, 90),
    (970, 250), (980, 120), (980, 90), (1024, 768),
})

# =============================================================================
# Pipeline
# =============================================================================
JOBS = int(_setting("ADCHAIN_JOBS", "4"))
SEED = int(_setting("ADCHAIN_SEED", "0"))
LOG_LEVEL = _setting("ADCHAIN_LOG_LEVEL", "INFO").upper()

# Resource types counted in the "current lists" column of the report
LIST_TALLY_TYPES = tuple(
    t.strip() for t in _setting("ADCHAIN_LIST_TALLY_TYPES", "image,subdocument").split(",") if t.strip()
)

GENERATOR_NAME = "adchain"
REPORT_SCHEMA_VERSION = 1

# Crawl directory layout: <region>/<page-id>/{page.graphml, metadata.json, perceptual.json?}
GRAPHML_NAME = "page.graphml"
METADATA_NAME = "metadata.json"
PERCEPTUAL_NAME = "perceptual.json"
GROUND_TRUTH_NAME = "ground_truth.json"
