"""
AdBlock Plus network rules

Parses filter lists (EasyList distribution format), matches requests against
them, and generates right-rooted rules for ad-serving URLs.

Supported dialect: `||` and `|` anchors, trailing `|`, `^` separator, `*`
wildcard, `@@` exceptions, and the options image / subdocument / script /
third-party / domain= (plus the other ABP resource types, which map onto the
`other` request type). Cosmetic rules and comments are counted, not stored.
"""

import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field, replace
from datetime import date
from enum import Enum
from typing import Iterable, Optional
from urllib.parse import urlsplit

from domains import PublicSuffixTable, host_of, is_ip_host

logger = logging.getLogger(__name__)


class ResourceType(Enum):
    IMAGE = "image"
    SUBDOCUMENT = "subdocument"
    SCRIPT = "script"
    OTHER = "other"

    @classmethod
    def parse(cls, value: Optional[str]) -> "ResourceType":
        """Map request type labels (ours and the instrumentation's) onto a ResourceType"""
        label = (value or "").strip().lower().replace(" ", "_")
        return _RESOURCE_TYPE_ALIASES.get(label, cls.OTHER)


_RESOURCE_TYPE_ALIASES = {
    "image": ResourceType.IMAGE,
    "img": ResourceType.IMAGE,
    "imageset": ResourceType.IMAGE,
    "subdocument": ResourceType.SUBDOCUMENT,
    "sub_frame": ResourceType.SUBDOCUMENT,
    "iframe": ResourceType.SUBDOCUMENT,
    "frame": ResourceType.SUBDOCUMENT,
    "document": ResourceType.SUBDOCUMENT,
    "script": ResourceType.SCRIPT,
}


class AnchorType(Enum):
    NONE = "none"
    DOMAIN = "domain_anchor"
    LEFT = "left_anchor"


class TokenKind(Enum):
    LITERAL = "literal"
    WILDCARD = "wildcard"
    SEPARATOR = "separator"


class VerdictKind(Enum):
    BLOCKED = "blocked"
    EXCEPTED = "excepted"
    UNMATCHED = "unmatched"


class RuleParseError(ValueError):
    """A line that looks like a network rule but uses syntax outside the supported subset"""


class RuleGenerationError(ValueError):
    """A URL that cannot be turned into a rule (IP host, no registrable domain, ...)"""


@dataclass(frozen=True)
class PatternToken:
    kind: TokenKind
    text: str = ""

    def to_text(self) -> str:
        if self.kind == TokenKind.WILDCARD:
            return "*"
        if self.kind == TokenKind.SEPARATOR:
            return "^"
        return self.text


# ABP option name -> request type it constrains
TYPE_OPTIONS = {
    "image": ResourceType.IMAGE,
    "subdocument": ResourceType.SUBDOCUMENT,
    "script": ResourceType.SCRIPT,
    "stylesheet": ResourceType.OTHER,
    "object": ResourceType.OTHER,
    "object-subrequest": ResourceType.OTHER,
    "xmlhttprequest": ResourceType.OTHER,
    "media": ResourceType.OTHER,
    "font": ResourceType.OTHER,
    "ping": ResourceType.OTHER,
    "websocket": ResourceType.OTHER,
    "webrtc": ResourceType.OTHER,
    "other": ResourceType.OTHER,
}

OPTION_ALIASES = {
    "frame": "subdocument",
    "xhr": "xmlhttprequest",
    "css": "stylesheet",
    "3p": "third-party",
    "1p": "~third-party",
    "first-party": "~third-party",
    "~first-party": "third-party",
}

# Accepted but without effect on matching
IGNORED_OPTIONS = frozenset({"important", "collapse", "~collapse", "donottrack"})

_COSMETIC_RE = re.compile(r"#@?[?$%]?#")
_URL_TOKEN_RE = re.compile(r"[a-z0-9%]+")
_SEPARATOR_CLASS = r"[^a-zA-Z0-9_.%-]"
_DOMAIN_ANCHOR_PREFIX = r"[a-zA-Z][a-zA-Z0-9+.\-]*:(?://)?(?:[^/?#@]*@)?(?:[^/?#@:]*\.)?"
RIGHT_ROOTED_DIRECTIVE = "! Right-rooted: true"


@dataclass(frozen=True)
class RuleOptions:
    """Parsed `$` options of a network rule"""
    include_types: frozenset = frozenset()
    exclude_types: frozenset = frozenset()
    third_party: Optional[bool] = None
    include_domains: frozenset = frozenset()
    exclude_domains: frozenset = frozenset()
    match_case: bool = False
    # canonical option texts, used for serialization
    texts: tuple = ()

    @property
    def empty(self) -> bool:
        return not self.texts

    def type_matches(self, resource_type: ResourceType) -> bool:
        if self.include_types and resource_type not in self.include_types:
            return False
        return resource_type not in self.exclude_types

    def domain_matches(self, source_origin: str, source_host: str = "") -> bool:
        """
        domain= check against the requesting frame.

        With the frame host known, an entry applies to that host and its
        subdomains only. Without it, only the frame's eTLD+1 is available and
        an entry applies when either side is a subdomain of the other.
        """
        if not self.include_domains and not self.exclude_domains:
            return True
        host, origin = source_host.lower(), source_origin.lower()
        if any(_domain_applies(d, host, origin) for d in self.exclude_domains):
            return False
        if self.include_domains:
            return any(_domain_applies(d, host, origin) for d in self.include_domains)
        return True


def _is_subdomain_or_self(host: str, domain: str) -> bool:
    return host == domain or host.endswith("." + domain)


def _domain_applies(domain: str, host: str, origin: str) -> bool:
    if host:
        return _is_subdomain_or_self(host, domain)
    if not origin:
        return False
    return _is_subdomain_or_self(origin, domain) or domain.endswith("." + origin)


@dataclass(frozen=True)
class RequestContext:
    """Inputs ABP option matching needs for one request"""
    url: str
    source_origin: str
    resource_type: ResourceType = ResourceType.OTHER
    # host of the requesting frame, "" when only its eTLD+1 is known
    source_host: str = ""

    def __post_init__(self):
        if not host_of(self.url):
            raise ValueError(f"Request URL must be absolute with a host: {self.url!r}")

    @property
    def host(self) -> str:
        return host_of(self.url)

    @property
    def is_third_party(self) -> Optional[bool]:
        """None when the requesting origin is unknown"""
        origin = self.source_origin.lower()
        if not origin:
            return None
        host = self.host
        return not (host == origin or host.endswith("." + origin))


@dataclass(eq=False)
class NetworkRule:
    """An individual AdBlock Plus network rule"""
    raw_text: str
    is_exception: bool
    anchor: AnchorType
    right_anchored: bool
    pattern: tuple
    options: RuleOptions = field(default_factory=RuleOptions)
    # position in the RuleSet (lower = earlier in the source lists)
    position: int = 0
    source_name: str = ""
    # generated rules: the pattern must cover the whole URL up to its query
    right_rooted: bool = False

    def __post_init__(self):
        self._regex = self._compile()

    def __repr__(self) -> str:
        return f"NetworkRule({self.to_text()!r})"

    def _compile(self) -> re.Pattern:
        parts = []
        for tok in self.pattern:
            if tok.kind == TokenKind.WILDCARD:
                parts.append(".*")
            elif tok.kind == TokenKind.SEPARATOR:
                parts.append(f"(?:{_SEPARATOR_CLASS}|$)")
            else:
                parts.append(re.escape(tok.text))
        body = "".join(parts)
        if self.anchor == AnchorType.DOMAIN:
            body = "^" + _DOMAIN_ANCHOR_PREFIX + body
        elif self.anchor == AnchorType.LEFT:
            body = "^" + body
        if self.right_anchored or self.right_rooted:
            body += "$"
        flags = re.DOTALL
        if not self.options.match_case:
            flags |= re.IGNORECASE
        return re.compile(body, flags)

    def pattern_text(self) -> str:
        return "".join(tok.to_text() for tok in self.pattern)

    def to_text(self) -> str:
        """Canonical serialization; parse_rule(rule.to_text()) yields an equivalent rule"""
        text = "@@" if self.is_exception else ""
        if self.anchor == AnchorType.DOMAIN:
            text += "||"
        elif self.anchor == AnchorType.LEFT:
            text += "|"
        text += self.pattern_text()
        if self.right_anchored:
            text += "|"
        if not self.options.empty:
            text += "$" + ",".join(self.options.texts)
        return text

    def canonical_key(self) -> str:
        """Identity used for de-duplication (case-folded unless $match-case)"""
        text = self.to_text()
        return text if self.options.match_case else text.lower()

    def url_matches(self, url: str) -> bool:
        if self.right_rooted:
            url = _strip_query(url)
        return self._regex.search(url) is not None

    def options_match(self, req: RequestContext) -> bool:
        opts = self.options
        if not opts.type_matches(req.resource_type):
            return False
        if opts.third_party is not None and req.is_third_party is not opts.third_party:
            return False
        return opts.domain_matches(req.source_origin, req.source_host)

    def index_token(self) -> Optional[str]:
        """Longest literal run guaranteed to appear as a whole URL token in any matching URL"""
        best = None
        n = len(self.pattern)
        for i, tok in enumerate(self.pattern):
            if tok.kind != TokenKind.LITERAL:
                continue
            text = tok.text.lower()
            left_open = i > 0 and self.pattern[i - 1].kind == TokenKind.WILDCARD
            left_bounded_at_start = i > 0 or self.anchor != AnchorType.NONE
            right_open = i + 1 < n and self.pattern[i + 1].kind == TokenKind.WILDCARD
            right_bounded_at_end = i + 1 < n or self.right_anchored
            for m in _URL_TOKEN_RE.finditer(text):
                if m.start() == 0 and (left_open or not left_bounded_at_start):
                    continue
                if m.end() == len(text) and (right_open or not right_bounded_at_end):
                    continue
                if best is None or len(m.group()) > len(best):
                    best = m.group()
        return best


def _strip_query(url: str) -> str:
    return url.split("#", 1)[0].split("?", 1)[0]


def matches(rule: NetworkRule, req: RequestContext) -> bool:
    """True iff the rule's pattern, anchors and options all match the request"""
    return rule.url_matches(req.url) and rule.options_match(req)


# =============================================================================
# Parsing
# =============================================================================

def _parse_options(options_text: str) -> RuleOptions:
    include_types, exclude_types = set(), set()
    include_domains, exclude_domains = set(), set()
    third_party = None
    match_case = False
    texts = []

    for raw in options_text.split(","):
        opt = raw.strip().lower()
        if not opt:
            continue
        opt = OPTION_ALIASES.get(opt, opt)
        if opt.startswith("domain="):
            domains = [d.strip() for d in opt[len("domain="):].split("|") if d.strip()]
            if not domains:
                raise RuleParseError("empty domain= option")
            for d in domains:
                if d.startswith("~"):
                    exclude_domains.add(d[1:])
                else:
                    include_domains.add(d)
            continue
        negated = opt.startswith("~")
        name = opt[1:] if negated else opt
        if name in TYPE_OPTIONS:
            (exclude_types if negated else include_types).add(TYPE_OPTIONS[name])
            texts.append(opt)
        elif name == "third-party":
            third_party = not negated
            texts.append(opt)
        elif name == "match-case" and not negated:
            match_case = True
            texts.append(opt)
        elif opt in IGNORED_OPTIONS:
            texts.append(opt)
        else:
            raise RuleParseError(f"unsupported option '{raw.strip()}'")

    if include_domains or exclude_domains:
        entries = sorted(include_domains) + sorted("~" + d for d in exclude_domains)
        texts.append("domain=" + "|".join(entries))

    return RuleOptions(
        include_types=frozenset(include_types),
        exclude_types=frozenset(exclude_types),
        third_party=third_party,
        include_domains=frozenset(include_domains),
        exclude_domains=frozenset(exclude_domains),
        match_case=match_case,
        texts=tuple(sorted(set(texts), key=_option_sort_key)),
    )


def _option_sort_key(text: str) -> tuple:
    return (text.startswith("domain="), text.lstrip("~"), text.startswith("~"))


def _tokenize(pattern: str) -> tuple:
    tokens = []
    literal = []
    for ch in pattern:
        if ch in "*^":
            if literal:
                tokens.append(PatternToken(TokenKind.LITERAL, "".join(literal)))
                literal = []
            if ch == "*":
                if not tokens or tokens[-1].kind != TokenKind.WILDCARD:
                    tokens.append(PatternToken(TokenKind.WILDCARD))
            else:
                tokens.append(PatternToken(TokenKind.SEPARATOR))
        else:
            literal.append(ch)
    if literal:
        tokens.append(PatternToken(TokenKind.LITERAL, "".join(literal)))
    return tuple(tokens)


def is_cosmetic(line: str) -> bool:
    return _COSMETIC_RE.search(line) is not None


def parse_rule(line: str, position: int = 0, source_name: str = "",
               right_rooted: bool = False) -> NetworkRule:
    """Parse one network rule line; raises RuleParseError outside the supported subset"""
    text = line.strip()
    if not text or text.startswith("!") or text.startswith("["):
        raise RuleParseError("not a network rule")
    if is_cosmetic(text):
        raise RuleParseError("cosmetic rule")

    is_exception = text.startswith("@@")
    body = text[2:] if is_exception else text

    options = RuleOptions()
    dollar = body.rfind("$")
    if dollar >= 0 and not (body.startswith("/") and body.endswith("/")):
        options = _parse_options(body[dollar + 1:])
        body = body[:dollar]

    if len(body) > 1 and body.startswith("/") and body.endswith("/"):
        raise RuleParseError("regular expression rules are not supported")

    anchor = AnchorType.NONE
    if body.startswith("||"):
        anchor = AnchorType.DOMAIN
        body = body[2:]
    elif body.startswith("|"):
        anchor = AnchorType.LEFT
        body = body[1:]

    right_anchored = False
    if body.endswith("|"):
        right_anchored = True
        body = body[:-1]
    if "|" in body:
        raise RuleParseError("'|' inside a pattern")

    tokens = list(_tokenize(body))
    # Leading/trailing wildcards are implied when the side is unanchored
    if anchor == AnchorType.NONE and tokens and tokens[0].kind == TokenKind.WILDCARD:
        tokens.pop(0)
    if not right_anchored and tokens and tokens[-1].kind == TokenKind.WILDCARD:
        tokens.pop()
    if not tokens and anchor == AnchorType.NONE and options.empty and not right_anchored:
        raise RuleParseError("empty rule")

    return NetworkRule(
        raw_text=text,
        is_exception=is_exception,
        anchor=anchor,
        right_anchored=right_anchored,
        pattern=tuple(tokens),
        options=options,
        position=position,
        source_name=source_name,
        right_rooted=right_rooted,
    )


@dataclass
class ParseDiagnostic:
    source_name: str
    line_number: int
    line: str
    reason: str

    def to_dict(self) -> dict:
        return {
            "source": self.source_name,
            "line_number": self.line_number,
            "line": self.line,
            "reason": self.reason,
        }


class RuleIndex:
    """Token -> rule positions, so a request only checks rules sharing one of its URL tokens"""

    def __init__(self, rules: list[NetworkRule]):
        self._buckets: dict[str, list[int]] = defaultdict(list)
        self._untokenized: list[int] = []
        for i, rule in enumerate(rules):
            token = rule.index_token()
            if token:
                self._buckets[token].append(i)
            else:
                self._untokenized.append(i)

    def candidates(self, url: str) -> list[int]:
        found = set(self._untokenized)
        for token in set(_URL_TOKEN_RE.findall(url.lower())):
            bucket = self._buckets.get(token)
            if bucket:
                found.update(bucket)
        return sorted(found)


@dataclass
class RuleSet:
    """Blocking and exception rules from one or more filter lists; immutable after parsing"""
    blocking_rules: list[NetworkRule] = field(default_factory=list)
    exception_rules: list[NetworkRule] = field(default_factory=list)
    source_names: list[str] = field(default_factory=list)
    comment_count: int = 0
    cosmetic_count: int = 0
    diagnostics: list[ParseDiagnostic] = field(default_factory=list)

    def __post_init__(self):
        self._block_index = RuleIndex(self.blocking_rules)
        self._exception_index = RuleIndex(self.exception_rules)

    def __len__(self) -> int:
        return len(self.blocking_rules) + len(self.exception_rules)

    @property
    def skipped_count(self) -> int:
        return len(self.diagnostics)

    def first_match(self, rules: list[NetworkRule], index: RuleIndex,
                    req: RequestContext) -> Optional[NetworkRule]:
        for i in index.candidates(req.url):
            if matches(rules[i], req):
                return rules[i]
        return None

    @classmethod
    def merge(cls, rulesets: Iterable["RuleSet"]) -> "RuleSet":
        """Combine lists (e.g. global + regional) keeping their order"""
        blocking, exceptions, names, diagnostics = [], [], [], []
        comments = cosmetic = 0
        for rs in rulesets:
            blocking.extend(rs.blocking_rules)
            exceptions.extend(rs.exception_rules)
            names.extend(rs.source_names)
            diagnostics.extend(rs.diagnostics)
            comments += rs.comment_count
            cosmetic += rs.cosmetic_count
        blocking = [replace(rule, position=pos) for pos, rule in enumerate(blocking)]
        exceptions = [replace(rule, position=pos) for pos, rule in enumerate(exceptions)]
        return cls(blocking, exceptions, names, comments, cosmetic, diagnostics)

    def summary(self) -> dict:
        return {
            "sources": self.source_names,
            "blocking_rules": len(self.blocking_rules),
            "exception_rules": len(self.exception_rules),
            "comments": self.comment_count,
            "cosmetic_rules": self.cosmetic_count,
            "skipped_lines": self.skipped_count,
        }


def parse_list(text: str, source_name: str = "list") -> RuleSet:
    """
    Parse a filter list.

    Comments and cosmetic rules are counted; lines outside the supported
    network-rule subset are skipped and reported in `diagnostics`. Rules after
    a "! Right-rooted: true" header line are read as generated rules.
    """
    blocking, exceptions, diagnostics = [], [], []
    comments = cosmetic = 0
    right_rooted = False

    for line_number, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("!") or line.startswith("["):
            comments += 1
            if line.lower() == RIGHT_ROOTED_DIRECTIVE.lower():
                right_rooted = True
            continue
        if is_cosmetic(line):
            cosmetic += 1
            continue
        try:
            rule = parse_rule(line, source_name=source_name, right_rooted=right_rooted)
        except RuleParseError as e:
            diagnostics.append(ParseDiagnostic(source_name, line_number, line, str(e)))
            continue
        if rule.is_exception:
            rule.position = len(exceptions)
            exceptions.append(rule)
        else:
            rule.position = len(blocking)
            blocking.append(rule)

    if diagnostics:
        logger.info(f"{source_name}: skipped {len(diagnostics)} unsupported lines")
    logger.info(
        f"{source_name}: {len(blocking)} blocking, {len(exceptions)} exception, "
        f"{cosmetic} cosmetic, {comments} comment lines"
    )
    return RuleSet(blocking, exceptions, [source_name], comments, cosmetic, diagnostics)


# =============================================================================
# Matching
# =============================================================================

@dataclass(frozen=True)
class MatchVerdict:
    kind: VerdictKind
    rule: Optional[NetworkRule] = None

    @property
    def blocked(self) -> bool:
        return self.kind == VerdictKind.BLOCKED

    @property
    def excepted(self) -> bool:
        return self.kind == VerdictKind.EXCEPTED


UNMATCHED = MatchVerdict(VerdictKind.UNMATCHED)


def match_request(rules: RuleSet, req: RequestContext) -> MatchVerdict:
    """
    Decide a request against a RuleSet.

    Any matching exception wins over blocking rules; the witness is the
    matching rule that comes first in list order.
    """
    exception = rules.first_match(rules.exception_rules, rules._exception_index, req)
    if exception is not None:
        return MatchVerdict(VerdictKind.EXCEPTED, exception)
    block = rules.first_match(rules.blocking_rules, rules._block_index, req)
    if block is not None:
        return MatchVerdict(VerdictKind.BLOCKED, block)
    return UNMATCHED


# =============================================================================
# Rule generation
# =============================================================================

_FORBIDDEN_PATH_CHARS = re.compile(r"[\^|$*\s]")


def generate_rule(url: str, psl: PublicSuffixTable) -> NetworkRule:
    """
    Turn an ad-serving URL into a right-rooted, domain-anchored rule.

    Steps: reduce the host to its eTLD+1, drop the query, drop the fragment,
    drop the protocol. e.g. https://a.good.example.com/ad.html?id=3 ->
    ||example.com/ad.html

    The rule only matches URLs whose path (query and fragment ignored) is
    exactly the generated one, so /ad.html/real-article.jpg stays unblocked.
    """
    try:
        parts = urlsplit(url.strip())
        port = parts.port
    except ValueError as e:
        raise RuleGenerationError(f"unparseable URL {url!r}: {e}") from e

    if parts.scheme.lower() in ("data", "blob", "about", "javascript"):
        raise RuleGenerationError(f"{parts.scheme}: URLs have no registrable domain")
    host = (parts.hostname or "").lower()
    if not host:
        raise RuleGenerationError(f"URL has no host: {url!r}")
    if is_ip_host(host):
        raise RuleGenerationError(f"IP address host {host} has no eTLD+1")

    registrable = psl.registrable_domain(host)
    if not registrable:
        raise RuleGenerationError(f"host {host} is a public suffix or not under one")

    path = parts.path
    if _FORBIDDEN_PATH_CHARS.search(path):
        raise RuleGenerationError(f"path of {url!r} contains ABP metacharacters")

    netloc = registrable if port is None else f"{registrable}:{port}"
    return parse_rule(f"||{netloc}{path or '/'}", right_rooted=True)


def dedupe_rules(rules: Iterable[NetworkRule]) -> list[NetworkRule]:
    """Drop canonical duplicates, keeping the first occurrence"""
    seen = set()
    out = []
    for rule in rules:
        key = rule.canonical_key()
        if key in seen:
            continue
        seen.add(key)
        out.append(rule)
    return out


def format_list(rules: Iterable[NetworkRule], title: str, generator: str,
                crawl_id: str, generated_on: Optional[date] = None) -> str:
    """Render rules as an ABP list file with a header comment block"""
    generated_on = generated_on or date.today()
    lines = [
        "[Adblock Plus 2.0]",
        f"! Title: {title}",
        f"! Generated by: {generator}",
        f"! Date: {generated_on.isoformat()}",
        f"! Source crawl: {crawl_id}",
    ]
    rules = [rule for rule in rules if not rule.is_exception]
    if rules and all(rule.right_rooted for rule in rules):
        lines.append(RIGHT_ROOTED_DIRECTIVE)
    lines.extend(rule.to_text() for rule in rules)
    return "\n".join(lines) + "\n"
