"""
Public Suffix helpers

eTLD+1 (registrable domain) lookups backed by tldextract, either with the
snapshot tldextract ships or with a public_suffix_list.dat supplied by the user.
"""

import ipaddress
import logging
from functools import lru_cache
from pathlib import Path
from typing import Optional
from urllib.parse import urlsplit

import tldextract

import config

logger = logging.getLogger(__name__)


def host_of(url: str) -> str:
    """Lower-cased host of an absolute URL ("" when there is none)"""
    try:
        return (urlsplit(url).hostname or "").lower()
    except ValueError:
        return ""


def is_ip_host(host: str) -> bool:
    try:
        ipaddress.ip_address(host.strip("[]"))
        return True
    except ValueError:
        return False


class PublicSuffixTable:
    """eTLD+1 lookups against one Public Suffix List"""

    def __init__(self, psl_path: Optional[str] = None):
        self.source = psl_path or "bundled"
        if psl_path:
            path = Path(psl_path).resolve()
            if not path.exists():
                raise FileNotFoundError(f"Public suffix list not found: {psl_path}")
            self._extract = tldextract.TLDExtract(
                cache_dir=None,
                suffix_list_urls=(path.as_uri(),),
                fallback_to_snapshot=False,
            )
        else:
            self._extract = tldextract.TLDExtract(
                cache_dir=None,
                suffix_list_urls=(),
                fallback_to_snapshot=True,
            )
        logger.debug(f"Public suffix table loaded from {self.source}")

    @classmethod
    def from_config(cls) -> "PublicSuffixTable":
        return cls(config.PSL_PATH or None)

    def split(self, host: str) -> tuple[str, str]:
        """Split a host into (subdomain, registrable domain); registrable is "" when none exists"""
        return _split(self, host.lower().rstrip("."))

    def registrable_domain(self, host: str) -> str:
        """eTLD+1 of a host, "" for IP literals and bare public suffixes"""
        return self.split(host)[1]

    def registrable_domain_of_url(self, url: str) -> str:
        return self.registrable_domain(host_of(url))

    def is_subdomain(self, host: str) -> bool:
        """True when the host has labels below its eTLD+1"""
        subdomain, registrable = self.split(host)
        return bool(registrable and subdomain)


@lru_cache(maxsize=65536)
def _split(table: PublicSuffixTable, host: str) -> tuple[str, str]:
    if not host or is_ip_host(host):
        return "", ""
    ext = table._extract(host)
    if not ext.domain or not ext.suffix:
        return "", ""
    return ext.subdomain, f"{ext.domain}.{ext.suffix}"
