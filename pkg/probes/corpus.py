"""
Blockprobe - Corpus Ingestion

Turns raw URL lists (government orders, court orders, user reports) into the
set of unique, live domains that the probes test.

Features:
- Plain (one URL per line) and CSV (url,source_kind,source_id) input
- Hostname normalization: lowercase, no scheme/port/path, IDNA form
- Source tracking per domain for the JSON sidecar
- Liveness filtering against control-channel resolutions
"""

import csv
import io
import ipaddress
import json
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Callable, Dict, Iterable, List, Mapping, Optional, Set, Union
from urllib.parse import urlsplit

import idna

from core.diagnostics import ProbeLogger
from core.models import Domain, DnsOutcome, ProbeVerdict, Technique, Verdict

MAX_DOMAIN_LENGTH = 253
_LABEL_RE = re.compile(r"^(?!-)[a-z0-9-]{1,63}(?<!-)$")


class SourceKind(str, Enum):
    GOVERNMENT_ORDER = "government_order"
    COURT_ORDER = "court_order"
    USER_REPORT = "user_report"
    OTHER = "other"


@dataclass(frozen=True)
class SourceEntry:
    raw_url: str
    source_kind: SourceKind = SourceKind.OTHER
    source_id: str = ""

    def __post_init__(self):
        if not self.raw_url:
            raise ValueError("raw_url must be non-empty")


@dataclass(frozen=True)
class RowError:
    line: int
    message: str
    raw: str


@dataclass
class ExtractionResult:
    domains: Set[Domain] = field(default_factory=set)
    sources: Dict[Domain, List[str]] = field(default_factory=dict)
    # (entry index, raw url) pairs
    untestable: List[tuple] = field(default_factory=list)
    skipped: List[tuple] = field(default_factory=list)


RawInput = Union[bytes, str, IO[bytes], IO[str]]


def _decode(raw: RawInput) -> str:
    if hasattr(raw, "read"):
        raw = raw.read()  # type: ignore[union-attr]
    if isinstance(raw, bytes):
        return raw.decode("utf-8-sig")
    return str(raw)


def parse_source_list(
    raw: RawInput,
    format: str = "plain",
    errors: Optional[List[RowError]] = None,
) -> List[SourceEntry]:
    """
    Parse a raw source list into SourceEntry records.

    Args:
        raw: UTF-8 bytes, text, or a file object
        format: "plain" (one URL per line) or "csv" (url,source_kind,source_id)
        errors: optional list collecting per-row errors; parsing continues

    Returns:
        One entry per non-empty, non-comment line/row, in input order
    """
    text = _decode(raw)
    entries: List[SourceEntry] = []
    sink = errors if errors is not None else []

    if format == "plain":
        for line in text.splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                entries.append(SourceEntry(line))
        return entries

    if format != "csv":
        raise ValueError(f"unknown source list format '{format}'")

    reader = csv.reader(io.StringIO(text))
    for row in reader:
        line_no = reader.line_num
        cells = [c.strip() for c in row]
        if not any(cells) or cells[0].startswith("#"):
            continue
        if line_no == 1 and cells[0].lower() == "url":
            continue
        if len(cells) > 3 or not cells[0]:
            sink.append(RowError(line_no, "expected url[,source_kind[,source_id]]", ",".join(row)))
            continue
        kind_text = cells[1] if len(cells) > 1 and cells[1] else SourceKind.OTHER.value
        try:
            kind = SourceKind(kind_text.lower())
        except ValueError:
            sink.append(RowError(line_no, f"unknown source_kind '{kind_text}'", ",".join(row)))
            continue
        entries.append(SourceEntry(cells[0], kind, cells[2] if len(cells) > 2 else ""))

    return entries


def hostname_of(raw_url: str) -> Optional[str]:
    """Hostname part of a URL, tolerating a missing scheme"""
    url = raw_url.strip()
    if "://" not in url:
        url = "http://" + url.lstrip("/")
    try:
        host = urlsplit(url).hostname
    except ValueError:
        return None
    return host or None


def normalize_domain(host: str) -> Optional[Domain]:
    """Lowercase IDNA form of host, or None if it is not a valid DNS name"""
    host = host.strip().rstrip(".").lower()
    if not host:
        return None
    if not host.isascii():
        try:
            host = idna.encode(host, uts46=True).decode("ascii")
        except idna.IDNAError:
            return None
    labels = host.split(".")
    if len(host) > MAX_DOMAIN_LENGTH or len(labels) < 2:
        return None
    if not all(_LABEL_RE.match(label) for label in labels):
        return None
    for label in labels:
        if label.startswith("xn--"):
            try:
                idna.decode(label)
            except idna.IDNAError:
                return None
    return host


def is_ip_literal(host: str) -> bool:
    try:
        ipaddress.ip_address(host.strip("[]"))
        return True
    except ValueError:
        return False


def extract_domains_detailed(entries: Iterable[SourceEntry]) -> ExtractionResult:
    """Extract and normalize hostnames, keeping per-domain source references"""
    result = ExtractionResult()
    sources: Dict[Domain, Set[str]] = {}

    for index, entry in enumerate(entries):
        host = hostname_of(entry.raw_url)
        if host is None:
            result.skipped.append((index, entry.raw_url))
            continue
        if is_ip_literal(host):
            result.untestable.append((index, entry.raw_url))
            continue
        domain = normalize_domain(host)
        if domain is None:
            result.skipped.append((index, entry.raw_url))
            continue
        result.domains.add(domain)
        reference = entry.source_kind.value + (f":{entry.source_id}" if entry.source_id else "")
        sources.setdefault(domain, set()).add(reference)

    result.sources = {d: sorted(refs) for d, refs in sources.items()}
    return result


def extract_domains(entries: Iterable[SourceEntry]) -> Set[Domain]:
    return extract_domains_detailed(entries).domains


def filter_live(
    domains: Iterable[Domain],
    control_results: Mapping[Domain, Iterable[DnsOutcome]],
    untestable: Optional[List[ProbeVerdict]] = None,
) -> Set[Domain]:
    """
    Keep the domains that resolved to a non-empty IP set on at least one
    control channel. Domains missing from control_results are recorded as
    Untestable and excluded.
    """
    live: Set[Domain] = set()
    for domain in domains:
        outcomes = control_results.get(domain)
        if outcomes is None:
            if untestable is not None:
                untestable.append(ProbeVerdict(
                    domain, Technique.DNS, Verdict.UNTESTABLE, note="no_control_result"))
            continue
        if any(outcome.resolved for outcome in outcomes):
            live.add(domain)
    return live


class CorpusIngestor:
    """Reads source lists, extracts domains and keeps ingestion statistics"""

    def __init__(self, logger: Optional[ProbeLogger] = None):
        self.logger = logger or ProbeLogger()
        self.stats = {
            'entries': 0,
            'entries_by_kind': {},
            'row_errors': 0,
            'skipped_urls': 0,
            'untestable_ip_urls': 0,
            'domains': 0,
            'live_domains': 0,
        }
        self.row_errors: List[RowError] = []
        self.untestable: List[ProbeVerdict] = []

    def ingest_file(self, path: str, format: str = "plain") -> ExtractionResult:
        """Parse and extract one source file"""
        self.logger.start_operation("Corpus Ingestion")
        self.logger.log_config("Corpus", path)
        self.logger.log_config("Format", format)

        with open(path, "rb") as f:
            entries = parse_source_list(f, format, self.row_errors)
        for error in self.row_errors:
            self.logger.log_error(error.message, f"{path}:{error.line}", "Corpus Row")

        result = self.ingest_entries(entries)
        self.logger.complete_operation()
        return result

    def ingest_entries(self, entries: List[SourceEntry]) -> ExtractionResult:
        result = extract_domains_detailed(entries)
        kinds = Counter(entry.source_kind.value for entry in entries)

        self.stats['entries'] = len(entries)
        self.stats['entries_by_kind'] = dict(sorted(kinds.items()))
        self.stats['row_errors'] = len(self.row_errors)
        self.stats['skipped_urls'] = len(result.skipped)
        self.stats['untestable_ip_urls'] = len(result.untestable)
        self.stats['domains'] = len(result.domains)

        for index, raw_url in result.skipped:
            self.logger.log_error(f"unparseable URL at entry {index}", raw_url, "Corpus URL")
        for index, raw_url in result.untestable:
            self.logger.log_info(f"Entry {index} is a bare IP address, recorded as untestable: {raw_url}")
            host = hostname_of(raw_url) or raw_url
            self.untestable.append(ProbeVerdict(
                host, Technique.DNS, Verdict.UNTESTABLE, note="bare_ip_url"))

        self.logger.log_info(f"Extracted {len(result.domains)} unique domains from {len(entries)} URLs")
        return result

    def check_liveness(
        self,
        domains: Iterable[Domain],
        resolve_controls: Callable[[Domain], List[DnsOutcome]],
    ) -> Set[Domain]:
        """Resolve every domain via the control channels and keep live ones"""
        domains = sorted(domains)
        self.logger.start_operation("Liveness Filtering", len(domains))
        control_results: Dict[Domain, List[DnsOutcome]] = {}
        for done, domain in enumerate(domains, start=1):
            try:
                control_results[domain] = resolve_controls(domain)
            except Exception as e:
                self.logger.log_error(f"control resolution failed: {e}", domain, "Liveness")
            self.logger.update_progress(done, len(domains), domain)

        live = filter_live(domains, control_results, self.untestable)
        self.stats['live_domains'] = len(live)
        self.logger.log_info(f"Live domains: {len(live)}/{len(domains)}")
        self.logger.complete_operation()
        return live

    def write_domain_list(
        self,
        result: ExtractionResult,
        out_dir: str,
        live: Optional[Set[Domain]] = None,
    ) -> str:
        """Write domains.txt and the domains.json sidecar; returns the txt path"""
        os.makedirs(out_dir, exist_ok=True)
        domains = sorted(live if live is not None else result.domains)

        txt_path = os.path.join(out_dir, "domains.txt")
        with open(txt_path, "w", encoding="utf-8") as f:
            f.write("".join(f"{d}\n" for d in domains))

        sidecar = [{"domain": d, "sources": result.sources.get(d, [])} for d in domains]
        with open(os.path.join(out_dir, "domains.json"), "w", encoding="utf-8") as f:
            json.dump(sidecar, f, indent=2)

        self.logger.log_info(f"Domain list written: {txt_path} ({len(domains)} domains)")
        return txt_path


def read_domain_list(path: str) -> List[Domain]:
    """Read a newline-delimited domain list written by write_domain_list"""
    with open(path, "r", encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip() and not line.startswith("#")]
