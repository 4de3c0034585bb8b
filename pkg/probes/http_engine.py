"""
Blockprobe - HTTP Censorship Engine

Fetches each (domain, IP) pair from the test vantage and the control
vantages with the Host header set to the domain, then decides per pair:

1. Connection reset on the test fetch
2. Status code differs from the control consensus
3. 2xx: body length or HTML tag structure outside the control band (3 sigma)
4. 3xx: redirect registrable domain not among the controls'
5. 4xx/5xx: header key set inconsistent with the controls

Censored responses are attributed to a known censor through notice
signatures (status, body pattern, redirect host).
"""

import base64
import json
import re
import threading
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from html.parser import HTMLParser
from itertools import combinations
from typing import Dict, Iterable, List, Optional, Pattern, Sequence, Tuple
from urllib.parse import urljoin, urlsplit

import numpy as np
import requests
import tldextract
from urllib3.exceptions import ReadTimeoutError

from core.concurrency import RateLimiter, run_bounded
from core.config import Vantage
from core.diagnostics import ProbeLogger
from core.errors import InsufficientControlsError, SignatureError
from core.models import Domain, ProbeVerdict, Technique, Verdict, fold_pair_verdicts
from core.records import JsonLinesWriter
from probes.corpus import is_ip_literal

DEFAULT_TIMEOUT = 30.0

TagTfVector = Dict[str, int]

_extractor = tldextract.TLDExtract(suffix_list_urls=())


class Terminal(str, Enum):
    OK = "ok"
    RESET = "reset"
    TIMEOUT = "timeout"
    CONN_ERROR = "conn_error"


@dataclass(frozen=True)
class HttpResponseRecord:
    domain: Domain
    ip: str
    vantage: str
    terminal: Terminal
    status: Optional[int] = None
    header_keys: Tuple[str, ...] = ()
    body: bytes = b""
    location: Optional[str] = None

    def __post_init__(self):
        if (self.status is not None) != (self.terminal == Terminal.OK):
            raise ValueError("status must be present exactly when terminal is ok")

    @property
    def length(self) -> int:
        return len(self.body)

    def sort_key(self):
        return (self.vantage, self.terminal.value, self.status or 0, self.length, self.body)

    def to_dict(self) -> Dict:
        return {
            "domain": self.domain,
            "ip": self.ip,
            "vantage": self.vantage,
            "terminal": self.terminal.value,
            "status": self.status,
            "header_keys": list(self.header_keys),
            "length": self.length,
            "location": self.location,
            "body_b64": base64.b64encode(self.body).decode("ascii"),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "HttpResponseRecord":
        return cls(
            domain=data["domain"],
            ip=data["ip"],
            vantage=data["vantage"],
            terminal=Terminal(data["terminal"]),
            status=data.get("status"),
            header_keys=tuple(data.get("header_keys") or ()),
            body=base64.b64decode(data.get("body_b64") or ""),
            location=data.get("location"),
        )


def _caused_by(exc: BaseException, kinds: Tuple[type, ...]) -> bool:
    """Look for one of kinds anywhere in the wrapped exception chain"""
    seen = set()
    stack: List[BaseException] = [exc]
    while stack:
        current = stack.pop()
        if id(current) in seen:
            continue
        seen.add(id(current))
        if isinstance(current, kinds):
            return True
        for nested in (current.__cause__, current.__context__, *current.args):
            if isinstance(nested, BaseException):
                stack.append(nested)
    return False


def fetch(
    domain: Domain,
    ip: str,
    vantage: Optional[Vantage] = None,
    timeout: float = DEFAULT_TIMEOUT,
    port: int = 80,
    session: Optional[requests.Session] = None,
) -> HttpResponseRecord:
    """
    GET http://<ip>/ with Host: domain. Redirects are not followed.

    Relay vantages are used as HTTP proxies.
    """
    vantage_id = vantage.id if vantage else "local"
    url = f"http://{ip}/" if port == 80 else f"http://{ip}:{port}/"
    proxies = {"http": vantage.proxy_url} if vantage and vantage.is_relay else {}
    http = session or requests

    try:
        response = http.get(
            url,
            headers={"Host": domain, "User-Agent": "blockprobe", "Accept": "*/*"},
            timeout=timeout,
            allow_redirects=False,
            proxies=proxies,
        )
        body = response.content
    except requests.Timeout:
        return HttpResponseRecord(domain, ip, vantage_id, Terminal.TIMEOUT)
    except requests.RequestException as e:
        # a timeout while reading the body arrives wrapped in ConnectionError
        if _caused_by(e, (ReadTimeoutError, TimeoutError)):
            terminal = Terminal.TIMEOUT
        elif _caused_by(e, (ConnectionResetError,)):
            terminal = Terminal.RESET
        else:
            terminal = Terminal.CONN_ERROR
        return HttpResponseRecord(domain, ip, vantage_id, terminal)

    return HttpResponseRecord(
        domain, ip, vantage_id, Terminal.OK,
        status=response.status_code,
        header_keys=tuple(k.lower() for k in response.headers.keys()),
        body=body,
        location=response.headers.get("location"),
    )


def length_inconsistent(test_len: int, control_lens: Sequence[int],
                        sigma_mult: float = 3.0, sigma_floor: float = 1.0) -> bool:
    """|mean(controls) - test| > sigma_mult * max(std(controls), floor)"""
    if len(control_lens) < 2:
        raise InsufficientControlsError("insufficient controls")
    lengths = np.array(sorted(control_lens), dtype=float)
    sigma = max(float(lengths.std()), sigma_floor)
    return abs(float(lengths.mean()) - test_len) > sigma_mult * sigma


class _TagCounter(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.counts: Counter = Counter()

    def handle_starttag(self, tag, attrs):
        self.counts[tag.lower()] += 1


def html_tag_tf(body: bytes) -> TagTfVector:
    """Element tag counts from a tolerant parse; attributes and text ignored"""
    if not body:
        return {}
    parser = _TagCounter()
    try:
        parser.feed(body.decode("utf-8", errors="replace"))
        parser.close()
    except Exception:
        pass
    return dict(parser.counts)


def cosine_similarity(a: TagTfVector, b: TagTfVector) -> float:
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    numerator = sum(a[k] * b[k] for k in set(a) & set(b))
    norm_a = np.sqrt(sum(v * v for v in a.values()))
    norm_b = np.sqrt(sum(v * v for v in b.values()))
    return float(min(1.0, max(0.0, numerator / (norm_a * norm_b))))


def body_inconsistent(test_vec: TagTfVector, control_vecs: Sequence[TagTfVector],
                      sigma_mult: float = 3.0, sigma_floor: float = 0.01) -> bool:
    """
    Compare the mean test-to-control cosine with the mean pairwise
    control cosine; needs at least 3 controls.
    """
    if len(control_vecs) < 3:
        raise InsufficientControlsError("insufficient controls for the body test")
    pairwise = np.array(sorted(cosine_similarity(a, b) for a, b in combinations(control_vecs, 2)))
    against_test = np.array(sorted(cosine_similarity(test_vec, c) for c in control_vecs))
    sigma = max(float(pairwise.std()), sigma_floor)
    return abs(float(pairwise.mean()) - float(against_test.mean())) > sigma_mult * sigma


def registrable_domain(host: str) -> str:
    """eTLD+1 of host; IPs and single labels unchanged, unknown TLDs keep two labels"""
    host = host.strip().rstrip(".").lower()
    if not host or is_ip_literal(host) or "." not in host:
        return host
    parts = _extractor(host)
    if parts.suffix and parts.domain:
        return f"{parts.domain}.{parts.suffix}"
    return ".".join(host.split(".")[-2:])


def redirect_host(record: HttpResponseRecord) -> Optional[str]:
    """Location host, relative locations resolved against the request domain"""
    if not record.location:
        return None
    host = urlsplit(urljoin(f"http://{record.domain}/", record.location)).hostname
    return host.lower() if host else None


def header_keys_mismatch(test_keys: Iterable[str], control_key_sets: Sequence[Iterable[str]]) -> bool:
    """Keys common to all controls missing from test, or test keys no control sent"""
    test = set(test_keys)
    sets = [set(keys) for keys in control_key_sets]
    common = set.intersection(*sets) if sets else set()
    union = set.union(*sets) if sets else set()
    return not common <= test or not test <= union


def consensus_status(controls: Sequence[HttpResponseRecord]) -> Optional[int]:
    """Strict-majority status among ok controls, else None"""
    statuses = [c.status for c in controls if c.terminal == Terminal.OK]
    if not statuses:
        return None
    status, count = sorted(Counter(statuses).items(), key=lambda kv: (-kv[1], kv[0]))[0]
    return status if count * 2 > len(statuses) else None


def classify_http(
    test: HttpResponseRecord,
    controls: Sequence[HttpResponseRecord],
    sigma_mult: float = 3.0,
    sigma_floor_len: float = 1.0,
    sigma_floor_cos: float = 0.01,
) -> ProbeVerdict:
    """Pure classification of one test response against its controls"""
    controls = sorted(controls, key=HttpResponseRecord.sort_key)

    def verdict(kind: Verdict, rule: Optional[str] = None, note: Optional[str] = None, **details):
        return ProbeVerdict(test.domain, Technique.HTTP, kind, evidence=rule, note=note,
                            ip=test.ip, details={"rule_fired": rule, **details} if rule else details)

    if any(c.terminal == Terminal.RESET for c in controls):
        return verdict(Verdict.UNTESTABLE, note="control_reset")
    if test.terminal == Terminal.RESET:
        return verdict(Verdict.CENSORED, "reset")
    if test.terminal != Terminal.OK:
        return verdict(Verdict.UNTESTABLE, note=f"test_{test.terminal.value}")

    ok_controls = [c for c in controls if c.terminal == Terminal.OK]
    if len(ok_controls) < 2:
        return verdict(Verdict.UNTESTABLE, note="insufficient_controls")
    consensus = consensus_status(ok_controls)
    if consensus is None:
        return verdict(Verdict.UNTESTABLE, note="no_control_consensus")
    if test.status != consensus:
        return verdict(Verdict.CENSORED, "status_mismatch",
                       consensus_status=consensus, test_status=test.status)

    agreeing = [c for c in ok_controls if c.status == consensus]
    status = test.status or 0

    if 200 <= status < 300:
        if length_inconsistent(test.length, [c.length for c in agreeing], sigma_mult, sigma_floor_len):
            return verdict(Verdict.CENSORED, "length_inconsistent", test_length=test.length)
        if len(agreeing) < 3:
            return verdict(Verdict.UNCENSORED, degraded=True)
        control_vecs = [html_tag_tf(c.body) for c in agreeing]
        if body_inconsistent(html_tag_tf(test.body), control_vecs, sigma_mult, sigma_floor_cos):
            return verdict(Verdict.CENSORED, "body_inconsistent")
        return verdict(Verdict.UNCENSORED)

    if 300 <= status < 400:
        test_host = redirect_host(test)
        control_domains = {registrable_domain(h) for h in map(redirect_host, agreeing) if h}
        if test_host is None and not control_domains:
            return verdict(Verdict.UNCENSORED, note="no_location")
        if test_host is None or registrable_domain(test_host) not in control_domains:
            return verdict(Verdict.CENSORED, "redirect_host_mismatch", redirect_host=test_host)
        return verdict(Verdict.UNCENSORED)

    if status >= 400:
        if header_keys_mismatch(test.header_keys, [c.header_keys for c in agreeing]):
            return verdict(Verdict.CENSORED, "header_keys_mismatch",
                           header_keys=list(test.header_keys))
        return verdict(Verdict.UNCENSORED)

    return verdict(Verdict.UNCENSORED)


@dataclass(frozen=True)
class CensorSignature:
    id: str
    status: Optional[int] = None
    body_pattern: Optional[Pattern] = None
    redirect_host: Optional[str] = None

    def __post_init__(self):
        if self.status is None and self.body_pattern is None and self.redirect_host is None:
            raise SignatureError(f"signature '{self.id}' has no matcher")

    def matches(self, record: HttpResponseRecord) -> bool:
        if self.status is not None and record.status != self.status:
            return False
        if self.body_pattern is not None:
            if not record.body:
                return False
            if not self.body_pattern.search(record.body.decode("utf-8", errors="replace")):
                return False
        if self.redirect_host is not None and redirect_host(record) != self.redirect_host:
            return False
        return True


def parse_signatures(data) -> List[CensorSignature]:
    """Build signatures from the decoded JSON list, in file order"""
    if not isinstance(data, list):
        raise SignatureError("signature file must hold a JSON list")
    signatures = []
    for index, item in enumerate(data):
        if not isinstance(item, dict) or "id" not in item:
            raise SignatureError(f"signature #{index}: expected an object with an 'id'")
        matcher = item.get("matcher", item)
        pattern = matcher.get("body_pattern")
        try:
            compiled = re.compile(pattern, re.IGNORECASE) if pattern else None
        except re.error as e:
            raise SignatureError(f"signature '{item['id']}': invalid body_pattern: {e}")
        status = matcher.get("status")
        host = matcher.get("redirect_host")
        signatures.append(CensorSignature(
            str(item["id"]),
            int(status) if status is not None else None,
            compiled,
            host.lower() if host else None,
        ))
    return signatures


def load_signatures(path: str) -> List[CensorSignature]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise SignatureError(f"cannot read signature file {path}: {e}")
    return parse_signatures(data)


def match_signature(record: HttpResponseRecord, signatures: Sequence[CensorSignature]) -> Optional[str]:
    """First signature, in config order, whose present matchers all match"""
    for signature in signatures:
        if signature.matches(record):
            return signature.id
    return None


def classify_domain_http(domain: Domain, pair_verdicts: Sequence[ProbeVerdict]) -> ProbeVerdict:
    return fold_pair_verdicts(domain, Technique.HTTP, pair_verdicts)


@dataclass
class HttpPairResult:
    test: HttpResponseRecord
    controls: List[HttpResponseRecord] = field(default_factory=list)
    verdict: Optional[ProbeVerdict] = None


class HttpProber:
    """Fetches (domain, IP) pairs from all vantages and classifies them"""

    def __init__(
        self,
        test_vantage: Vantage,
        control_vantages: Sequence[Vantage],
        signatures: Sequence[CensorSignature] = (),
        timeout: float = DEFAULT_TIMEOUT,
        port: int = 80,
        sigma_mult: float = 3.0,
        sigma_floor_len: float = 1.0,
        sigma_floor_cos: float = 0.01,
        max_ips_per_domain: int = 3,
        parallelism: int = 16,
        host_rate: float = 0.0,
        logger: Optional[ProbeLogger] = None,
        writer: Optional[JsonLinesWriter] = None,
    ):
        self.test_vantage = test_vantage
        self.control_vantages = list(control_vantages)
        self.signatures = list(signatures)
        self.timeout = timeout
        self.port = port
        self.sigma_mult = sigma_mult
        self.sigma_floor_len = sigma_floor_len
        self.sigma_floor_cos = sigma_floor_cos
        self.max_ips_per_domain = max_ips_per_domain
        self.parallelism = parallelism
        self.rate_limiter = RateLimiter(host_rate)
        self.logger = logger or ProbeLogger()
        self.writer = writer

        self._local = threading.local()
        self.stats = {
            'pairs': 0,
            'fetches': 0,
            'censored_pairs': 0,
            'attributed': 0,
            'degraded': 0,
        }
        self._stats_lock = threading.Lock()

    @property
    def session(self) -> requests.Session:
        session = getattr(self._local, "session", None)
        if session is None:
            session = requests.Session()
            session.trust_env = False
            self._local.session = session
        return session

    def _fetch(self, domain: Domain, ip: str, vantage: Vantage) -> HttpResponseRecord:
        self.rate_limiter.wait(ip)
        record = fetch(domain, ip, vantage, self.timeout, self.port, self.session)
        with self._stats_lock:
            self.stats['fetches'] += 1
        if self.writer:
            self.writer.append(record.to_dict())
        return record

    def probe_pair(self, domain: Domain, ip: str) -> HttpPairResult:
        result = HttpPairResult(self._fetch(domain, ip, self.test_vantage))
        result.controls = [self._fetch(domain, ip, v) for v in self.control_vantages]
        verdict = classify_http(result.test, result.controls, self.sigma_mult,
                                self.sigma_floor_len, self.sigma_floor_cos)
        if verdict.censored and self.signatures:
            signature = match_signature(result.test, self.signatures)
            if signature:
                verdict = ProbeVerdict(verdict.domain, verdict.technique, verdict.verdict,
                                       verdict.evidence, verdict.note, verdict.ip, signature,
                                       verdict.details)
        with self._stats_lock:
            self.stats['pairs'] += 1
            self.stats['censored_pairs'] += verdict.censored
            self.stats['attributed'] += verdict.matched_signature is not None
            self.stats['degraded'] += bool(verdict.details.get("degraded"))
        result.verdict = verdict
        return result

    def probe_domains(self, control_ips: Dict[Domain, Iterable[str]]) -> Tuple[List[ProbeVerdict], List[ProbeVerdict]]:
        """
        Probe every domain's capped control IP set.

        Returns:
            (domain verdicts, per-(domain, ip) verdicts)
        """
        pairs = [(domain, ip) for domain in sorted(control_ips)
                 for ip in sorted(control_ips[domain])[:self.max_ips_per_domain or None]]
        self.logger.start_operation("HTTP Probing", len(pairs))
        self.logger.log_config("Control vantages", [v.id for v in self.control_vantages])
        self.logger.log_config("Signatures", len(self.signatures))

        def work(pair):
            domain, ip = pair
            try:
                return self.probe_pair(domain, ip).verdict
            except Exception as e:
                self.logger.log_error(f"HTTP probe failed: {e}", f"{domain}/{ip}", "HTTP Probe")
                return ProbeVerdict(domain, Technique.HTTP, Verdict.UNTESTABLE, ip=ip, note="probe_error")

        def progress(done, total, pair, _result):
            self.logger.update_progress(done, total, f"{pair[0]} ({pair[1]})")

        pair_verdicts = run_bounded(work, pairs, self.parallelism, progress)

        grouped: Dict[Domain, List[ProbeVerdict]] = {d: [] for d in control_ips}
        for (domain, _ip), verdict in zip(pairs, pair_verdicts):
            grouped[domain].append(verdict)

        domain_verdicts = []
        for domain in sorted(grouped):
            verdict = classify_domain_http(domain, grouped[domain])
            self.logger.log_probe("http", domain, verdict.verdict.value, verdict.matched_signature or "")
            domain_verdicts.append(verdict)

        if self.stats['degraded']:
            self.logger.log_warning(f"Body test skipped for {self.stats['degraded']} pairs (fewer than 3 agreeing controls)")
        self.logger.complete_operation()
        return domain_verdicts, sorted(pair_verdicts, key=ProbeVerdict.sort_key)
