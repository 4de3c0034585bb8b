"""
Blockprobe - DNS Censorship Engine

Collects A-record observations through a test resolver and several control
channels, then classifies each domain:

1. Direct checks: test answer in the control IP set, resolver error, bogon
2. Tampering analysis over the leftover mismatches (D'): the relative
   frequency of the most frequent test IP is compared with the same
   statistic on every control channel using a 3-sigma rule
3. If tampering is present, mismatched domains answered with the modal IP
   are censored
"""

import ipaddress
import os
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import dns.exception
import dns.flags
import dns.message
import dns.query
import dns.rcode
import dns.rdatatype
import numpy as np
import requests

from core.concurrency import RateLimiter, run_bounded
from core.config import DnsChannel
from core.diagnostics import ProbeLogger
from core.errors import EmptySampleError, InsufficientControlsError
from core.models import (
    Domain, DnsErrorCode, DnsObservation, DnsOutcome, OutcomeKind,
    ProbeVerdict, Technique, Verdict,
)
from core.records import JsonLinesWriter

BOGON_FILE = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data", "bogon_prefixes.txt")

DEFAULT_TIMEOUT = 5.0
DEFAULT_SIGMA_FLOOR = 0.01
DEFAULT_MIN_SAMPLE = 20

_RCODE_MAP = {
    dns.rcode.NXDOMAIN: DnsErrorCode.NXDOMAIN,
    dns.rcode.SERVFAIL: DnsErrorCode.SERVFAIL,
    dns.rcode.REFUSED: DnsErrorCode.REFUSED,
}


@dataclass(frozen=True)
class ControlIpSet:
    domain: Domain
    ips: FrozenSet[str]


@dataclass(frozen=True)
class MrfStat:
    channel: str
    most_frequent_ip: str
    mrf: float
    sample_size: int

    def __post_init__(self):
        if not 0 < self.mrf <= 1 or self.sample_size < 1:
            raise ValueError(f"invalid MRF statistic {self}")

    def to_dict(self):
        return {
            "channel": self.channel,
            "most_frequent_ip": self.most_frequent_ip,
            "mrf": self.mrf,
            "sample_size": self.sample_size,
        }


class BogonList:
    """IPv4/IPv6 prefixes that must never be a public answer"""

    def __init__(self, prefixes: Iterable[str] = ()):
        self.networks = [ipaddress.ip_network(p.strip(), strict=False) for p in prefixes]

    @classmethod
    def from_file(cls, path: str) -> "BogonList":
        prefixes = []
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.split("#", 1)[0].strip()
                if line:
                    prefixes.append(line)
        return cls(prefixes)

    def extend(self, other: "BogonList") -> "BogonList":
        merged = BogonList()
        merged.networks = self.networks + other.networks
        return merged

    def __contains__(self, ip: str) -> bool:
        try:
            address = ipaddress.ip_address(ip)
        except ValueError:
            return False
        return any(address in network for network in self.networks
                   if network.version == address.version)

    def __len__(self) -> int:
        return len(self.networks)


def load_bogons(path: Optional[str] = None) -> BogonList:
    """Shipped special-use prefixes, plus an optional extra prefix file"""
    bogons = BogonList.from_file(BOGON_FILE)
    if path:
        bogons = bogons.extend(BogonList.from_file(path))
    return bogons


def is_bogon(ip: str, bogons: BogonList) -> bool:
    return ip in bogons


def outcome_from_response(response: dns.message.Message) -> DnsOutcome:
    rcode = response.rcode()
    if rcode != dns.rcode.NOERROR:
        return DnsOutcome.error(_RCODE_MAP.get(rcode, DnsErrorCode.OTHER))

    ips: List[str] = []
    for rrset in response.answer:
        if rrset.rdtype != dns.rdatatype.A:
            continue
        for rdata in rrset:
            if rdata.address not in ips:
                ips.append(rdata.address)
    if not ips:
        return DnsOutcome.error(DnsErrorCode.OTHER)
    return DnsOutcome.answers(ips)


def _doh_exchange(query: dns.message.Message, url: str, timeout: float,
                  session: Optional[requests.Session]) -> dns.message.Message:
    query.id = 0
    http = session or requests
    response = http.post(
        url,
        data=query.to_wire(),
        headers={
            "content-type": "application/dns-message",
            "accept": "application/dns-message",
        },
        timeout=timeout,
    )
    response.raise_for_status()
    return dns.message.from_wire(response.content)


def resolve_via_channel(
    domain: Domain,
    channel: DnsChannel,
    timeout: float = DEFAULT_TIMEOUT,
    session: Optional[requests.Session] = None,
) -> DnsObservation:
    """
    Resolve the A records of domain through one channel.

    Transport failures of any kind are reported as a timeout outcome.
    """
    query = dns.message.make_query(domain, dns.rdatatype.A)
    try:
        if channel.kind == "doh":
            response = _doh_exchange(query, channel.url, timeout, session)
        elif channel.kind == "tcp53":
            response = dns.query.tcp(query, channel.host, timeout=timeout, port=channel.port)
        else:
            response = dns.query.udp(query, channel.host, timeout=timeout, port=channel.port)
            if response.flags & dns.flags.TC:
                response = dns.query.tcp(query, channel.host, timeout=timeout, port=channel.port)
        outcome = outcome_from_response(response)
    except (dns.exception.DNSException, OSError, EOFError, requests.RequestException, ValueError):
        outcome = DnsOutcome.timeout()
    return DnsObservation(domain=domain, channel=channel.id, outcome=outcome)


def build_control_ip_set(domain: Domain, control_obs: Iterable[DnsObservation]) -> ControlIpSet:
    ips: Set[str] = set()
    for observation in control_obs:
        if observation.domain == domain and observation.outcome.resolved:
            ips.update(observation.outcome.ips)
    return ControlIpSet(domain, frozenset(ips))


def classify_direct(
    domain: Domain,
    test_obs: DnsObservation,
    control: ControlIpSet,
    bogons: BogonList,
) -> ProbeVerdict:
    """Direct DNS checks; Verdict.MISMATCH marks a member of D'"""
    if not control.ips:
        raise ValueError(f"{domain}: control IP set is empty (domain failed liveness)")

    outcome = test_obs.outcome
    if outcome.kind == OutcomeKind.TIMEOUT:
        return ProbeVerdict(domain, Technique.DNS, Verdict.UNTESTABLE, note="test_timeout")
    if outcome.kind == OutcomeKind.ERROR:
        return ProbeVerdict(domain, Technique.DNS, Verdict.CENSORED, evidence="error",
                            details={"error_code": outcome.error_code.value})
    if any(ip in control.ips for ip in outcome.ips):
        return ProbeVerdict(domain, Technique.DNS, Verdict.UNCENSORED)
    bogus = [ip for ip in outcome.ips if is_bogon(ip, bogons)]
    if bogus:
        return ProbeVerdict(domain, Technique.DNS, Verdict.CENSORED, evidence="bogon",
                            ip=bogus[0], details={"answers": list(outcome.ips)})
    return ProbeVerdict(domain, Technique.DNS, Verdict.MISMATCH, ip=outcome.ips[0],
                        details={"answers": list(outcome.ips)})


def compute_mrf(observations: Iterable[DnsObservation], channel: str) -> MrfStat:
    """
    Relative frequency of the most frequent first-listed IP among the answer
    observations of one channel. Ties go to the lexicographically smallest IP.
    """
    sample = [obs.first_ip for obs in observations
              if obs.channel == channel and obs.outcome.resolved]
    if not sample:
        raise EmptySampleError(f"empty sample for channel '{channel}'")
    counts = Counter(sample)
    top = max(counts.values())
    modal_ip = min(ip for ip, count in counts.items() if count == top)
    return MrfStat(channel, modal_ip, top / len(sample), len(sample))


def tampering_threshold(controls: Sequence[MrfStat], sigma_mult: float = 3.0,
                        sigma_floor: float = DEFAULT_SIGMA_FLOOR) -> Tuple[float, float, float]:
    """(mean, floored sigma, mean + sigma_mult * sigma) of control MRFs"""
    if len(controls) < 2:
        raise InsufficientControlsError("insufficient controls")
    values = np.array(sorted(c.mrf for c in controls), dtype=float)
    mean = float(values.mean())
    sigma = max(float(values.std()), sigma_floor)
    return mean, sigma, mean + sigma_mult * sigma


def detect_tampering(
    test: MrfStat,
    controls: Sequence[MrfStat],
    sigma_mult: float = 3.0,
    sigma_floor: float = DEFAULT_SIGMA_FLOOR,
    min_sample: int = DEFAULT_MIN_SAMPLE,
) -> bool:
    """True iff test.mrf - mean(controls) > sigma_mult * max(std(controls), floor)"""
    mean, sigma, _ = tampering_threshold(controls, sigma_mult, sigma_floor)
    if test.sample_size < min_sample:
        return False
    return test.mrf - mean > sigma_mult * sigma


def mark_tampered_domains(
    d_prime: Iterable[Domain],
    test_observations: Iterable[DnsObservation],
    tampering: bool,
    modal_ip: Optional[str],
) -> Set[ProbeVerdict]:
    by_domain = {obs.domain: obs for obs in test_observations}
    verdicts: Set[ProbeVerdict] = set()
    for domain in d_prime:
        obs = by_domain.get(domain)
        answers = obs.outcome.ips if obs else ()
        if tampering and modal_ip is not None and modal_ip in answers:
            verdicts.add(ProbeVerdict(domain, Technique.DNS, Verdict.CENSORED,
                                      evidence="tampered_ip", ip=modal_ip))
        else:
            verdicts.add(ProbeVerdict(domain, Technique.DNS, Verdict.UNCENSORED,
                                      note="unconfirmed_mismatch",
                                      ip=answers[0] if answers else None))
    return verdicts


@dataclass
class TamperingReport:
    d_prime_size: int = 0
    test: Optional[MrfStat] = None
    controls: List[MrfStat] = field(default_factory=list)
    control_mean: Optional[float] = None
    control_sigma: Optional[float] = None
    threshold: Optional[float] = None
    fired: bool = False
    reason: str = ""

    def to_dict(self):
        return {
            "d_prime_size": self.d_prime_size,
            "test": self.test.to_dict() if self.test else None,
            "controls": [c.to_dict() for c in self.controls],
            "control_mean": self.control_mean,
            "control_sigma": self.control_sigma,
            "threshold": self.threshold,
            "fired": self.fired,
            "reason": self.reason,
        }


class DnsCensorshipDetector:
    """Runs the complete DNS classification over collected observations"""

    def __init__(
        self,
        bogons: Optional[BogonList] = None,
        sigma_mult: float = 3.0,
        sigma_floor: float = DEFAULT_SIGMA_FLOOR,
        min_dprime: int = DEFAULT_MIN_SAMPLE,
    ):
        self.bogons = bogons if bogons is not None else load_bogons()
        self.sigma_mult = sigma_mult
        self.sigma_floor = sigma_floor
        self.min_dprime = min_dprime

    def classify(
        self,
        test_obs: Mapping[Domain, DnsObservation],
        control_obs: Mapping[Domain, Sequence[DnsObservation]],
    ) -> Tuple[List[ProbeVerdict], TamperingReport]:
        verdicts: List[ProbeVerdict] = []
        d_prime: List[Domain] = []

        for domain in sorted(test_obs):
            control = build_control_ip_set(domain, control_obs.get(domain, ()))
            if not control.ips:
                verdicts.append(ProbeVerdict(domain, Technique.DNS, Verdict.UNTESTABLE,
                                             note="no_control_answer"))
                continue
            verdict = classify_direct(domain, test_obs[domain], control, self.bogons)
            if verdict.verdict == Verdict.MISMATCH:
                d_prime.append(domain)
            else:
                verdicts.append(verdict)

        report = self._tampering_analysis(d_prime, test_obs, control_obs)
        modal_ip = report.test.most_frequent_ip if report.test else None
        marked = mark_tampered_domains(
            d_prime, (test_obs[d] for d in d_prime), report.fired, modal_ip)
        verdicts.extend(marked)
        verdicts.sort(key=ProbeVerdict.sort_key)
        return verdicts, report

    def _tampering_analysis(
        self,
        d_prime: List[Domain],
        test_obs: Mapping[Domain, DnsObservation],
        control_obs: Mapping[Domain, Sequence[DnsObservation]],
    ) -> TamperingReport:
        report = TamperingReport(d_prime_size=len(d_prime))
        if len(d_prime) < self.min_dprime:
            report.reason = f"D' has {len(d_prime)} domains, below the minimum of {self.min_dprime}"
            return report

        test_sample = [test_obs[d] for d in d_prime]
        report.test = compute_mrf(test_sample, test_sample[0].channel)

        control_sample = [obs for d in d_prime for obs in control_obs.get(d, ())]
        for channel in sorted({obs.channel for obs in control_sample}):
            try:
                report.controls.append(compute_mrf(control_sample, channel))
            except EmptySampleError:
                continue

        try:
            mean, sigma, threshold = tampering_threshold(
                report.controls, self.sigma_mult, self.sigma_floor)
        except InsufficientControlsError:
            report.reason = "insufficient controls"
            return report

        report.control_mean, report.control_sigma, report.threshold = mean, sigma, threshold
        report.fired = detect_tampering(report.test, report.controls, self.sigma_mult,
                                        self.sigma_floor, self.min_dprime)
        report.reason = "tampering detected" if report.fired else "test MRF within control band"
        return report


class ControlCache:
    """TTL cache of control observations keyed by (domain, channel)"""

    def __init__(self, ttl: float = 300.0):
        self.ttl = ttl
        self._entries: Dict[Tuple[str, str], Tuple[float, DnsObservation]] = {}
        self._lock = threading.Lock()

    def get(self, domain: Domain, channel: str) -> Optional[DnsObservation]:
        with self._lock:
            entry = self._entries.get((domain, channel))
        if entry and time.monotonic() - entry[0] < self.ttl:
            return entry[1]
        return None

    def put(self, observation: DnsObservation):
        if self.ttl <= 0:
            return
        with self._lock:
            self._entries[(observation.domain, observation.channel)] = (time.monotonic(), observation)


class DnsProber:
    """Collects test and control observations for a set of domains"""

    def __init__(
        self,
        test_channel: Optional[DnsChannel],
        control_channels: Sequence[DnsChannel],
        timeout: float = DEFAULT_TIMEOUT,
        logger: Optional[ProbeLogger] = None,
        parallelism: int = 16,
        channel_rate: float = 0.0,
        cache_ttl: float = 300.0,
        writer: Optional[JsonLinesWriter] = None,
    ):
        self.test_channel = test_channel
        self.control_channels = list(control_channels)
        self.timeout = timeout
        self.logger = logger or ProbeLogger()
        self.parallelism = parallelism
        self.rate_limiter = RateLimiter(channel_rate)
        self.cache = ControlCache(cache_ttl)
        self.writer = writer
        self.session = requests.Session()
        self.session.trust_env = False

        self.stats = {
            'queries': 0,
            'cache_hits': 0,
            'answers': 0,
            'errors': 0,
            'timeouts': 0,
        }
        self._stats_lock = threading.Lock()

    def _resolve(self, domain: Domain, channel: DnsChannel) -> DnsObservation:
        self.rate_limiter.wait(channel.id)
        observation = resolve_via_channel(domain, channel, self.timeout, self.session)
        with self._stats_lock:
            self.stats['queries'] += 1
            key = {'answers': 'answers', 'error': 'errors', 'timeout': 'timeouts'}[observation.outcome.kind.value]
            self.stats[key] += 1
        if self.writer:
            self.writer.append(observation.to_dict())
        return observation

    def resolve_controls(self, domain: Domain) -> List[DnsObservation]:
        observations = []
        for channel in self.control_channels:
            cached = self.cache.get(domain, channel.id)
            if cached is not None:
                with self._stats_lock:
                    self.stats['cache_hits'] += 1
                observations.append(cached)
                continue
            observation = self._resolve(domain, channel)
            self.cache.put(observation)
            observations.append(observation)
        return observations

    def control_outcomes(self, domain: Domain) -> List[DnsOutcome]:
        return [obs.outcome for obs in self.resolve_controls(domain)]

    def control_ip_set(self, domain: Domain) -> ControlIpSet:
        return build_control_ip_set(domain, self.resolve_controls(domain))

    def resolve_test(self, domain: Domain) -> DnsObservation:
        if self.test_channel is None:
            raise ValueError("no test channel configured")
        return self._resolve(domain, self.test_channel)

    def collect(
        self, domains: Iterable[Domain]
    ) -> Tuple[Dict[Domain, DnsObservation], Dict[Domain, List[DnsObservation]]]:
        """Resolve every domain on the test channel and all control channels"""
        domains = sorted(domains)
        self.logger.start_operation("DNS Collection", len(domains))

        def work(domain: Domain):
            return self.resolve_test(domain), self.resolve_controls(domain)

        def progress(done, total, domain, _result):
            self.logger.update_progress(done, total, domain)

        results = run_bounded(work, domains, self.parallelism, progress)
        self.logger.complete_operation()

        test_obs = {d: r[0] for d, r in zip(domains, results)}
        control_obs = {d: r[1] for d, r in zip(domains, results)}
        return test_obs, control_obs
