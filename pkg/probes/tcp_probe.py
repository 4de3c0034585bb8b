"""
Blockprobe - TCP/IP Blocking Probe

Reachability (ICMP echo through the system ping tool) and TCP handshake
probes on ports 80 and 443, run from the test vantage and from a control
vantage for every (IP, port) pair of a domain's control IP set.

Features:
- Retry discipline: 1 + retries attempts with a fixed delay in between
- Local handshakes or HTTP CONNECT through a relay vantage
- Ping auto-skipped (capability_missing) without a usable ping tool
- Per-pair and per-domain classification
"""

import shutil
import socket
import subprocess
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from core.concurrency import run_bounded
from core.config import Vantage
from core.diagnostics import ProbeLogger
from core.models import Domain, ProbeVerdict, Technique, Verdict, fold_pair_verdicts
from core.records import JsonLinesWriter

DEFAULT_PORTS = (80, 443)
DEFAULT_RETRIES = 5
DEFAULT_RETRY_DELAY = 100.0
DEFAULT_TIMEOUT = 10.0


class AttemptOutcome(str, Enum):
    SUCCESS = "success"
    REFUSED = "refused"
    TIMEOUT = "timeout"
    UNREACHABLE = "unreachable"


CAPABILITY_MISSING = "capability_missing"


@dataclass
class TcpProbeResult:
    """Attempts against one IP; port None means the ping step"""

    ip: str
    port: Optional[int]
    attempt_outcomes: List[AttemptOutcome] = field(default_factory=list)
    vantage: str = ""
    skipped: Optional[str] = None

    @property
    def attempts(self) -> int:
        return len(self.attempt_outcomes)

    @property
    def succeeded(self) -> bool:
        return AttemptOutcome.SUCCESS in self.attempt_outcomes

    @property
    def failed(self) -> bool:
        """Ran, and no attempt succeeded"""
        return self.skipped is None and bool(self.attempt_outcomes) and not self.succeeded

    def to_dict(self) -> Dict:
        return {
            "ip": self.ip,
            "port": self.port,
            "vantage": self.vantage,
            "attempt_outcomes": [o.value for o in self.attempt_outcomes],
            "attempts": self.attempts,
            "skipped": self.skipped,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "TcpProbeResult":
        return cls(
            ip=data["ip"],
            port=data.get("port"),
            attempt_outcomes=[AttemptOutcome(o) for o in data.get("attempt_outcomes", [])],
            vantage=data.get("vantage", ""),
            skipped=data.get("skipped"),
        )


@dataclass
class TcpProbePair:
    """Reachability step plus handshake for one (ip, port) from one vantage"""

    handshake: TcpProbeResult
    reachability: Optional[TcpProbeResult] = None


def _retrying(attempt: Callable[[], AttemptOutcome], retries: int, retry_delay: float,
              sleep: Callable[[float], None]) -> List[AttemptOutcome]:
    outcomes = []
    for n in range(retries + 1):
        if n:
            sleep(retry_delay)
        outcome = attempt()
        outcomes.append(outcome)
        if outcome == AttemptOutcome.SUCCESS:
            break
    return outcomes


def _ping_once(ip: str, timeout: float) -> Optional[AttemptOutcome]:
    """One echo request; None when ping cannot run here"""
    cmd = ["ping", "-n", "-c", "1", "-W", str(max(1, int(round(timeout)))), ip]
    try:
        proc = subprocess.run(cmd, capture_output=True, text=True, timeout=timeout + 5)
    except subprocess.TimeoutExpired:
        return AttemptOutcome.TIMEOUT
    except OSError:
        return None
    if proc.returncode == 0:
        return AttemptOutcome.SUCCESS
    stderr = proc.stderr.lower()
    if "permission" in stderr or "not permitted" in stderr:
        return None
    if "unreachable" in (proc.stdout + stderr).lower():
        return AttemptOutcome.UNREACHABLE
    return AttemptOutcome.TIMEOUT


def probe_reachability(
    ip: str,
    vantage: Optional[Vantage] = None,
    count: int = 5,
    timeout: float = 2.0,
) -> TcpProbeResult:
    """
    Echo requests to ip, stopping at the first reply.

    Relay vantages have no ICMP path and a host without a usable ping tool
    cannot send echo requests; both report capability_missing.
    """
    result = TcpProbeResult(ip, None, vantage=vantage.id if vantage else "local")
    if (vantage and vantage.is_relay) or shutil.which("ping") is None:
        result.skipped = CAPABILITY_MISSING
        return result

    for _ in range(max(1, count)):
        outcome = _ping_once(ip, timeout)
        if outcome is None:
            result.attempt_outcomes = []
            result.skipped = CAPABILITY_MISSING
            return result
        result.attempt_outcomes.append(outcome)
        if outcome == AttemptOutcome.SUCCESS:
            break
    return result


def _connect_local(ip: str, port: int, timeout: float) -> AttemptOutcome:
    try:
        with socket.create_connection((ip, port), timeout=timeout):
            return AttemptOutcome.SUCCESS
    except socket.timeout:
        return AttemptOutcome.TIMEOUT
    except (ConnectionRefusedError, ConnectionResetError):
        return AttemptOutcome.REFUSED
    except OSError:
        return AttemptOutcome.UNREACHABLE


_CONNECT_STATUS = {
    200: AttemptOutcome.SUCCESS,
    502: AttemptOutcome.REFUSED,
    503: AttemptOutcome.UNREACHABLE,
    504: AttemptOutcome.TIMEOUT,
}


def open_relay_tunnel(ip: str, port: int, relay: Vantage,
                      timeout: float) -> Tuple[AttemptOutcome, Optional[socket.socket]]:
    """
    Ask the relay to open (ip, port) with HTTP CONNECT.

    Returns:
        (outcome, socket); the socket is the open tunnel on SUCCESS and None
        otherwise
    """
    target = f"{ip}:{port}"
    request = f"CONNECT {target} HTTP/1.1\r\nHost: {target}\r\n\r\n".encode("ascii")
    try:
        sock = socket.create_connection((relay.host, relay.port), timeout=timeout)
    except OSError:
        return AttemptOutcome.UNREACHABLE, None

    try:
        sock.sendall(request)
        reply = b""
        while b"\r\n\r\n" not in reply and len(reply) < 4096:
            chunk = sock.recv(1)
            if not chunk:
                break
            reply += chunk
    except socket.timeout:
        sock.close()
        return AttemptOutcome.TIMEOUT, None
    except ConnectionResetError:
        sock.close()
        return AttemptOutcome.REFUSED, None
    except OSError:
        sock.close()
        return AttemptOutcome.UNREACHABLE, None

    status_line = reply.split(b"\r\n", 1)[0].split()
    if len(status_line) < 2 or not status_line[1].isdigit():
        outcome = AttemptOutcome.TIMEOUT
    else:
        outcome = _CONNECT_STATUS.get(int(status_line[1]), AttemptOutcome.UNREACHABLE)
    if outcome != AttemptOutcome.SUCCESS:
        sock.close()
        return outcome, None
    return outcome, sock


def _connect_via_relay(ip: str, port: int, relay: Vantage, timeout: float) -> AttemptOutcome:
    outcome, sock = open_relay_tunnel(ip, port, relay, timeout)
    if sock is not None:
        sock.close()
    return outcome


def probe_tcp(
    ip: str,
    port: int,
    vantage: Optional[Vantage] = None,
    retries: int = DEFAULT_RETRIES,
    retry_delay: float = DEFAULT_RETRY_DELAY,
    timeout: float = DEFAULT_TIMEOUT,
    sleep: Callable[[float], None] = time.sleep,
) -> TcpProbeResult:
    """
    TCP 3-way handshake with (ip, port), retried on failure.

    Args:
        vantage: local (None) or a relay reached through HTTP CONNECT
        retries: extra attempts after a failed first one
        retry_delay: seconds between attempts

    Returns:
        TcpProbeResult with 1 attempt on immediate success, otherwise
        1 + retries attempts
    """
    if vantage is not None and vantage.is_relay:
        attempt = lambda: _connect_via_relay(ip, port, vantage, timeout)
    else:
        attempt = lambda: _connect_local(ip, port, timeout)
    outcomes = _retrying(attempt, retries, retry_delay, sleep)
    return TcpProbeResult(ip, port, outcomes, vantage=vantage.id if vantage else "local")


def classify_tcpip(domain: Domain, test: TcpProbePair, control: TcpProbePair) -> ProbeVerdict:
    """Censored iff every test handshake attempt failed while the control succeeded"""
    handshake = test.handshake
    details = {
        "port": handshake.port,
        "test_attempts": [o.value for o in handshake.attempt_outcomes],
        "control_attempts": [o.value for o in control.handshake.attempt_outcomes],
    }
    if test.reachability is not None:
        details["test_ping"] = test.reachability.skipped or [
            o.value for o in test.reachability.attempt_outcomes]

    if not control.handshake.succeeded:
        return ProbeVerdict(domain, Technique.TCPIP, Verdict.UNTESTABLE, ip=handshake.ip,
                            note="control_failed", details=details)
    if handshake.succeeded or not handshake.failed:
        return ProbeVerdict(domain, Technique.TCPIP, Verdict.UNCENSORED, ip=handshake.ip,
                            details=details)

    evidence = "handshake_failed"
    if test.reachability is not None and test.reachability.failed:
        evidence = "ip_unreachable"
    return ProbeVerdict(domain, Technique.TCPIP, Verdict.CENSORED, ip=handshake.ip,
                        evidence=evidence, details=details)


def classify_domain_tcpip(domain: Domain, pair_verdicts: Sequence[ProbeVerdict]) -> ProbeVerdict:
    return fold_pair_verdicts(domain, Technique.TCPIP, pair_verdicts)


def select_ips(ips: Iterable[str], cap: int) -> List[str]:
    """Deterministic subset of a control IP set"""
    return sorted(ips)[:max(0, cap)] if cap else sorted(ips)


class TcpProber:
    """Runs reachability and handshake probes for domains from both vantages"""

    def __init__(
        self,
        test_vantage: Vantage,
        control_vantages: Sequence[Vantage],
        ports: Sequence[int] = DEFAULT_PORTS,
        retries: int = DEFAULT_RETRIES,
        retry_delay: float = DEFAULT_RETRY_DELAY,
        timeout: float = DEFAULT_TIMEOUT,
        ping_count: int = 5,
        ping_timeout: float = 2.0,
        max_ips_per_domain: int = 3,
        parallelism: int = 16,
        logger: Optional[ProbeLogger] = None,
        writer: Optional[JsonLinesWriter] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if not control_vantages:
            raise ValueError("at least one control vantage is required")
        self.test_vantage = test_vantage
        self.control_vantages = list(control_vantages)
        self.ports = tuple(ports)
        self.retries = retries
        self.retry_delay = retry_delay
        self.timeout = timeout
        self.ping_count = ping_count
        self.ping_timeout = ping_timeout
        self.max_ips_per_domain = max_ips_per_domain
        self.parallelism = parallelism
        self.logger = logger or ProbeLogger()
        self.writer = writer
        self.sleep = sleep

        self.stats = {
            'ips_probed': 0,
            'handshakes': 0,
            'ping_skipped': 0,
        }
        self._stats_lock = threading.Lock()

    def _record(self, result: TcpProbeResult, side: str):
        if self.writer:
            record = result.to_dict()
            record["side"] = side
            self.writer.append(record)

    def _handshake(self, ip: str, port: int, vantage: Vantage) -> TcpProbeResult:
        return probe_tcp(ip, port, vantage, self.retries, self.retry_delay, self.timeout, self.sleep)

    def _control_handshake(self, ip: str, port: int) -> TcpProbeResult:
        """First control vantage that completes the handshake, else the last result"""
        result = None
        for vantage in self.control_vantages:
            result = self._handshake(ip, port, vantage)
            self._record(result, "control")
            if result.succeeded:
                break
        return result  # type: ignore[return-value]

    def probe_ip(self, domain: Domain, ip: str) -> List[ProbeVerdict]:
        """All ports of one IP; attempts for a port are strictly sequential"""
        reachability = probe_reachability(ip, self.test_vantage, self.ping_count, self.ping_timeout)
        self._record(reachability, "test")
        if reachability.skipped:
            with self._stats_lock:
                self.stats['ping_skipped'] += 1

        verdicts = []
        for port in self.ports:
            test = TcpProbePair(self._handshake(ip, port, self.test_vantage), reachability)
            self._record(test.handshake, "test")
            control = TcpProbePair(self._control_handshake(ip, port))
            with self._stats_lock:
                self.stats['handshakes'] += 1
            verdicts.append(classify_tcpip(domain, test, control))
        with self._stats_lock:
            self.stats['ips_probed'] += 1
        return verdicts

    def probe_domains(self, control_ips: Dict[Domain, Iterable[str]]) -> Tuple[List[ProbeVerdict], List[ProbeVerdict]]:
        """
        Probe every domain's capped IP set.

        Returns:
            (domain verdicts, per-(ip, port) verdicts)
        """
        pairs = [(domain, ip) for domain in sorted(control_ips)
                 for ip in select_ips(control_ips[domain], self.max_ips_per_domain)]
        self.logger.start_operation("TCP/IP Probing", len(pairs))
        self.logger.log_config("Ports", list(self.ports))
        self.logger.log_config("Retries", f"{self.retries} x {self.retry_delay}s")

        def work(pair):
            domain, ip = pair
            try:
                return self.probe_ip(domain, ip)
            except Exception as e:
                self.logger.log_error(f"TCP probe failed: {e}", f"{domain}/{ip}", "TCP Probe")
                return [ProbeVerdict(domain, Technique.TCPIP, Verdict.UNTESTABLE, ip=ip,
                                     note="probe_error")]

        def progress(done, total, pair, _result):
            self.logger.update_progress(done, total, f"{pair[0]} ({pair[1]})")

        results = run_bounded(work, pairs, self.parallelism, progress)

        pair_verdicts: Dict[Domain, List[ProbeVerdict]] = {d: [] for d in control_ips}
        for (domain, _ip), verdicts in zip(pairs, results):
            pair_verdicts[domain].extend(verdicts)

        domain_verdicts = []
        for domain in sorted(pair_verdicts):
            verdict = classify_domain_tcpip(domain, pair_verdicts[domain])
            self.logger.log_probe("tcpip", domain, verdict.verdict.value, verdict.evidence or "")
            domain_verdicts.append(verdict)

        self.logger.complete_operation()
        flat = sorted((v for vs in pair_verdicts.values() for v in vs),
                      key=lambda v: (v.domain, v.ip or "", v.details.get("port") or 0))
        return domain_verdicts, flat
