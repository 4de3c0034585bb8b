"""
Blockprobe - SNI Filtering Probe

TLS 1.3 handshakes toward a cooperative reflector, which accepts any server
name, with the probed hostname as SNI. Only the IP address and the server
name travel in clear text, so a failure that the control side does not see
points at SNI inspection. The control handshake targets the same reflector
through a control relay (HTTP CONNECT tunnel), so only the network path
differs between the two sides.
"""

import socket
import ssl
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, List, Optional, Tuple

from core.concurrency import run_bounded
from core.config import Vantage
from core.diagnostics import ProbeLogger
from core.errors import ReflectorUnreachableError
from core.models import Domain, ProbeVerdict, Technique, Verdict
from core.records import JsonLinesWriter
from probes.tcp_probe import AttemptOutcome, open_relay_tunnel

Reflector = Tuple[str, int]

DEFAULT_TIMEOUT = 10.0
DEFAULT_RETRIES = 3
CHECK_HOSTNAME = "example.com"


class SniResult(str, Enum):
    HANDSHAKE_OK = "handshake_ok"
    RESET = "reset"
    TIMEOUT = "timeout"
    ALERT = "alert"


@dataclass
class SniProbeOutcome:
    hostname: Domain
    reflector: str
    result: SniResult
    attempt_results: List[SniResult] = field(default_factory=list)
    side: str = "test"
    via: Optional[str] = None

    @property
    def attempts(self) -> int:
        return max(1, len(self.attempt_results))

    @property
    def ok(self) -> bool:
        return self.result == SniResult.HANDSHAKE_OK

    def to_dict(self):
        return {
            "hostname": self.hostname,
            "reflector": self.reflector,
            "result": self.result.value,
            "attempts": self.attempts,
            "attempt_results": [r.value for r in self.attempt_results],
            "side": self.side,
            "via": self.via,
        }

    @classmethod
    def from_dict(cls, data) -> "SniProbeOutcome":
        return cls(
            hostname=data["hostname"],
            reflector=data["reflector"],
            result=SniResult(data["result"]),
            attempt_results=[SniResult(r) for r in data.get("attempt_results", [])],
            side=data.get("side", "test"),
            via=data.get("via"),
        )


def tls13_client_context() -> ssl.SSLContext:
    """TLS 1.3 only, no certificate or hostname validation"""
    context = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
    context.minimum_version = ssl.TLSVersion.TLSv1_3
    context.maximum_version = ssl.TLSVersion.TLSv1_3
    context.check_hostname = False
    context.verify_mode = ssl.CERT_NONE
    return context


def _open_stream(reflector: Reflector, timeout: float,
                 via: Optional[Vantage]) -> Tuple[Optional[socket.socket], Optional[SniResult]]:
    """Connected stream to the reflector, or (None, failure)"""
    if via is not None and via.is_relay:
        outcome, sock = open_relay_tunnel(reflector[0], reflector[1], via, timeout)
        if sock is None:
            return None, SniResult.TIMEOUT if outcome == AttemptOutcome.TIMEOUT else SniResult.RESET
        return sock, None
    try:
        return socket.create_connection(reflector, timeout=timeout), None
    except socket.timeout:
        return None, SniResult.TIMEOUT
    except OSError:
        return None, SniResult.RESET


def _handshake_once(hostname: str, reflector: Reflector, timeout: float,
                    context: ssl.SSLContext, via: Optional[Vantage] = None) -> SniResult:
    sock, failure = _open_stream(reflector, timeout, via)
    if sock is None:
        return failure

    try:
        with context.wrap_socket(sock, server_hostname=hostname):
            return SniResult.HANDSHAKE_OK
    except socket.timeout:
        return SniResult.TIMEOUT
    except (ConnectionResetError, BrokenPipeError, ssl.SSLEOFError, ssl.SSLZeroReturnError):
        return SniResult.RESET
    except ssl.SSLError:
        return SniResult.ALERT
    except OSError:
        return SniResult.RESET
    finally:
        sock.close()


def format_reflector(reflector: Reflector) -> str:
    return f"{reflector[0]}:{reflector[1]}"


def probe_sni(
    hostname: Domain,
    reflector: Reflector,
    timeout: float = DEFAULT_TIMEOUT,
    retries: int = DEFAULT_RETRIES,
    retry_delay: float = 0.0,
    sleep: Callable[[float], None] = time.sleep,
    via: Optional[Vantage] = None,
) -> SniProbeOutcome:
    """
    Handshake with hostname as SNI; failures are retried before recording.

    via is a relay vantage to tunnel through, or None to dial directly. No
    application data is ever written on the connection.
    """
    context = tls13_client_context()
    results: List[SniResult] = []
    for n in range(retries + 1):
        if n and retry_delay:
            sleep(retry_delay)
        result = _handshake_once(hostname, reflector, timeout, context, via)
        results.append(result)
        if result == SniResult.HANDSHAKE_OK:
            break
    return SniProbeOutcome(hostname, format_reflector(reflector), results[-1], results,
                           via=via.id if via is not None and via.is_relay else None)


def classify_sni(test: SniProbeOutcome, control: SniProbeOutcome) -> ProbeVerdict:
    details = {
        "test_result": test.result.value,
        "test_attempts": test.attempts,
        "control_result": control.result.value,
    }
    if not control.ok:
        return ProbeVerdict(test.hostname, Technique.SNI, Verdict.UNTESTABLE,
                            note="control_failed", details=details)
    if test.ok or SniResult.HANDSHAKE_OK in test.attempt_results:
        return ProbeVerdict(test.hostname, Technique.SNI, Verdict.UNCENSORED, details=details)
    return ProbeVerdict(test.hostname, Technique.SNI, Verdict.CENSORED,
                        evidence=test.result.value, details=details)


def check_reflector(reflector: Reflector, timeout: float = DEFAULT_TIMEOUT,
                    hostname: str = CHECK_HOSTNAME, via: Optional[Vantage] = None):
    """Raise ReflectorUnreachableError unless a control handshake succeeds"""
    outcome = probe_sni(hostname, reflector, timeout, retries=1, via=via)
    if not outcome.ok:
        path = f" via {via.id}" if via is not None and via.is_relay else ""
        raise ReflectorUnreachableError(
            f"reflector {format_reflector(reflector)} unreachable from the control side{path} "
            f"({outcome.result.value})")


class SniProber:
    """
    Probes hostnames from the test side and the control side.

    The control side dials control_reflector (default: the test reflector)
    through control_vantage when that is a relay.
    """

    def __init__(
        self,
        test_reflector: Reflector,
        control_reflector: Optional[Reflector] = None,
        control_vantage: Optional[Vantage] = None,
        timeout: float = DEFAULT_TIMEOUT,
        retries: int = DEFAULT_RETRIES,
        parallelism: int = 16,
        logger: Optional[ProbeLogger] = None,
        writer: Optional[JsonLinesWriter] = None,
    ):
        self.test_reflector = test_reflector
        self.control_reflector = control_reflector or test_reflector
        self.control_vantage = control_vantage
        self.timeout = timeout
        self.retries = retries
        self.parallelism = parallelism
        self.logger = logger or ProbeLogger()
        self.writer = writer
        self.stats = {'handshakes': 0, 'test_failures': 0}
        self._stats_lock = threading.Lock()

    def preflight(self):
        self.logger.log_info(f"Checking control reflector {format_reflector(self.control_reflector)}")
        check_reflector(self.control_reflector, self.timeout, via=self.control_vantage)

    def probe(self, hostname: Domain) -> ProbeVerdict:
        test = probe_sni(hostname, self.test_reflector, self.timeout, self.retries)
        control = probe_sni(hostname, self.control_reflector, self.timeout, self.retries,
                            via=self.control_vantage)
        control.side = "control"
        if self.writer:
            self.writer.append(test.to_dict())
            self.writer.append(control.to_dict())
        with self._stats_lock:
            self.stats['handshakes'] += test.attempts + control.attempts
            self.stats['test_failures'] += not test.ok
        return classify_sni(test, control)

    def probe_domains(self, domains: Iterable[Domain]) -> List[ProbeVerdict]:
        domains = sorted(domains)
        self.preflight()
        self.logger.start_operation("SNI Probing", len(domains))

        def work(domain):
            try:
                return self.probe(domain)
            except Exception as e:
                self.logger.log_error(f"SNI probe failed: {e}", domain, "SNI Probe")
                return ProbeVerdict(domain, Technique.SNI, Verdict.UNTESTABLE, note="probe_error")

        def progress(done, total, domain, verdict):
            self.logger.update_progress(done, total, domain)
            self.logger.log_probe("sni", domain, verdict.verdict.value, verdict.evidence or "")

        verdicts = run_bounded(work, domains, self.parallelism, progress)
        self.logger.complete_operation()
        return verdicts
