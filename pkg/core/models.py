"""
Blockprobe - Shared record types

Records passed between the probe modules, the simulator and the analysis
layer. All records are immutable and serialize to plain JSON dicts so they
can be appended to JSON-lines files and read back for offline analysis.
"""

from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Dict, Optional, Sequence, Tuple

# Lowercase DNS name, IDNA form, no trailing dot
Domain = str


class Technique(str, Enum):
    DNS = "dns"
    TCPIP = "tcpip"
    HTTP = "http"
    SNI = "sni"


class Verdict(str, Enum):
    CENSORED = "censored"
    UNCENSORED = "uncensored"
    UNTESTABLE = "untestable"
    # Provisional DNS state, resolved by tampering analysis before persisting
    MISMATCH = "mismatch"


class OutcomeKind(str, Enum):
    ANSWERS = "answers"
    ERROR = "error"
    TIMEOUT = "timeout"


class DnsErrorCode(str, Enum):
    NXDOMAIN = "NXDOMAIN"
    SERVFAIL = "SERVFAIL"
    REFUSED = "REFUSED"
    OTHER = "other"


@dataclass(frozen=True)
class DnsOutcome:
    """Outcome of one resolution attempt. ips keep answer order."""

    kind: OutcomeKind
    ips: Tuple[str, ...] = ()
    error_code: Optional[DnsErrorCode] = None

    def __post_init__(self):
        if (self.kind == OutcomeKind.ANSWERS) != bool(self.ips):
            raise ValueError("ips must be non-empty exactly when kind is answers")
        if (self.kind == OutcomeKind.ERROR) != (self.error_code is not None):
            raise ValueError("error_code must be set exactly when kind is error")

    @classmethod
    def answers(cls, ips) -> "DnsOutcome":
        return cls(OutcomeKind.ANSWERS, tuple(ips))

    @classmethod
    def error(cls, code: DnsErrorCode) -> "DnsOutcome":
        return cls(OutcomeKind.ERROR, (), DnsErrorCode(code))

    @classmethod
    def timeout(cls) -> "DnsOutcome":
        return cls(OutcomeKind.TIMEOUT)

    @property
    def resolved(self) -> bool:
        return self.kind == OutcomeKind.ANSWERS

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind.value,
            "ips": list(self.ips),
            "error_code": self.error_code.value if self.error_code else None,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DnsOutcome":
        code = data.get("error_code")
        return cls(
            OutcomeKind(data["kind"]),
            tuple(data.get("ips") or ()),
            DnsErrorCode(code) if code else None,
        )


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


@dataclass(frozen=True)
class DnsObservation:
    domain: Domain
    channel: str
    outcome: DnsOutcome
    timestamp: datetime = field(default_factory=utc_now)

    @property
    def first_ip(self) -> Optional[str]:
        return self.outcome.ips[0] if self.outcome.ips else None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "domain": self.domain,
            "channel": self.channel,
            "outcome": self.outcome.to_dict(),
            "timestamp": self.timestamp.isoformat(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DnsObservation":
        return cls(
            domain=data["domain"],
            channel=data["channel"],
            outcome=DnsOutcome.from_dict(data["outcome"]),
            timestamp=datetime.fromisoformat(data["timestamp"]),
        )


@dataclass(frozen=True)
class ProbeVerdict:
    """Classification of one (domain, technique), optionally for one IP"""

    domain: Domain
    technique: Technique
    verdict: Verdict
    evidence: Optional[str] = None
    note: Optional[str] = None
    ip: Optional[str] = None
    matched_signature: Optional[str] = None
    details: Dict[str, Any] = field(default_factory=dict, compare=False)

    @property
    def censored(self) -> bool:
        return self.verdict == Verdict.CENSORED

    def to_dict(self) -> Dict[str, Any]:
        return {
            "domain": self.domain,
            "technique": self.technique.value,
            "verdict": self.verdict.value,
            "evidence": self.evidence,
            "note": self.note,
            "ip": self.ip,
            "matched_signature": self.matched_signature,
            "details": self.details,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ProbeVerdict":
        return cls(
            domain=data["domain"],
            technique=Technique(data["technique"]),
            verdict=Verdict(data["verdict"]),
            evidence=data.get("evidence"),
            note=data.get("note"),
            ip=data.get("ip"),
            matched_signature=data.get("matched_signature"),
            details=data.get("details") or {},
        )

    def sort_key(self) -> Tuple[str, str, str]:
        return (self.domain, self.technique.value, self.ip or "")


def fold_pair_verdicts(domain: Domain, technique: Technique,
                       pair_verdicts: Sequence[ProbeVerdict]) -> ProbeVerdict:
    """Censored if any (ip, port) pair is, Untestable if all are, else Uncensored"""
    if not pair_verdicts:
        return ProbeVerdict(domain, technique, Verdict.UNTESTABLE, note="no_pairs_probed")
    censored = sorted((v for v in pair_verdicts if v.censored), key=ProbeVerdict.sort_key)
    if censored:
        signature = next((v.matched_signature for v in censored if v.matched_signature), None)
        return ProbeVerdict(domain, technique, Verdict.CENSORED, evidence=censored[0].evidence,
                            ip=censored[0].ip, matched_signature=signature,
                            details={"pairs_censored": len(censored), "pairs": len(pair_verdicts)})
    if all(v.verdict == Verdict.UNTESTABLE for v in pair_verdicts):
        return ProbeVerdict(domain, technique, Verdict.UNTESTABLE, note=pair_verdicts[0].note)
    return ProbeVerdict(domain, technique, Verdict.UNCENSORED)
