"""
Blockprobe - Censor Scenarios

A scenario is one JSON file describing how a simulated ISP censors:

- dns_rules:     domain -> clean | nxdomain | servfail | refused | drop
                 | {"action": "fixed_ip" | "bogon", "ip": ...}
- http_rules:    domain -> pass | rst | {"action": "blockpage", "body", "status", "headers"}
                 | {"action": "redirect", "location", "status"} | {"action": "error", "status", "headers"}
- sni_blocklist: domains whose ClientHello gets a TCP reset
- tcp_rules:     IP -> pass | drop | rst
- origins:       domain -> {"base_body", "length_jitter", "status", "location", "headers"}
- zone, dead_domains, open_ports, isp, seed, corpus

Unknown domains resolve cleanly and pass every middlebox.
"""

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

from jsonschema import Draft7Validator, FormatChecker
from jsonschema.exceptions import best_match

from core.errors import ScenarioError
from core.models import Domain, Technique
from probes.corpus import normalize_domain
from probes.dns_engine import load_bogons

DNS_ERROR_ACTIONS = ("nxdomain", "servfail", "refused")
DNS_ACTIONS = ("clean", "drop", "fixed_ip", "bogon") + DNS_ERROR_ACTIONS
HTTP_ACTIONS = ("pass", "rst", "blockpage", "redirect", "error")
TCP_ACTIONS = ("pass", "drop", "rst")

DEFAULT_BLOCKPAGE = (
    "<center><b>The website has been blocked as per orders of the "
    "competent authority.</b><br><i>Department of Telecommunications</i></center>"
)

_IPV4 = {"type": "string", "format": "ipv4"}
_HEADERS = {"type": "object", "additionalProperties": {"type": "string"}}
_STATUS = {"type": "integer", "minimum": 100, "maximum": 599}

SCENARIO_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "isp": {"type": "string", "minLength": 1},
        "seed": {"type": "integer"},
        "dns_rules": {
            "type": "object",
            "additionalProperties": {
                "type": ["string", "object"],
                "if": {"type": "string"},
                "then": {"enum": [a for a in DNS_ACTIONS if a not in ("fixed_ip", "bogon")]},
                "else": {
                    "additionalProperties": False,
                    "required": ["action"],
                    "properties": {"action": {"enum": list(DNS_ACTIONS)}, "ip": _IPV4},
                    "if": {"properties": {"action": {"enum": ["fixed_ip", "bogon"]}}},
                    "then": {"required": ["action", "ip"]},
                },
            },
        },
        "http_rules": {
            "type": "object",
            "additionalProperties": {
                "type": ["string", "object"],
                "if": {"type": "string"},
                "then": {"enum": ["pass", "rst"]},
                "else": {
                    "additionalProperties": False,
                    "required": ["action"],
                    "properties": {
                        "action": {"enum": list(HTTP_ACTIONS)},
                        "status": _STATUS,
                        "body": {"type": "string"},
                        "location": {"type": "string", "minLength": 1},
                        "headers": _HEADERS,
                    },
                    "allOf": [
                        {
                            "if": {"properties": {"action": {"const": "redirect"}}},
                            "then": {"required": ["action", "location"]},
                        },
                        {
                            "if": {"properties": {"action": {"const": "error"}}},
                            "then": {"required": ["action", "status"]},
                        },
                    ],
                },
            },
        },
        "sni_blocklist": {"type": "array", "items": {"type": "string"}},
        "origins": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "additionalProperties": False,
                "properties": {
                    "base_body": {"type": "string"},
                    "length_jitter": {"type": "integer", "minimum": 0},
                    "status": _STATUS,
                    "location": {"type": "string"},
                    "headers": _HEADERS,
                },
            },
        },
        "zone": {
            "type": "object",
            "additionalProperties": {"type": "array", "items": _IPV4, "minItems": 1},
        },
        "dead_domains": {"type": "array", "items": {"type": "string"}},
        "tcp_rules": {
            "type": "object",
            "propertyNames": {"format": "ipv4"},
            "additionalProperties": {"enum": list(TCP_ACTIONS)},
        },
        "open_ports": {
            "type": "array",
            "items": {"type": "integer", "minimum": 1, "maximum": 65535},
            "minItems": 1,
        },
        "corpus": {"type": "array", "items": {"type": "string"}},
    },
}

_validator = Draft7Validator(SCENARIO_SCHEMA, format_checker=FormatChecker())


@dataclass(frozen=True)
class DnsRule:
    action: str = "clean"
    ip: Optional[str] = None


@dataclass
class HttpRule:
    action: str = "pass"
    status: Optional[int] = None
    body: str = ""
    location: Optional[str] = None
    headers: Dict[str, str] = field(default_factory=dict)


@dataclass
class OriginSpec:
    base_body: str
    length_jitter: int = 0
    status: int = 200
    location: Optional[str] = None
    headers: Dict[str, str] = field(default_factory=dict)


def default_origin_body(domain: Domain) -> str:
    return (
        f"<html><head><title>{domain}</title></head><body>"
        f"<h1>{domain}</h1><div><p>Welcome to {domain}.</p>"
        f"<p>Latest articles and updates.</p><a href=\"/about\">About</a></div>"
        f"</body></html>"
    )


def synthetic_ip(domain: Domain) -> str:
    """Stable public-looking address for domains without a zone entry"""
    digest = hashlib.sha256(domain.encode("utf-8")).digest()
    return f"45.{digest[0]}.{digest[1]}.{digest[2] % 254 + 1}"


@dataclass
class CensorScenario:
    isp: str = "simulated-isp"
    seed: int = 0
    dns_rules: Dict[Domain, DnsRule] = field(default_factory=dict)
    http_rules: Dict[Domain, HttpRule] = field(default_factory=dict)
    sni_blocklist: FrozenSet[Domain] = frozenset()
    origins: Dict[Domain, OriginSpec] = field(default_factory=dict)
    zone: Dict[Domain, List[str]] = field(default_factory=dict)
    dead_domains: FrozenSet[Domain] = frozenset()
    tcp_rules: Dict[str, str] = field(default_factory=dict)
    open_ports: Tuple[int, ...] = (80, 443)
    corpus: List[str] = field(default_factory=list)

    def dns_rule(self, domain: Domain) -> DnsRule:
        return self.dns_rules.get(domain, DnsRule())

    def http_rule(self, domain: Domain) -> HttpRule:
        return self.http_rules.get(domain, HttpRule())

    def origin(self, domain: Domain) -> OriginSpec:
        return self.origins.get(domain) or OriginSpec(default_origin_body(domain))

    def zone_ips(self, domain: Domain) -> List[str]:
        return list(self.zone.get(domain) or [synthetic_ip(domain)])

    def tcp_rule(self, ip: str) -> str:
        return self.tcp_rules.get(ip, "pass")

    def is_dead(self, domain: Domain) -> bool:
        return domain in self.dead_domains

    def domains(self) -> Set[Domain]:
        """Every domain the scenario mentions"""
        return (set(self.dns_rules) | set(self.http_rules) | set(self.sni_blocklist)
                | set(self.origins) | set(self.zone) | set(self.dead_domains))


def _domain_key(name: str, path: Sequence[Any]) -> Domain:
    domain = normalize_domain(name)
    if domain is None:
        raise ScenarioError(f"invalid domain name '{name}'", path)
    return domain


def _rule_object(value: Any) -> Dict[str, Any]:
    return {"action": value} if isinstance(value, str) else dict(value)


def scenario_from_dict(data: Mapping[str, Any]) -> CensorScenario:
    """Validate decoded scenario data and build the scenario"""
    error = best_match(_validator.iter_errors(data))
    if error is not None:
        raise ScenarioError(error.message, list(error.absolute_path))

    bogons = load_bogons()
    scenario = CensorScenario(
        isp=data.get("isp", "simulated-isp"),
        seed=int(data.get("seed", 0)),
        open_ports=tuple(data.get("open_ports", (80, 443))),
        corpus=list(data.get("corpus", [])),
        tcp_rules=dict(data.get("tcp_rules", {})),
    )

    for name, value in data.get("dns_rules", {}).items():
        path = ["dns_rules", name]
        rule = _rule_object(value)
        if rule["action"] == "bogon" and rule["ip"] not in bogons:
            raise ScenarioError(f"bogon rule IP {rule['ip']} is not a special-use address", path + ["ip"])
        scenario.dns_rules[_domain_key(name, path)] = DnsRule(rule["action"], rule.get("ip"))

    for name, value in data.get("http_rules", {}).items():
        rule = _rule_object(value)
        action = rule["action"]
        status = rule.get("status")
        if status is None:
            status = {"blockpage": 200, "redirect": 302}.get(action)
        body = rule.get("body", DEFAULT_BLOCKPAGE if action == "blockpage" else "")
        scenario.http_rules[_domain_key(name, ["http_rules", name])] = HttpRule(
            action, status, body, rule.get("location"), dict(rule.get("headers", {})))

    for name, spec in data.get("origins", {}).items():
        domain = _domain_key(name, ["origins", name])
        scenario.origins[domain] = OriginSpec(
            spec.get("base_body", default_origin_body(domain)),
            spec.get("length_jitter", 0),
            spec.get("status", 200),
            spec.get("location"),
            dict(spec.get("headers", {})),
        )

    for name, ips in data.get("zone", {}).items():
        scenario.zone[_domain_key(name, ["zone", name])] = list(ips)

    scenario.sni_blocklist = frozenset(
        _domain_key(name, ["sni_blocklist", i]) for i, name in enumerate(data.get("sni_blocklist", [])))
    scenario.dead_domains = frozenset(
        _domain_key(name, ["dead_domains", i]) for i, name in enumerate(data.get("dead_domains", [])))
    return scenario


def load_scenario(config) -> CensorScenario:
    """Parse a scenario from bytes, text or a binary/text file object"""
    if hasattr(config, "read"):
        config = config.read()
    if isinstance(config, bytes):
        config = config.decode("utf-8-sig")
    try:
        data = json.loads(config)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"not valid JSON: {e.msg} (line {e.lineno})")
    return scenario_from_dict(data)


def load_scenario_file(path: str) -> CensorScenario:
    try:
        with open(path, "rb") as f:
            return load_scenario(f)
    except OSError as e:
        raise ScenarioError(f"cannot read scenario file {path}: {e}")


def expected_censored(
    scenario: CensorScenario,
    domains: Iterable[Domain],
    max_ips_per_domain: int = 3,
    ports: Sequence[int] = (80, 443),
    http_port: int = 80,
    min_dprime: int = 20,
    sigma_mult: float = 3.0,
    sigma_floor: float = 0.01,
) -> Dict[Technique, Set[Domain]]:
    """
    Rule-derived set of domains each technique should flag, given that
    every control side resolves and fetches cleanly. Blockpages are assumed
    structurally distinct from origin pages.
    """
    live = {d for d in domains if not scenario.is_dead(d)}
    bogons = load_bogons()
    expected: Dict[Technique, Set[Domain]] = {t: set() for t in Technique}

    mismatched: Dict[Domain, str] = {}
    for domain in live:
        rule = scenario.dns_rule(domain)
        zone = scenario.zone_ips(domain)
        if rule.action in DNS_ERROR_ACTIONS:
            expected[Technique.DNS].add(domain)
        elif rule.action in ("fixed_ip", "bogon") and rule.ip not in zone:
            if rule.ip in bogons:
                expected[Technique.DNS].add(domain)
            else:
                mismatched[domain] = rule.ip
    if mismatched and len(mismatched) >= min_dprime:
        counts = Counter(mismatched.values())
        top = max(counts.values())
        modal_ip = min(ip for ip, n in counts.items() if n == top)
        control_counts = Counter(scenario.zone_ips(d)[0] for d in mismatched)
        control_mrf = max(control_counts.values()) / len(mismatched)
        if top / len(mismatched) - control_mrf > sigma_mult * sigma_floor:
            expected[Technique.DNS].update(d for d, ip in mismatched.items() if ip == modal_ip)

    for domain in live:
        ips = sorted(scenario.zone_ips(domain))[:max_ips_per_domain or None]
        open_ports = [p for p in ports if p in scenario.open_ports]
        if open_ports and any(scenario.tcp_rule(ip) != "pass" for ip in ips):
            expected[Technique.TCPIP].add(domain)

        if http_port in scenario.open_ports:
            for ip in ips:
                tcp = scenario.tcp_rule(ip)
                if tcp == "rst" or (tcp == "pass" and scenario.http_rule(domain).action != "pass"):
                    expected[Technique.HTTP].add(domain)
                    break

        if domain in scenario.sni_blocklist:
            expected[Technique.SNI].add(domain)

    return expected
