"""
Blockprobe - Run configuration

RunConfig carries every tunable of a measurement run: channels, vantages,
reflectors, the 3-sigma thresholds and the retry discipline. Values come
from dataclass defaults, then command-line flags, then a JSON config file
(the file wins), and finally BLOCKPROBE_OUTPUT_DIR for the output directory.
"""

import json
import os
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, Mapping, Optional, Tuple
from urllib.parse import urlparse

from core.errors import ConfigError

OUTPUT_DIR_ENV = "BLOCKPROBE_OUTPUT_DIR"

CHANNEL_KINDS = ("udp53", "tcp53", "doh")
VANTAGE_KINDS = ("local", "relay")

SUBCOMMANDS = (
    "ingest", "probe-dns", "probe-tcp", "probe-http", "probe-sni",
    "analyze", "simulate", "full",
)


def split_host_port(address: str, default_port: int) -> Tuple[str, int]:
    """Split 'host[:port]' (IPv6 hosts in brackets)"""
    address = address.strip()
    if not address:
        raise ConfigError("empty address")
    if address.startswith("["):
        host, _, rest = address[1:].partition("]")
        port = rest.lstrip(":")
    elif address.count(":") == 1:
        host, port = address.split(":")
    else:
        host, port = address, ""
    try:
        return host, int(port) if port else default_port
    except ValueError:
        raise ConfigError(f"invalid port in address '{address}'")


@dataclass(frozen=True)
class DnsChannel:
    """A resolver reachable as UDP/TCP port 53 style socket or DoH URL"""

    id: str
    kind: str
    host: str = ""
    port: int = 53
    url: str = ""

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DnsChannel":
        try:
            channel_id = str(data["id"])
            kind = str(data["kind"])
            address = str(data["address"])
        except KeyError as e:
            raise ConfigError(f"channel definition missing field {e}")
        if kind not in CHANNEL_KINDS:
            raise ConfigError(f"channel '{channel_id}': unknown kind '{kind}'")
        if kind == "doh":
            if urlparse(address).scheme not in ("http", "https"):
                raise ConfigError(f"channel '{channel_id}': DoH address must be a URL")
            return cls(channel_id, kind, url=address)
        host, port = split_host_port(address, 53)
        return cls(channel_id, kind, host=host, port=port)

    @classmethod
    def parse(cls, spec: str) -> "DnsChannel":
        """Parse 'id=kind:address' from the command line"""
        channel_id, sep, rest = spec.partition("=")
        kind, sep2, address = rest.partition(":")
        if not sep or not sep2:
            raise ConfigError(f"channel '{spec}' is not of the form id=kind:address")
        return cls.from_dict({"id": channel_id, "kind": kind, "address": address})

    def to_dict(self) -> Dict[str, Any]:
        address = self.url if self.kind == "doh" else f"{self.host}:{self.port}"
        return {"id": self.id, "kind": self.kind, "address": address}


@dataclass(frozen=True)
class Vantage:
    """Where HTTP fetches and TCP handshakes originate"""

    id: str
    kind: str
    host: str = ""
    port: int = 0

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Vantage":
        try:
            vantage_id = str(data["id"])
            kind = str(data["kind"])
        except KeyError as e:
            raise ConfigError(f"vantage definition missing field {e}")
        if kind not in VANTAGE_KINDS:
            raise ConfigError(f"vantage '{vantage_id}': unknown kind '{kind}'")
        address = str(data.get("address") or "")
        if kind == "relay":
            if not address:
                raise ConfigError(f"vantage '{vantage_id}': relay needs an address")
            host, port = split_host_port(address, 8080)
            return cls(vantage_id, kind, host, port)
        return cls(vantage_id, kind)

    @classmethod
    def parse(cls, spec: str) -> "Vantage":
        vantage_id, sep, rest = spec.partition("=")
        kind, _, address = rest.partition(":")
        if not sep:
            raise ConfigError(f"vantage '{spec}' is not of the form id=kind[:address]")
        return cls.from_dict({"id": vantage_id, "kind": kind, "address": address})

    @property
    def is_relay(self) -> bool:
        return self.kind == "relay"

    @property
    def proxy_url(self) -> Optional[str]:
        return f"http://{self.host}:{self.port}" if self.is_relay else None

    def to_dict(self) -> Dict[str, Any]:
        address = f"{self.host}:{self.port}" if self.is_relay else ""
        return {"id": self.id, "kind": self.kind, "address": address}


@dataclass(frozen=True)
class Thresholds:
    sigma_mult: float = 3.0
    sigma_floor_dns: float = 0.01
    sigma_floor_len: float = 1.0
    sigma_floor_cos: float = 0.01
    min_dprime: int = 20


@dataclass
class RunConfig:
    """Complete configuration of one run"""

    corpus_path: Optional[str] = None
    corpus_format: str = "plain"
    output_dir: str = "blockprobe_out"
    isp: str = "test-isp"

    test_channel: Optional[DnsChannel] = None
    control_channels: List[DnsChannel] = field(default_factory=list)
    test_vantage: Vantage = field(default_factory=lambda: Vantage("test", "local"))
    control_vantages: List[Vantage] = field(default_factory=list)
    test_reflector: Optional[Tuple[str, int]] = None
    control_reflector: Optional[Tuple[str, int]] = None

    thresholds: Thresholds = field(default_factory=Thresholds)

    dns_timeout: float = 5.0
    control_cache_ttl: float = 300.0
    channel_rate: float = 0.0
    bogons_path: Optional[str] = None

    tcp_ports: Tuple[int, ...] = (80, 443)
    tcp_retries: int = 5
    tcp_retry_delay: float = 100.0
    tcp_timeout: float = 10.0
    ping_count: int = 5
    ping_timeout: float = 2.0
    max_ips_per_domain: int = 3

    http_timeout: float = 30.0
    http_port: int = 80
    host_rate: float = 0.0
    signatures_path: Optional[str] = None

    sni_retries: int = 3
    sni_timeout: float = 10.0
    sni_parallelism: int = 16

    parallelism: int = 16

    scenario_paths: List[str] = field(default_factory=list)
    control_count: int = 5

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any], base: Optional["RunConfig"] = None) -> "RunConfig":
        """Overlay a flat mapping (config file or parsed flags) onto base"""
        config = replace(base) if base else cls()
        known = {f.name for f in fields(cls)}
        updates: Dict[str, Any] = {}

        for key, value in data.items():
            key = key.replace("-", "_")
            if value is None:
                continue
            if key == "thresholds":
                current = config.thresholds
                try:
                    updates[key] = replace(current, **dict(value))
                except TypeError as e:
                    raise ConfigError(f"thresholds: {e}")
            elif key == "test_channel":
                updates[key] = _as_channel(value)
            elif key == "control_channels":
                updates[key] = [_as_channel(v) for v in value]
            elif key == "test_vantage":
                updates[key] = _as_vantage(value)
            elif key == "control_vantages":
                updates[key] = [_as_vantage(v) for v in value]
            elif key in ("test_reflector", "control_reflector"):
                updates[key] = value if isinstance(value, tuple) else split_host_port(str(value), 443)
            elif key == "tcp_ports":
                updates[key] = tuple(int(p) for p in value)
            elif key == "scenario_paths":
                updates[key] = list(value)
            elif key in known:
                updates[key] = value
            else:
                raise ConfigError(f"unknown configuration key '{key}'")

        return replace(config, **updates)

    @classmethod
    def load(
        cls,
        flags: Optional[Mapping[str, Any]] = None,
        config_path: Optional[str] = None,
        environ: Optional[Mapping[str, str]] = None,
    ) -> "RunConfig":
        config = cls.from_mapping(flags or {})
        if config_path:
            try:
                with open(config_path, "r", encoding="utf-8") as f:
                    file_data = json.load(f)
            except (OSError, json.JSONDecodeError) as e:
                raise ConfigError(f"cannot read config file {config_path}: {e}")
            if not isinstance(file_data, dict):
                raise ConfigError("config file must hold a JSON object")
            config = cls.from_mapping(file_data, base=config)
        environ = os.environ if environ is None else environ
        if environ.get(OUTPUT_DIR_ENV):
            config = replace(config, output_dir=environ[OUTPUT_DIR_ENV])
        return config

    def validate(self, subcommand: str) -> List[str]:
        """Raise ConfigError on hard violations; return soft warnings"""
        warnings: List[str] = []
        if subcommand not in SUBCOMMANDS:
            raise ConfigError(f"unknown subcommand '{subcommand}'")
        if self.thresholds.sigma_mult <= 0:
            raise ConfigError("sigma_mult must be > 0")
        if self.tcp_retries < 0 or self.tcp_retry_delay < 0:
            raise ConfigError("retries and retry delay must be >= 0")
        if self.channel_rate < 0 or self.host_rate < 0:
            raise ConfigError("rate limits must be >= 0")
        if self.corpus_format not in ("plain", "csv"):
            raise ConfigError(f"unknown corpus format '{self.corpus_format}'")

        simulated = bool(self.scenario_paths)
        if subcommand == "simulate" and not simulated:
            raise ConfigError("simulate needs at least one scenario")
        if simulated and subcommand in ("full", "simulate"):
            if self.control_count < 2:
                raise ConfigError("at least 2 simulated controls are required")
            if self.control_count < 3:
                warnings.append("fewer than 3 control vantages: body test degraded")
            return warnings

        if subcommand in ("ingest", "full") and not self.corpus_path:
            raise ConfigError(f"{subcommand} needs a corpus file")
        if subcommand in ("ingest", "probe-dns", "probe-tcp", "probe-http", "full"):
            if len(self.control_channels) < 2:
                raise ConfigError("at least 2 control channels are required")
        if subcommand in ("probe-dns", "full") and self.test_channel is None:
            raise ConfigError("a test channel is required")
        if subcommand in ("probe-http", "full"):
            if len(self.control_vantages) < 2:
                raise ConfigError("at least 2 control vantages are required")
            if len(self.control_vantages) < 3:
                warnings.append("fewer than 3 control vantages: body test degraded")
        if subcommand in ("probe-tcp", "full") and not self.control_vantages:
            raise ConfigError("TCP probing needs a control vantage")
        if subcommand in ("probe-sni", "full"):
            if self.test_reflector is None:
                raise ConfigError("SNI probing needs --reflector")
            if self.sni_control_vantage() is None and self.control_reflector in (None, self.test_reflector):
                raise ConfigError("SNI probing needs a relay control vantage or a separate --control-reflector")
        return warnings

    def sni_control_vantage(self) -> Optional[Vantage]:
        """First relay among the control vantages; the SNI control side tunnels through it"""
        return next((v for v in self.control_vantages if v.is_relay), None)

    def describe(self) -> Dict[str, Any]:
        """Flat summary for the session log"""
        return {
            "isp": self.isp,
            "output_dir": self.output_dir,
            "test_channel": self.test_channel.to_dict() if self.test_channel else None,
            "control_channels": [c.to_dict() for c in self.control_channels],
            "control_vantages": [v.to_dict() for v in self.control_vantages],
            "thresholds": vars(self.thresholds),
            "tcp": f"ports={list(self.tcp_ports)} retries={self.tcp_retries} delay={self.tcp_retry_delay}s",
            "sni_retries": self.sni_retries,
        }


def _as_channel(value: Any) -> DnsChannel:
    if isinstance(value, DnsChannel):
        return value
    if isinstance(value, str):
        return DnsChannel.parse(value)
    return DnsChannel.from_dict(value)


def _as_vantage(value: Any) -> Vantage:
    if isinstance(value, Vantage):
        return value
    if isinstance(value, str):
        return Vantage.parse(value)
    return Vantage.from_dict(value)


def parse_ports(text: str) -> Tuple[int, ...]:
    try:
        ports = tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"invalid port list '{text}'")
    if not ports or any(not 0 < p < 65536 for p in ports):
        raise ConfigError(f"invalid port list '{text}'")
    return ports
